"""
Generative retrieval over a token trie
======================================

A Markov model over tokens scores the next identifier given a user's
history. Beam search only follows prefixes that exist in the trie, so every
candidate is a real item. A wide enough beam reproduces the exhaustive
ranking.
"""

import numpy as np

from contok.retrieval import MarkovTokenModel, TokenTrie, beam_search, brute_force_ranking
from contok.tokens import build_table

rng = np.random.default_rng(7)
n = 30
ids = [f"i{k:02d}" for k in range(n)]
codes = [tuple(int(c) for c in rng.integers(0, 4, size=3)) for _ in range(n)]
table = build_table(ids, codes, 3, 4, "shared", "demo")
trie = TokenTrie(table)

seqs = [[table.token(ids[int(j)]) for j in rng.integers(0, n, size=12)] for _ in range(40)]
model = MarkovTokenModel.for_table(table).fit(seqs)
history = seqs[0][:5]

narrow = beam_search(model, trie, history, beam_width=5, k=5)
print("beam 5:", [(i, round(s, 3)) for i, s in narrow])

wide = beam_search(model, trie, history, beam_width=n, k=n)
exact = brute_force_ranking(model, trie, history)
print("wide beam equals exhaustive ranking:", [i for i, _ in wide] == [i for i, _ in exact])
