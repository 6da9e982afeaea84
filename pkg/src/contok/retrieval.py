"""Generative-retrieval harness: a count-based autoregressive token model,
a prefix trie over valid identifiers, trie-constrained beam search and
Recall@K.

The token model stands in for a seq2seq transformer. It keeps the same
factorization: the next item's identifier is generated token by token, each
token conditioned on the history and on the tokens already emitted.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .tokens import TokenTable, TokenTuple


class TrieNode:
    __slots__ = ("children", "item")

    def __init__(self):
        self.children = {}
        self.item = None


class TokenTrie:
    """Prefix tree over every full identifier in a token table."""

    def __init__(self, table: TokenTable):
        self.root = TrieNode()
        self.n_leaves = 0
        for item, tok in table.item_to_token.items():
            node = self.root
            for t in tok.tokens:
                if node.item is not None:
                    raise ValueError(f"identifier of {node.item!r} is a prefix of {item!r}'s")
                node = node.children.setdefault(int(t), TrieNode())
            if node.children or node.item is not None:
                raise ValueError(f"identifier of {item!r} is a prefix of another identifier")
            node.item = item
            self.n_leaves += 1

    def leaves(self):
        """All ``(tokens, item)`` pairs, depth first in token order."""
        out = []
        stack = [((), self.root)]
        while stack:
            prefix, node = stack.pop()
            if node.item is not None:
                out.append((prefix, node.item))
            for t in sorted(node.children, reverse=True):
                stack.append((prefix + (t,), node.children[t]))
        return out

    def contains(self, tokens):
        node = self.root
        for t in tokens:
            node = node.children.get(int(t))
            if node is None:
                return False
        return node.item is not None


class MarkovTokenModel:
    """Additively smoothed count model over identifier token streams.

    The context of a token is the identifiers of up to ``order`` previous
    items plus the tokens of the current identifier emitted so far. When a
    context was never seen in training the model backs off to a shorter item
    history, ending at the position prior (no item history).

    Args:
        vocab_sizes: number of valid token values at each position
            (``levels`` code positions followed by the suffix position).
        order: number of previous items in the context.
        smoothing: additive constant per count cell.
    """

    def __init__(self, vocab_sizes, order=2, smoothing=0.01):
        if order < 0:
            raise ValueError("order must be nonnegative")
        if smoothing <= 0:
            raise ValueError("smoothing must be positive")
        self.vocab_sizes = tuple(int(v) for v in vocab_sizes)
        self.order = int(order)
        self.smoothing = float(smoothing)
        self.counts = defaultdict(Counter)
        self.totals = Counter()

    @classmethod
    def for_table(cls, table: TokenTable, order=2, smoothing=0.01):
        suffix = max((t.disambiguator for t in table.item_to_token.values()
                      if t.disambiguator is not None), default=-1) + 1
        return cls([table.size] * table.levels + [max(suffix, 1)], order, smoothing)

    def _check(self, tokens):
        tokens = tuple(int(t) for t in tokens)
        if len(tokens) > len(self.vocab_sizes):
            raise ValueError(f"identifier {tokens} is longer than the model's positions")
        for pos, t in enumerate(tokens):
            if not 0 <= t < self.vocab_sizes[pos]:
                raise ValueError(f"token {t} at position {pos} is outside the vocabulary "
                                 f"[0, {self.vocab_sizes[pos]})")
        return tokens

    def fit(self, sequences):
        """Count token transitions. ``sequences`` holds lists of identifiers
        (token tuples or :class:`TokenTuple`)."""
        n = 0
        for seq in sequences:
            ids = [self._check(s.tokens if isinstance(s, TokenTuple) else s) for s in seq]
            for j, target in enumerate(ids):
                for o in range(min(self.order, j) + 1):
                    ctx = tuple(ids[j - o : j])
                    for pos in range(len(target)):
                        key = (ctx, target[:pos])
                        self.counts[key][target[pos]] += 1
                        self.totals[key] += 1
                n += 1
        if n == 0:
            raise ValueError("no training events")
        return self

    def _context(self, history):
        history = [self._check(h.tokens if isinstance(h, TokenTuple) else h) for h in history]
        return tuple(history[len(history) - self.order :]) if self.order else ()

    def _pick(self, ctx, prefix):
        for o in range(len(ctx), -1, -1):
            key = (ctx[len(ctx) - o :], prefix)
            if self.totals.get(key, 0) > 0:
                return key
        return ((), prefix)

    def prob(self, history, prefix, token):
        """``p(token | history, prefix)`` at position ``len(prefix)``."""
        return math.exp(self._logprob(self._context(history), tuple(prefix), int(token)))

    def _logprob(self, ctx, prefix, token):
        key = self._pick(ctx, prefix)
        v = self.vocab_sizes[len(prefix)]
        c = self.counts[key].get(token, 0) if key in self.counts else 0
        return math.log((c + self.smoothing) / (self.totals.get(key, 0) + self.smoothing * v))

    def distribution(self, history, prefix):
        ctx = self._context(history)
        prefix = tuple(prefix)
        v = self.vocab_sizes[len(prefix)]
        return np.array([math.exp(self._logprob(ctx, prefix, t)) for t in range(v)])

    def sequence_logprob(self, history, tokens):
        ctx = self._context(history)
        tokens = tuple(int(t) for t in tokens)
        return sum(self._logprob(ctx, tokens[:i], tokens[i]) for i in range(len(tokens)))


def beam_search(model, trie, history, beam_width=50, k=10):
    """Top-``k`` items by summed token log-probability.

    Beams expand one token at a time along trie edges only; at most
    ``beam_width`` unfinished beams survive each step. Returns a list of
    ``(item_id, score)`` sorted by descending score, ties by smaller item id.
    """
    if not beam_width >= k >= 1:
        raise ValueError(f"need beam_width >= k >= 1, got beam_width={beam_width}, k={k}")
    ctx = model._context(history)
    beams = [(0.0, (), trie.root)]
    finished = []
    while beams:
        expanded = []
        for score, prefix, node in beams:
            for t, child in node.children.items():
                s = score + model._logprob(ctx, prefix, t)
                if child.item is not None:
                    finished.append((s, child.item))
                else:
                    expanded.append((s, prefix + (t,), child))
        expanded.sort(key=lambda b: (-b[0], b[1]))
        beams = expanded[:beam_width]
    finished.sort(key=lambda f: (-f[0], f[1]))
    return [(item, s) for s, item in finished[:k]]


def brute_force_ranking(model, trie, history):
    """Every leaf scored by exact sequence log-probability, best first."""
    scored = [(model.sequence_logprob(history, tokens), item) for tokens, item in trie.leaves()]
    scored.sort(key=lambda f: (-f[0], f[1]))
    return [(item, s) for s, item in scored]


def recall_at_k(predictions, truths, k):
    """Fraction of events whose truth is in the first ``k`` predictions."""
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths differ in length")
    if not truths:
        raise ValueError("no events")
    hits = sum(truth in list(pred)[:k] for pred, truth in zip(predictions, truths))
    return hits / len(truths)


@dataclass
class EvalEvent:
    user: str
    history: list
    truth: str


def heldout_events(splits):
    """One event per test-split item: predict it from everything before it."""
    events = []
    for user, test in splits.test.items():
        full = splits.full[user]
        start = len(full) - len(test)
        for j in range(start, len(full)):
            events.append(EvalEvent(user, full[:j], full[j]))
    return events


def evaluate(table, splits, ks=(5, 10), beam_width=50, order=2, smoothing=0.01, threads=1):
    """Fit the token model on training splits and report Recall@K on test events."""
    ks = sorted(int(k) for k in ks)
    if beam_width < ks[-1]:
        raise ValueError(f"beam width {beam_width} is smaller than max K {ks[-1]}")
    for seq in splits.full.values():
        for item in seq:
            if item not in table.item_to_token:
                raise KeyError(f"sequence item {item!r} is not in the token table")
    model = MarkovTokenModel.for_table(table, order, smoothing)
    model.fit([[table.token(i) for i in seq] for seq in splits.train.values() if seq])
    trie = TokenTrie(table)
    events = heldout_events(splits)
    if not events:
        raise ValueError("no test events")

    def run(ev):
        hist = [table.token(i) for i in ev.history]
        return [item for item, _ in beam_search(model, trie, hist, beam_width, ks[-1])]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(run, events))
    else:
        preds = [run(ev) for ev in events]
    truths = [ev.truth for ev in events]
    return {
        "K": ks,
        "beam_width": beam_width,
        "recall": {str(k): recall_at_k(preds, truths, k) for k in ks},
        "n_events": len(events),
        "model_order": order,
    }


def shuffled_table(table, rng):
    """Same identifiers, randomly reassigned to items (a no-semantics baseline)."""
    items = list(table.item_to_token)
    toks = [table.item_to_token[i] for i in items]
    perm = rng.permutation(len(items))
    return TokenTable(table.levels, table.size, table.mode, table.checksum,
                      {items[i]: toks[p] for i, p in enumerate(perm)})
