"""Contrastive learning of hierarchical discrete item identifiers.

Multi-modal item embeddings are encoded, fused with attention, and pushed
through a differentiable residual quantizer trained with an NT-Xent
objective. The learned codebooks assign every item a short tuple of tokens,
which a generative-retrieval harness then decodes with beam search over a
token trie.
"""

from .autodiff import AdamState, Tape, adam_update, finite_diff
from .data import SyntheticSpec, generate_synthetic, load_dataset, load_items, load_sequences
from .loss import NegativePolicy, nt_xent
from .model import TokenizerModel
from .quantizer import AlphaSchedule, CodebookStack, alpha_at, hard_quantize, soft_quantize
from .retrieval import MarkovTokenModel, TokenTrie, beam_search, evaluate, recall_at_k
from .tokens import (TokenTable, TokenTuple, assign_all, cluster_purity, code_perplexity,
                     collision_rate, export_table, import_table)
from .trainer import TrainConfig, TrainReport, checkpoint_load, checkpoint_save, train

__version__ = "0.1.0"
