"""Token table: final identifiers, collision suffixes, diagnostics, file I/O.

The table file is JSON Lines. Line 1 is a header object, every following
line is one item::

    {"format": "contok-token-table", "version": 1, "levels": 3, "size": 48,
     "mode": "shared", "codebook_checksum": "..."}
    {"item_id": "i000", "codes": [3, 17, 5]}
    {"item_id": "i001", "codes": [3, 17, 5], "disambiguator": 0}
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TABLE_FORMAT = "contok-token-table"
TABLE_VERSION = 1


class TableError(ValueError):
    def __init__(self, message, path=None, line=None):
        where = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


class ChecksumWarning(UserWarning):
    pass


@dataclass(frozen=True, order=True)
class TokenTuple:
    codes: tuple
    disambiguator: int | None = None

    @property
    def tokens(self):
        """Full token sequence, suffix included when present."""
        if self.disambiguator is None:
            return self.codes
        return self.codes + (self.disambiguator,)


@dataclass
class TokenTable:
    levels: int
    size: int
    mode: str
    checksum: str
    item_to_token: dict = field(default_factory=dict)   # item id -> TokenTuple

    def __post_init__(self):
        self._token_to_item = {}
        for item, tok in self.item_to_token.items():
            if tok in self._token_to_item:
                raise TableError(f"identifier {tok.tokens} assigned to both "
                                 f"{self._token_to_item[tok]!r} and {item!r}")
            self._token_to_item[tok] = item

    def __len__(self):
        return len(self.item_to_token)

    def __eq__(self, other):
        return (isinstance(other, TokenTable) and self.header() == other.header()
                and self.item_to_token == other.item_to_token)

    def token(self, item_id):
        return self.item_to_token[item_id]

    def lookup(self, token):
        """Item id for a full identifier (TokenTuple or token sequence)."""
        if not isinstance(token, TokenTuple):
            token = tuple(int(t) for t in token)
            if len(token) == self.levels:
                token = TokenTuple(token)
            else:
                token = TokenTuple(token[: self.levels], token[self.levels])
        return self._token_to_item[token]

    def raw_codes(self):
        return [t.codes for t in self.item_to_token.values()]

    def header(self):
        return {"format": TABLE_FORMAT, "version": TABLE_VERSION, "levels": self.levels,
                "size": self.size, "mode": self.mode, "codebook_checksum": self.checksum}


def _item_order(ids):
    return sorted(ids)


def build_table(item_ids, codes, levels, size, mode, checksum):
    """Attach ordinal suffixes to colliding raw tuples (ascending item id)."""
    groups = defaultdict(list)
    for item, c in zip(item_ids, codes):
        groups[tuple(int(x) for x in c)].append(item)
    mapping = {}
    for raw, members in groups.items():
        if len(members) == 1:
            mapping[members[0]] = TokenTuple(raw)
        else:
            for k, item in enumerate(_item_order(members)):
                mapping[item] = TokenTuple(raw, k)
    ordered = {item: mapping[item] for item in item_ids}
    return TokenTable(levels, size, mode, checksum, ordered)


def assign_all(item_ids, xs, model):
    """Tokenize every item through ``model`` (hard path, no noise)."""
    codes = model.tokenize(xs)
    stack = model.codebooks()
    return build_table(item_ids, codes, stack.levels, stack.size, stack.mode, stack.checksum())


def collision_rate(tuples):
    """``1 - distinct / total`` over raw code tuples."""
    tuples = [tuple(int(x) for x in t) for t in tuples]
    if not tuples:
        raise ValueError("collision_rate needs at least one tuple")
    return 1.0 - len(set(tuples)) / len(tuples)


def usage_entropy(codes):
    counts = np.array(list(Counter(int(c) for c in codes).values()), dtype=np.float64)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def code_perplexity(assignments, level=None):
    """exp(entropy) of empirical code usage.

    ``assignments`` is either a 1-D sequence of codes, or an (N, L) array
    together with the 0-based ``level`` to read.
    """
    a = np.asarray(assignments)
    if a.size == 0:
        raise ValueError("code_perplexity needs at least one assignment")
    if a.ndim == 2:
        if level is None:
            raise ValueError("level is required for 2-D assignments")
        a = a[:, level]
    return math.exp(usage_entropy(a))


def identifier_perplexity(codes):
    """Geometric mean over levels of per-level code perplexity."""
    codes = np.asarray(codes)
    levels = codes.shape[1]
    logs = [usage_entropy(codes[:, l]) for l in range(levels)]
    return math.exp(sum(logs) / levels)


def cluster_purity(codes, labels):
    """Sum over code groups of the majority-label count, divided by N."""
    codes = list(codes)
    if labels is None:
        raise ValueError("cluster purity unavailable: no ground-truth labels")
    labels = list(labels)
    if len(codes) != len(labels) or not codes:
        raise ValueError("codes and labels must be nonempty and the same length")
    groups = defaultdict(Counter)
    for c, y in zip(codes, labels):
        groups[c][y] += 1
    return sum(max(cnt.values()) for cnt in groups.values()) / len(codes)


def level_metrics(codes):
    """Rows for the metrics CSV: one per level plus an ``identifier`` row."""
    codes = np.asarray(codes)
    coll = collision_rate(codes)
    rows = []
    for l in range(codes.shape[1]):
        h = usage_entropy(codes[:, l])
        rows.append({"level": str(l + 1), "perplexity": math.exp(h), "usage_entropy": h,
                     "collision_rate_raw": coll})
    ppl = identifier_perplexity(codes)
    rows.append({"level": "identifier", "perplexity": ppl, "usage_entropy": math.log(ppl),
                 "collision_rate_raw": coll})
    return rows


def export_table(table, path):
    with open(path, "w") as fh:
        fh.write(json.dumps(table.header()) + "\n")
        for item, tok in table.item_to_token.items():
            rec = {"item_id": item, "codes": list(tok.codes)}
            if tok.disambiguator is not None:
                rec["disambiguator"] = tok.disambiguator
            fh.write(json.dumps(rec) + "\n")


def import_table(path, expected_checksum=None, allow_checksum_mismatch=False):
    """Read a table file, validating every record.

    A checksum differing from ``expected_checksum`` raises unless
    ``allow_checksum_mismatch`` is set, in which case it only warns.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise TableError("empty token table file", path, 1)
    try:
        header = json.loads(lines[0])
    except ValueError:
        raise TableError("header is not valid JSON", path, 1) from None
    if not isinstance(header, dict) or header.get("format") != TABLE_FORMAT:
        raise TableError("not a token table (bad header)", path, 1)
    if header.get("version") != TABLE_VERSION:
        raise TableError(f"unsupported table version {header.get('version')!r}", path, 1)
    for key, kind in (("levels", int), ("size", int), ("mode", str), ("codebook_checksum", str)):
        if not isinstance(header.get(key), kind) or isinstance(header.get(key), bool):
            raise TableError(f"header field {key!r} missing or not {kind.__name__}", path, 1)
    levels, size = header["levels"], header["size"]
    if levels <= 0 or size <= 0:
        raise TableError("header levels and size must be positive", path, 1)
    checksum = header["codebook_checksum"]
    if expected_checksum is not None and checksum != expected_checksum:
        msg = f"{path}: codebook checksum mismatch (table {checksum[:12]}, codebooks {expected_checksum[:12]})"
        if not allow_checksum_mismatch:
            raise TableError(msg + "; pass the override flag to accept")
        warnings.warn(msg, ChecksumWarning, stacklevel=2)

    mapping, seen = {}, {}
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        try:
            rec = json.loads(text)
        except ValueError:
            raise TableError("record is not valid JSON", path, lineno) from None
        if not isinstance(rec, dict) or "item_id" not in rec or "codes" not in rec:
            raise TableError("record needs 'item_id' and 'codes'", path, lineno)
        codes = rec["codes"]
        if (not isinstance(codes, list) or len(codes) != levels
                or not all(isinstance(c, int) and not isinstance(c, bool) for c in codes)):
            raise TableError(f"codes must be a list of {levels} integers", path, lineno)
        if any(c < 0 or c >= size for c in codes):
            raise TableError(f"code out of range [0, {size})", path, lineno)
        dis = rec.get("disambiguator")
        if dis is not None and (not isinstance(dis, int) or isinstance(dis, bool) or dis < 0):
            raise TableError("disambiguator must be a nonnegative integer", path, lineno)
        item = rec["item_id"]
        if not isinstance(item, str):
            raise TableError("item_id must be a string", path, lineno)
        if item in mapping:
            raise TableError(f"duplicate item_id {item!r}", path, lineno)
        tok = TokenTuple(tuple(codes), dis)
        if tok in seen:
            raise TableError(f"duplicate identifier {tok.tokens} (also line {seen[tok]})", path, lineno)
        seen[tok] = lineno
        mapping[item] = tok
    return TokenTable(levels, size, header["mode"], checksum, mapping)
