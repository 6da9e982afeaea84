"""Loading embeddings and interaction sequences; seeded synthetic datasets.

File formats
------------
``items.jsonl``
    one record per line: ``{"item_id": str, "modalities": {name: [float, ...]}}``
``manifest.json``
    ``{"modalities": [{"name": str, "width": int}, ...], "n_items": int, ...}``
``labels.json``
    ``{"levels": int, "labels": {item_id: [int, ...]}}`` (synthetic data only)
``sequences.jsonl``
    one user per line, chronological: ``{"user_id": str, "items": [item_id, ...]}``
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import substream

ITEMS_FILE = "items.jsonl"
MANIFEST_FILE = "manifest.json"
LABELS_FILE = "labels.json"
SEQUENCES_FILE = "sequences.jsonl"


class DataError(ValueError):
    """Malformed input, located by file and line where possible."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


def _reject_constant(name):
    raise ValueError(f"non-finite value {name}")


def _parse_line(text, path, lineno):
    try:
        return json.loads(text, parse_constant=_reject_constant)
    except ValueError as exc:
        raise DataError(f"invalid JSON ({exc})", path, lineno) from None


@dataclass
class ItemRecord:
    item_id: str
    modalities: dict


@dataclass
class DatasetManifest:
    modalities: dict                 # name -> width, in declared order
    n_items: int | None = None
    sources: dict = field(default_factory=dict)
    labels_file: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, width in self.modalities.items():
            if int(width) <= 0:
                raise DataError(f"modality {name!r} has non-positive width {width}")

    def to_json(self):
        doc = {
            "modalities": [{"name": n, "width": int(w)} for n, w in self.modalities.items()],
            "n_items": self.n_items,
            "sources": self.sources,
            "labels_file": self.labels_file,
        }
        doc.update(self.extra)
        return json.dumps(doc, indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text, path=None):
        try:
            doc = json.loads(text)
        except ValueError as exc:
            raise DataError(f"invalid manifest JSON ({exc})", path) from None
        if not isinstance(doc, dict) or not isinstance(doc.get("modalities", []), list):
            raise DataError("manifest must be an object with a 'modalities' list", path)
        mods = {}
        for entry in doc.get("modalities", []):
            if (not isinstance(entry, dict) or not isinstance(entry.get("name"), str)
                    or not isinstance(entry.get("width"), int) or isinstance(entry.get("width"), bool)):
                raise DataError("each modality needs a string 'name' and an integer 'width'", path)
            name = entry["name"]
            if name in mods:
                raise DataError(f"duplicate modality name {name!r}", path)
            mods[name] = entry["width"]
        if not mods:
            raise DataError("manifest declares no modalities", path)
        known = {"modalities", "n_items", "sources", "labels_file"}
        extra = {k: v for k, v in doc.items() if k not in known}
        return cls(mods, doc.get("n_items"), doc.get("sources") or {}, doc.get("labels_file"), extra)


def load_manifest(path):
    path = Path(path)
    return DatasetManifest.from_json(path.read_text(), path)


def load_items(path, manifest):
    """Read and validate an embeddings file against ``manifest``."""
    path = Path(path)
    records, seen = [], set()
    with open(path) as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            doc = _parse_line(text, path, lineno)
            if not isinstance(doc, dict) or "item_id" not in doc or "modalities" not in doc:
                raise DataError("record needs 'item_id' and 'modalities'", path, lineno)
            item_id = doc["item_id"]
            if not isinstance(item_id, str):
                raise DataError("item_id must be a string", path, lineno)
            if item_id in seen:
                raise DataError(f"duplicate item_id {item_id!r}", path, lineno)
            seen.add(item_id)
            mods = doc["modalities"]
            if not isinstance(mods, dict):
                raise DataError("'modalities' must be an object", path, lineno)
            unknown = set(mods) - set(manifest.modalities)
            if unknown:
                raise DataError(f"unknown modality {sorted(unknown)[0]!r}", path, lineno)
            vecs = {}
            for name, width in manifest.modalities.items():
                if name not in mods:
                    raise DataError(f"item {item_id!r} lacks modality {name!r}", path, lineno)
                vals = mods[name]
                if not isinstance(vals, list) or not all(
                        isinstance(x, (int, float)) and not isinstance(x, bool) for x in vals):
                    raise DataError(f"modality {name!r} is not a list of numbers", path, lineno)
                v = np.array(vals, dtype=np.float64)
                if v.ndim != 1 or v.shape[0] != width:
                    raise DataError(
                        f"modality {name!r} has {v.size} values, manifest says {width}", path, lineno)
                if not np.all(np.isfinite(v)):
                    raise DataError(f"modality {name!r} contains a non-finite value", path, lineno)
                vecs[name] = v
            records.append(ItemRecord(item_id, vecs))
    if manifest.n_items is not None and len(records) != manifest.n_items:
        raise DataError(f"manifest says {manifest.n_items} items, file has {len(records)}", path)
    return records


def write_items(path, records):
    with open(path, "w") as fh:
        for rec in records:
            doc = {"item_id": rec.item_id,
                   "modalities": {k: v.tolist() for k, v in rec.modalities.items()}}
            fh.write(json.dumps(doc) + "\n")


def modality_matrices(records, manifest):
    """Stack records into one (N, width) array per modality, in manifest order."""
    return [np.stack([r.modalities[name] for r in records]) for name in manifest.modalities]


def load_labels(path):
    doc = json.loads(Path(path).read_text())
    return {k: tuple(v) for k, v in doc["labels"].items()}


@dataclass
class SequenceSplits:
    train: dict      # user_id -> items
    valid: dict
    test: dict
    full: dict       # filtered full sequences

    @property
    def users(self):
        return list(self.full)


def split_sequence(items, fractions=(0.8, 0.1)):
    """Chronological 80/10/10 split: a 10-item sequence gives 8/1/1."""
    n = len(items)
    a = math.floor(fractions[0] * n + 1e-9)
    b = math.floor((fractions[0] + fractions[1]) * n + 1e-9)
    return items[:a], items[a:b], items[b:]


def filter_sequences(seqs, min_item_count=10, min_user_count=10):
    """Drop rare items and short users, repeated until nothing changes."""
    seqs = {u: list(s) for u, s in seqs.items()}
    while True:
        counts = Counter(i for s in seqs.values() for i in s)
        keep = {i for i, c in counts.items() if c >= min_item_count}
        new = {}
        for u, s in seqs.items():
            s2 = [i for i in s if i in keep]
            if len(s2) >= min_user_count:
                new[u] = s2
        if new == seqs:
            return new
        seqs = new


def read_sequences(path, known_items=None):
    path = Path(path)
    seqs = {}
    with open(path) as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            doc = _parse_line(text, path, lineno)
            if not isinstance(doc, dict) or "user_id" not in doc or "items" not in doc:
                raise DataError("record needs 'user_id' and 'items'", path, lineno)
            user = doc["user_id"]
            if not isinstance(user, str):
                raise DataError("user_id must be a string", path, lineno)
            if user in seqs:
                raise DataError(f"duplicate user_id {user!r}", path, lineno)
            items = doc["items"]
            if not isinstance(items, list) or not all(isinstance(i, str) for i in items):
                raise DataError("'items' must be a list of item id strings", path, lineno)
            if known_items is not None:
                for i in items:
                    if i not in known_items:
                        raise DataError(f"unknown item id {i!r}", path, lineno)
            seqs[user] = items
    return seqs


def load_sequences(path, known_items=None, min_item_count=10, min_user_count=10):
    """Read sequences, filter to a fixed point, and split chronologically."""
    seqs = filter_sequences(read_sequences(path, known_items), min_item_count, min_user_count)
    train, valid, test = {}, {}, {}
    for u, s in seqs.items():
        train[u], valid[u], test[u] = split_sequence(s)
    return SequenceSplits(train, valid, test, seqs)


def write_sequences(path, seqs):
    with open(path, "w") as fh:
        for u, items in seqs.items():
            fh.write(json.dumps({"user_id": u, "items": list(items)}) + "\n")


@dataclass
class SyntheticSpec:
    """Hierarchical Gaussian mixture with per-modality linear views.

    ``walk`` is ``"branch"`` (random walks that mostly stay inside the
    current level-2 branch) or ``"deterministic"`` (every item has a fixed
    successor).
    """

    branching: tuple = (8, 8, 8)
    items_per_leaf: int = 1
    latent_dim: int = 16
    top_scale: float = 1.0
    shrink: float = 0.3
    item_noise: float = 0.02
    modalities: dict = field(default_factory=lambda: {"text": 32, "image": 24})
    modality_noise: dict = field(default_factory=lambda: {"text": 0.02, "image": 0.02})
    informativeness: dict = field(default_factory=lambda: {"text": 1.0, "image": 1.0})
    n_users: int = 300
    min_len: int = 10
    max_len: int = 20
    walk: str = "branch"
    p_branch: float = 0.8
    p_top: float = 0.15
    seed: int = 42

    def __post_init__(self):
        self.branching = tuple(int(b) for b in self.branching)
        if not self.branching or any(b <= 0 for b in self.branching):
            raise ValueError("branching factors must be positive")
        if self.items_per_leaf <= 0:
            raise ValueError("items_per_leaf must be positive")
        if self.latent_dim <= 0 or self.n_users < 0 or self.min_len <= 0 or self.max_len < self.min_len:
            raise ValueError("invalid synthetic sizes")
        if set(self.modality_noise) != set(self.modalities) or set(self.informativeness) != set(self.modalities):
            raise ValueError("modality_noise and informativeness must cover exactly the declared modalities")
        if self.walk not in ("branch", "deterministic"):
            raise ValueError(f"unknown walk {self.walk!r}")
        if not (0 <= self.p_branch and 0 <= self.p_top and self.p_branch + self.p_top <= 1):
            raise ValueError("walk probabilities must lie in [0, 1] and sum to at most 1")

    def to_dict(self):
        d = asdict(self)
        d["branching"] = list(self.branching)
        return d


@dataclass
class SyntheticData:
    records: list
    labels: dict          # item_id -> path of branch indices, one per level
    sequences: dict
    manifest: DatasetManifest
    latents: np.ndarray


def generate_synthetic(spec: SyntheticSpec):
    rng_centers = substream(spec.seed, "data", "centers")
    rng_items = substream(spec.seed, "data", "items")
    rng_views = substream(spec.seed, "data", "views")
    rng_walk = substream(spec.seed, "data", "walk")

    # hierarchy of centers, scale shrinking geometrically with depth
    centers = {(): np.zeros(spec.latent_dim)}
    frontier = [()]
    for depth, b in enumerate(spec.branching):
        scale = spec.top_scale * spec.shrink**depth
        nxt = []
        for path in frontier:
            for k in range(b):
                child = path + (k,)
                centers[child] = centers[path] + scale * rng_centers.standard_normal(spec.latent_dim)
                nxt.append(child)
        frontier = nxt

    leaves = frontier
    n = len(leaves) * spec.items_per_leaf
    width = len(str(n - 1))
    ids, labels, lat = [], {}, []
    for leaf in leaves:
        for _ in range(spec.items_per_leaf):
            item_id = f"i{len(ids):0{width}d}"
            ids.append(item_id)
            labels[item_id] = leaf
            lat.append(centers[leaf] + spec.item_noise * rng_items.standard_normal(spec.latent_dim))
    latents = np.array(lat)

    views = {}
    for name, w in spec.modalities.items():
        A = rng_views.standard_normal((spec.latent_dim, w)) / np.sqrt(spec.latent_dim)
        noise = rng_views.standard_normal((n, w))
        views[name] = spec.informativeness[name] * latents @ A + spec.modality_noise[name] * noise
    records = [ItemRecord(item_id, {name: views[name][i] for name in spec.modalities})
               for i, item_id in enumerate(ids)]

    sequences = _walks(spec, ids, labels, rng_walk)
    manifest = DatasetManifest(
        dict(spec.modalities), n,
        sources={name: "synthetic linear view of hierarchical latent" for name in spec.modalities},
        labels_file=LABELS_FILE,
        extra={"synthetic_spec": spec.to_dict()},
    )
    return SyntheticData(records, labels, sequences, manifest, latents)


def _walks(spec, ids, labels, rng):
    n = len(ids)
    if spec.walk == "deterministic":
        succ = rng.permutation(n)
        seqs = {}
        for u in range(spec.n_users):
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            cur = int(rng.integers(n))
            walk = []
            for _ in range(length):
                walk.append(ids[cur])
                cur = int(succ[cur])
            seqs[f"u{u}"] = walk
        return seqs

    by_branch, by_top = {}, {}
    for i, item_id in enumerate(ids):
        path = labels[item_id]
        by_branch.setdefault(path[:2], []).append(i)
        by_top.setdefault(path[:1], []).append(i)
    seqs = {}
    for u in range(spec.n_users):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        cur = int(rng.integers(n))
        walk = [ids[cur]]
        for _ in range(length - 1):
            x = rng.random()
            path = labels[ids[cur]]
            if x < spec.p_branch:
                pool = by_branch[path[:2]]
            elif x < spec.p_branch + spec.p_top:
                pool = by_top[path[:1]]
            else:
                pool = None
            cur = int(rng.integers(n)) if pool is None else pool[int(rng.integers(len(pool)))]
            walk.append(ids[cur])
        seqs[f"u{u}"] = walk
    return seqs


def write_dataset(directory, data: SyntheticData):
    """Write the four dataset files into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_items(directory / ITEMS_FILE, data.records)
    (directory / MANIFEST_FILE).write_text(data.manifest.to_json() + "\n")
    levels = len(next(iter(data.labels.values()))) if data.labels else 0
    (directory / LABELS_FILE).write_text(json.dumps(
        {"levels": levels, "labels": {k: list(v) for k, v in data.labels.items()}}) + "\n")
    write_sequences(directory / SEQUENCES_FILE, data.sequences)


@dataclass
class Dataset:
    """A loaded dataset directory."""

    manifest: DatasetManifest
    records: list
    labels: dict | None = None
    sequences_path: Path | None = None

    @property
    def item_ids(self):
        return [r.item_id for r in self.records]

    def matrices(self):
        return modality_matrices(self.records, self.manifest)


def load_dataset(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError("dataset directory does not exist", directory)
    manifest_path = directory / MANIFEST_FILE
    if not manifest_path.exists():
        raise DataError("missing manifest.json", directory)
    manifest = load_manifest(manifest_path)
    records = load_items(directory / ITEMS_FILE, manifest)
    labels = None
    if manifest.labels_file and (directory / manifest.labels_file).exists():
        labels = load_labels(directory / manifest.labels_file)
    seq_path = directory / SEQUENCES_FILE
    return Dataset(manifest, records, labels, seq_path if seq_path.exists() else None)
