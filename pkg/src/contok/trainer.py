"""Training loop, configuration, per-epoch report and checkpoint files."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .loss import NegativePolicy
from .model import TokenizerModel
from .quantizer import AlphaSchedule
from .rng import substream
from .tokens import collision_rate, identifier_perplexity

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    levels: int = 3
    codebook_size: int = 48
    dim: int = 96
    hidden: tuple = (512, 256, 128)
    projection: bool = True
    proj_dim: int | None = None
    tau: float = 0.1
    anneal: bool = True
    alpha0: float = 0.2
    alpha_floor: float = 1e-3
    alpha_decay: float | None = None   # None: reach 2 * floor at the last epoch
    alpha: float = 0.1                 # used when anneal is False
    noise_scale_by_alpha: bool = False
    gumbel_scale: float = 1.0
    soft: bool = True                  # False: hard arg-min path, no codebook gradient
    lr: float = 1e-4
    batch: int = 256
    epochs: int = 100
    seed: int = 42
    negatives: str = "both"
    positive_in_denominator: bool = True
    normalize: bool = True
    shared: bool = True
    init_jitter: float = 0.01
    codebook_init: str = "residual"    # or "sample"
    grad_clip: float | None = None
    latent_norm: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        positive = {"levels": self.levels, "codebook_size": self.codebook_size, "dim": self.dim,
                    "tau": self.tau, "alpha0": self.alpha0, "alpha_floor": self.alpha_floor,
                    "alpha": self.alpha, "batch": self.batch}
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.lr < 0 or self.epochs < 0:
            raise ValueError("lr and epochs must be nonnegative")
        if any(h <= 0 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        NegativePolicy.from_name(self.negatives)

    def schedule(self):
        if not self.anneal:
            return AlphaSchedule(self.alpha, 0.0, self.alpha_floor, constant=True)
        if self.alpha_decay is None:
            return AlphaSchedule.for_epochs(self.epochs, self.alpha0, self.alpha_floor)
        return AlphaSchedule(self.alpha0, self.alpha_decay, self.alpha_floor)

    def policy(self):
        p = NegativePolicy.from_name(self.negatives)
        return NegativePolicy(p.reconstruction, p.modality, self.positive_in_denominator)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def build_model(self, modalities):
        return TokenizerModel(modalities, self.dim, self.hidden, self.levels, self.codebook_size,
                              self.shared, self.projection, self.proj_dim, self.latent_norm)


REPORT_COLUMNS = ("epoch", "loss", "perplexity", "collision_rate", "alpha", "seconds")


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)

    def add(self, **row):
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epoch index must increase")
        self.rows.append({k: row[k] for k in REPORT_COLUMNS})

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [r[name] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[k])) for k in REPORT_COLUMNS[1:]])

    @classmethod
    def from_csv(cls, path):
        rep = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rep.add(epoch=int(row["epoch"]), **{k: float(row[k]) for k in REPORT_COLUMNS[1:]})
        return rep


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite. ``model`` holds the last good parameters."""

    def __init__(self, epoch, model, report):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch
        self.model = model
        self.report = report


@dataclass
class TrainResult:
    model: TokenizerModel
    report: TrainReport
    config: TrainConfig


def _batches(n, batch, rng):
    order = rng.permutation(n)
    return [order[i : i + batch] for i in range(0, n, batch)]


def train(config: TrainConfig, xs, modalities, on_epoch=None):
    """Optimize the tokenizer on per-modality matrices ``xs`` (each (N, width)).

    ``modalities`` is the ordered ``{name: width}`` mapping matching ``xs``.
    Returns a :class:`TrainResult`; raises :class:`TrainingDiverged` on a
    non-finite loss.
    """
    n = xs[0].shape[0] if xs else 0
    if n == 0:
        raise ValueError("dataset is empty")
    if config.batch > n:
        raise ValueError(f"batch size {config.batch} exceeds dataset size {n}")
    for x, (name, width) in zip(xs, modalities.items()):
        if x.shape != (n, width):
            raise ValueError(f"modality {name!r}: expected shape {(n, width)}, got {x.shape}")

    rng_init = substream(config.seed, "init")
    rng_shuffle = substream(config.seed, "shuffle")
    rng_gumbel = substream(config.seed, "gumbel")

    model = config.build_model(modalities)
    model.init_params(rng_init)
    batches = _batches(n, config.batch, rng_shuffle)
    model.init_codebooks([x[batches[0]] for x in xs], rng_init, config.init_jitter,
                         config.codebook_init)

    schedule = config.schedule()
    policy = config.policy()
    state = ad.AdamState()
    report = TrainReport()
    names = model.param_names()

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        if epoch > 0:
            batches = _batches(n, config.batch, rng_shuffle)
        alpha = schedule.alpha_at(epoch)
        noisy = config.soft and config.gumbel_scale > 0 and not schedule.at_floor(epoch)
        noise_scale = config.gumbel_scale * (alpha if config.noise_scale_by_alpha else 1.0)
        snapshot = {k: v.copy() for k, v in model.params.items()}
        total = 0.0
        for idx in batches:
            tape = ad.Tape()
            P = model.bind(tape, names)
            out = model.loss(tape, P, [x[idx] for x in xs], alpha, config.tau, policy,
                             config.normalize, rng=rng_gumbel if noisy else None,
                             noise_scale=noise_scale, hard=not config.soft)
            loss = float(out["loss"].value)
            if not np.isfinite(loss):
                model.params = snapshot
                raise TrainingDiverged(epoch, model, report)
            total += loss * len(idx)
            if config.lr == 0:
                continue
            g = tape.backward(out["loss"])
            grads = {k: g[P[k].id] for k in names}
            if config.grad_clip is not None:
                norm = np.sqrt(sum(float((v * v).sum()) for v in grads.values()))
                if norm > config.grad_clip:
                    grads = {k: v * (config.grad_clip / norm) for k, v in grads.items()}
            ad.adam_update(model.params, grads, state, config.lr)

        codes = model.tokenize(xs)
        row = dict(epoch=epoch, loss=total / n, perplexity=identifier_perplexity(codes),
                   collision_rate=collision_rate(codes), alpha=alpha,
                   seconds=time.perf_counter() - t0)
        report.add(**row)
        log.info("epoch %d loss %.4f ppl %.2f coll %.3f alpha %.4g", epoch, row["loss"],
                 row["perplexity"], row["collision_rate"], alpha)
        if on_epoch is not None:
            on_epoch(row, model)
    return TrainResult(model, report, config)


# Checkpoint file layout:
#   magic (8 bytes) | version u32 | header length u64 | header JSON |
#   float64 little-endian tensor blocks in header order | sha256 of all preceding bytes
MAGIC = b"CTOKCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_save(model: TokenizerModel, path, config: TrainConfig | None = None):
    tensors, blobs, offset = [], [], 0
    for name in model.param_names():
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        blob = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "structure": model.structure(),
        "config": config.to_dict() if config is not None else None,
        "dtype": "<f8",
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def checkpoint_load(path, expect: TrainConfig | None = None):
    """Load a checkpoint. Returns ``(model, config_or_None)``.

    With ``expect``, the stored codebook layout must match it.
    """
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 + 32:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(data)} bytes)")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    try:
        header = json.loads(data[start : start + hlen])
    except ValueError:
        raise CheckpointError(f"{path}: corrupt or truncated header") from None
    blob_start = start + hlen
    total = sum(t["nbytes"] for t in header["tensors"])
    if len(data) != blob_start + total + 32:
        raise CheckpointError(f"{path}: truncated checkpoint (expected {blob_start + total + 32} "
                              f"bytes, found {len(data)})")
    if hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")

    s = header["structure"]
    if expect is not None:
        if bool(s["shared"]) != bool(expect.shared):
            mode = "shared" if s["shared"] else "per-level"
            want = "shared" if expect.shared else "per-level"
            raise CheckpointError(f"{path}: codebook mode mismatch (checkpoint {mode}, config {want})")
        for key, want in (("levels", expect.levels), ("codebook_size", expect.codebook_size),
                          ("dim", expect.dim)):
            if s[key] != want:
                raise CheckpointError(f"{path}: {key} mismatch (checkpoint {s[key]}, config {want})")
    model = TokenizerModel.from_structure(s)
    params = {}
    for t in header["tensors"]:
        a = blob_start + t["offset"]
        arr = np.frombuffer(data[a : a + t["nbytes"]], dtype="<f8").reshape(t["shape"])
        params[t["name"]] = arr.astype(np.float64)
    missing = set(model.param_names()) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    model.params = {k: params[k] for k in model.param_names()}
    config = TrainConfig.from_dict(header["config"]) if header["config"] else None
    return model, config
