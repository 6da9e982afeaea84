"""Residual quantization: the soft (Gumbel-softmax) training path, the hard
arg-min inference path, codebook storage and the temperature schedule."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

CODEBOOK_FORMAT_VERSION = 1


class CodebookStack:
    """``levels`` codebooks of ``size`` codewords in ``dim`` dimensions.

    In shared mode every level addresses the same ``(size, dim)`` array;
    otherwise ``codewords`` has shape ``(levels, size, dim)``.
    """

    def __init__(self, levels=3, size=48, dim=96, shared=True, codewords=None):
        self.levels = int(levels)
        self.size = int(size)
        self.dim = int(dim)
        self.shared = bool(shared)
        shape = self.shape
        if codewords is None:
            codewords = np.zeros(shape)
        codewords = np.asarray(codewords, dtype=np.float64)
        if codewords.shape != shape:
            raise ValueError(f"codewords shape {codewords.shape} != expected {shape}")
        self.codewords = codewords

    @property
    def shape(self):
        if self.shared:
            return (self.size, self.dim)
        return (self.levels, self.size, self.dim)

    @property
    def mode(self):
        return "shared" if self.shared else "per-level"

    def level(self, l):
        """Codeword array used at level ``l`` (0-based). Shares storage."""
        return self.codewords if self.shared else self.codewords[l]

    def param_names(self):
        if self.shared:
            return ["codebook"]
        return [f"codebook.{l}" for l in range(self.levels)]

    def to_params(self):
        if self.shared:
            return {"codebook": self.codewords}
        return {f"codebook.{l}": self.codewords[l] for l in range(self.levels)}

    @classmethod
    def from_params(cls, params, levels, size, dim, shared):
        if shared:
            cw = params["codebook"]
        else:
            cw = np.stack([params[f"codebook.{l}"] for l in range(levels)])
        return cls(levels, size, dim, shared, cw.copy())

    def bind(self, P):
        """Per-level list of bound codebook variables from a param dict."""
        if self.shared:
            return [P["codebook"]] * self.levels
        return [P[f"codebook.{l}"] for l in range(self.levels)]

    def header(self):
        return {"levels": self.levels, "size": self.size, "dim": self.dim, "mode": self.mode}

    def checksum(self):
        h = hashlib.sha256()
        h.update(json.dumps(self.header(), sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.codewords, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_json(self):
        doc = {"version": CODEBOOK_FORMAT_VERSION, **self.header(),
               "codewords": self.codewords.tolist()}
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("version") != CODEBOOK_FORMAT_VERSION:
            raise ValueError(f"unsupported codebook format version {doc.get('version')!r}")
        if doc["mode"] not in ("shared", "per-level"):
            raise ValueError(f"unknown sharing mode {doc['mode']!r}")
        return cls(doc["levels"], doc["size"], doc["dim"], doc["mode"] == "shared",
                   np.array(doc["codewords"], dtype=np.float64))

    def __eq__(self, other):
        return (isinstance(other, CodebookStack) and self.header() == other.header()
                and np.array_equal(self.codewords, other.codewords))


@dataclass
class SoftAssignment:
    weights: list      # per level, Var (B, K) on the simplex
    residuals: list    # r_0 .. r_L, Vars (B, d)
    recon: object      # Var (B, d)
    noise: list        # per level, the Gumbel draws used (arrays (B, K)) or None


def squared_distances(r, E):
    """Tape op: ``||r_b - E_k||^2`` as a (B, K) Var."""
    B, d = r.shape
    K = E.shape[0]
    diff = ad.reshape(r, (B, 1, d)) - ad.reshape(E, (1, K, d))
    return ad.sum(diff * diff, axis=2)


def soft_quantize(z, codebooks, alpha, rng=None, noise=None, noise_scale=1.0):
    """Differentiable residual quantization.

    Args:
        z: Var (B, d), the fused embeddings.
        codebooks: per-level list of Vars (K, d); repeat one Var for shared mode.
        alpha: softmax temperature, > 0.
        rng: numpy Generator; when given, Gumbel(0, 1) noise scaled by
            ``noise_scale`` is added to the distance logits.
        noise: explicit per-level noise arrays (B, K), overriding ``rng``.
            Used to freeze the noise for gradient checks.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    B = z.shape[0]
    r = z
    residuals = [r]
    weights, drawn = [], []
    recon = None
    for l, E in enumerate(codebooks):
        logits = -squared_distances(r, E)
        eps = None
        if noise is not None:
            eps = noise[l]
        elif rng is not None:
            eps = noise_scale * rng.gumbel(size=(B, E.shape[0]))
        if eps is not None:
            logits = logits + eps
        c = ad.softmax(logits / alpha, axis=1)
        q = c @ E
        r = r - q
        recon = q if recon is None else recon + q
        weights.append(c)
        residuals.append(r)
        drawn.append(eps)
    return SoftAssignment(weights, residuals, recon, drawn)


def _np_distances(r, E):
    diff = r[:, None, :] - E[None, :, :]
    return (diff * diff).sum(axis=2)


def hard_quantize(z, codebooks, return_distances=False):
    """Arg-min residual quantization.

    Args:
        z: array (B, d) or (d,).
        codebooks: a :class:`CodebookStack` or a per-level list of (K, d) arrays.

    Returns:
        int array (B, L) of codes (or (L,) for a single vector). Ties go to the
        lowest codeword index. With ``return_distances`` also returns the
        per-level (B, K) squared distances.
    """
    if isinstance(codebooks, CodebookStack):
        codebooks = [codebooks.level(l) for l in range(codebooks.levels)]
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    r = np.atleast_2d(z)
    codes, dists = [], []
    for E in codebooks:
        d = _np_distances(r, E)
        c = d.argmin(axis=1)
        r = r - E[c]
        codes.append(c)
        dists.append(d)
    out = np.stack(codes, axis=1) if codes else np.zeros((r.shape[0], 0), dtype=int)
    if single:
        out = out[0]
    if return_distances:
        return out, dists
    return out


@dataclass
class AlphaSchedule:
    """``alpha(t) = max(floor, alpha0 * exp(-decay * t))``; constant if ``constant``."""

    alpha0: float = 0.2
    decay: float = 0.0
    floor: float = 1e-3
    constant: bool = False

    def __post_init__(self):
        if self.alpha0 <= 0 or self.floor <= 0 or self.decay < 0:
            raise ValueError("alpha0 and floor must be positive and decay nonnegative")

    @classmethod
    def for_epochs(cls, epochs, alpha0=0.2, floor=1e-3):
        """Exponential decay reaching ``2 * floor`` at the final epoch."""
        if epochs <= 1 or alpha0 <= 2 * floor:
            return cls(alpha0, 0.0, floor)
        return cls(alpha0, math.log(alpha0 / (2 * floor)) / (epochs - 1), floor)

    def at_floor(self, epoch):
        return not self.constant and self.alpha_at(epoch) <= self.floor

    def alpha_at(self, epoch):
        return alpha_at(self, epoch)


def alpha_at(schedule, epoch):
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if schedule.constant:
        return schedule.alpha0
    return max(schedule.floor, schedule.alpha0 * math.exp(-schedule.decay * epoch))
