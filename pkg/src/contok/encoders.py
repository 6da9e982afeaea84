"""Per-modality MLP encoders, the shared projection head and attention fusion.

Parameters live in plain dicts of numpy arrays keyed by name; the forward
functions take the same dict with values bound to tape variables.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ModalityEncoder:
    """MLP ``x_m -> z_m`` with ReLU on hidden layers and a linear output.

    Args:
        name: modality name, used as a parameter prefix.
        in_width: width of the raw embedding for this modality.
        hidden: hidden layer widths, e.g. ``(512, 256, 128)``.
        out_dim: latent dimension shared with the quantizer.
    """

    def __init__(self, name, in_width, hidden, out_dim):
        self.name = name
        self.in_width = int(in_width)
        self.hidden = tuple(int(h) for h in hidden)
        self.out_dim = int(out_dim)

    @property
    def widths(self):
        return (self.in_width, *self.hidden, self.out_dim)

    def param_names(self):
        names = []
        for i in range(len(self.widths) - 1):
            names += [f"enc.{self.name}.W{i}", f"enc.{self.name}.b{i}"]
        return names

    def init(self, rng):
        params = {}
        w = self.widths
        for i in range(len(w) - 1):
            params[f"enc.{self.name}.W{i}"] = glorot(rng, w[i], w[i + 1])
            params[f"enc.{self.name}.b{i}"] = np.zeros(w[i + 1])
        return params

    def __call__(self, P, x):
        return encode(self, P, x)


def encode(encoder, P, x):
    """Run ``encoder`` on a batch ``x`` (Var of shape (B, in_width))."""
    if x.shape[-1] != encoder.in_width:
        raise ValueError(
            f"modality {encoder.name!r}: expected input width {encoder.in_width}, "
            f"got {x.shape[-1]}"
        )
    h = x
    n = len(encoder.widths) - 1
    for i in range(n):
        h = h @ P[f"enc.{encoder.name}.W{i}"] + P[f"enc.{encoder.name}.b{i}"]
        if i < n - 1:
            h = ad.relu(h)
    return h


class ProjectionHead:
    """Linear -> ReLU -> linear, ``d -> proj_dim``. ``enabled=False`` is identity."""

    def __init__(self, dim, proj_dim=None, enabled=True):
        self.dim = int(dim)
        self.proj_dim = int(proj_dim or dim)
        self.enabled = enabled

    def param_names(self):
        return ["head.W0", "head.b0", "head.W1", "head.b1"] if self.enabled else []

    def init(self, rng):
        if not self.enabled:
            return {}
        return {
            "head.W0": glorot(rng, self.dim, self.dim),
            "head.b0": np.zeros(self.dim),
            "head.W1": glorot(rng, self.dim, self.proj_dim),
            "head.b1": np.zeros(self.proj_dim),
        }

    def __call__(self, P, z):
        return project(self, P, z)


def project(head, P, z):
    if z.shape[-1] != head.dim:
        raise ValueError(f"projection head expects dimension {head.dim}, got {z.shape[-1]}")
    if not head.enabled:
        return z
    h = ad.relu(z @ P["head.W0"] + P["head.b0"])
    return h @ P["head.W1"] + P["head.b1"]


def fuse(zs, q):
    """Attention fusion of per-modality batches.

    Args:
        zs: list of Vars, each (B, d), one per modality.
        q: attention vector Var of shape (d,).

    Returns:
        ``(z, p)`` where ``p`` is (B, M) with rows on the simplex and
        ``z = sum_m p[:, m] * zs[m]``.
    """
    if not zs:
        raise ValueError("fuse needs at least one modality")
    d = zs[0].shape[-1]
    for m, zm in enumerate(zs):
        if zm.shape != zs[0].shape:
            raise ValueError(f"modality {m} has shape {zm.shape}, expected {zs[0].shape}")
    qcol = ad.reshape(q, (d, 1))
    scores = ad.concat([zm @ qcol for zm in zs], axis=1)
    p = ad.softmax(scores, axis=1)
    z = None
    for m, zm in enumerate(zs):
        term = p[:, m : m + 1] * zm
        z = term if z is None else z + term
    return z, p
