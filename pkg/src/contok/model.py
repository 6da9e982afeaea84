"""Assembly of encoders, fusion, quantizer and projection head into one model."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .encoders import ModalityEncoder, ProjectionHead, encode, fuse, glorot, project
from .loss import NegativePolicy, nt_xent
from .quantizer import CodebookStack, hard_quantize, soft_quantize


class TokenizerModel:
    """All trainable state of the tokenizer, held as a flat ``params`` dict.

    Args:
        modalities: ordered ``{name: input_width}``.
        dim: latent dimension ``d``.
        hidden: encoder hidden widths.
        levels, codebook_size, shared: codebook stack layout.
        projection: whether the projection head is used (else identity).
        proj_dim: projection output width (defaults to ``dim``).
    """

    def __init__(self, modalities, dim=96, hidden=(512, 256, 128), levels=3,
                 codebook_size=48, shared=True, projection=True, proj_dim=None,
                 latent_norm=True):
        self.latent_norm = bool(latent_norm)
        self.modalities = dict(modalities)
        self.dim = int(dim)
        self.hidden = tuple(hidden)
        self.encoders = [ModalityEncoder(n, w, self.hidden, self.dim)
                         for n, w in self.modalities.items()]
        self.head = ProjectionHead(self.dim, proj_dim, enabled=projection)
        self.stack = CodebookStack(levels, codebook_size, self.dim, shared)
        self.params: dict[str, np.ndarray] = {}

    def structure(self):
        return {
            "modalities": [[n, w] for n, w in self.modalities.items()],
            "dim": self.dim,
            "hidden": list(self.hidden),
            "levels": self.stack.levels,
            "codebook_size": self.stack.size,
            "shared": self.stack.shared,
            "projection": self.head.enabled,
            "proj_dim": self.head.proj_dim,
            "latent_norm": self.latent_norm,
        }

    @classmethod
    def from_structure(cls, s):
        mods = s["modalities"]
        mods = dict(mods) if isinstance(mods, list) else mods
        return cls(mods, s["dim"], s["hidden"], s["levels"], s["codebook_size"],
                   s["shared"], s["projection"], s["proj_dim"], s.get("latent_norm", False))

    def param_names(self):
        names = []
        for enc in self.encoders:
            names += enc.param_names()
        names.append("fusion.q")
        names += self.head.param_names()
        names += self.stack.param_names()
        return names

    def init_params(self, rng):
        """Encoder, fusion and head weights. Codebooks start at zero until
        :meth:`init_codebooks` is called."""
        params = {}
        for enc in self.encoders:
            params.update(enc.init(rng))
        params["fusion.q"] = glorot(rng, self.dim, 1)[:, 0]
        params.update(self.head.init(rng))
        params.update(self.stack.to_params())
        self.params = {k: params[k].copy() for k in self.param_names()}
        return self.params

    def init_codebooks(self, xs, rng, jitter=0.01, method="residual"):
        """Seed codewords from one batch of fused embeddings plus jitter.

        ``method="sample"`` draws every codeword from the embeddings.
        ``"residual"`` draws level ``l`` codewords from the level-``l``
        residuals left by hard quantization with the levels seeded so far, so
        each level starts at the scale it will quantize. A shared codebook
        takes an equal share of its rows from each level.
        """
        if method not in ("residual", "sample"):
            raise ValueError(f"unknown codebook init {method!r}")
        z = self.embed(xs)
        K, L = self.stack.size, self.stack.levels
        scale = jitter * (z.std() if z.size > 1 else 1.0)

        def draw(src, k):
            idx = rng.choice(src.shape[0], size=k, replace=src.shape[0] < k)
            return src[idx] + scale * rng.standard_normal((k, self.dim))

        if method == "sample":
            for name in self.stack.param_names():
                self.params[name] = draw(z, K)
            return
        if self.stack.shared:
            shares = [K // L + (1 if l < K % L else 0) for l in range(L)]
            rows, r = [], z
            for l in range(L):
                rows.append(draw(r, shares[l]))
                E = np.concatenate(rows)
                r = r - E[hard_quantize(r, [E])[:, 0]]
            self.params["codebook"] = np.concatenate(rows)
        else:
            r = z
            for l, name in enumerate(self.stack.param_names()):
                E = draw(r, K)
                self.params[name] = E
                r = r - E[hard_quantize(r, [E])[:, 0]]

    def codebooks(self):
        return CodebookStack.from_params(self.params, self.stack.levels, self.stack.size,
                                         self.dim, self.stack.shared)

    def bind(self, tape, names=None):
        """Create tape leaves for the parameters; returns ``{name: Var}``."""
        names = self.param_names() if names is None else names
        return {n: tape.leaf(self.params[n], name=n) for n in names}

    def _encode_all(self, tape, P, xs):
        zs = [encode(enc, P, tape.const(x)) for enc, x in zip(self.encoders, xs)]
        if self.latent_norm:
            zs = [ad.l2_normalize(z, axis=1) for z in zs]
        return zs

    def forward(self, tape, P, xs, alpha, rng=None, noise=None, noise_scale=1.0, hard=False):
        """Build the per-batch graph. Returns a dict of intermediate Vars.

        ``xs`` is a list of (B, width) arrays in modality order. With
        ``hard=True`` the reconstruction is the arg-min codeword sum, entered
        as a constant (no gradient to codebooks or through the quantizer).
        """
        zs = self._encode_all(tape, P, xs)
        z, p = fuse(zs, P["fusion.q"])
        out = {"zs": zs, "z": z, "p": p}
        if hard:
            codes = hard_quantize(z.value, self.codebooks())
            stack = self.codebooks()
            recon = sum(stack.level(l)[codes[:, l]] for l in range(stack.levels))
            out["recon"] = tape.const(recon)
            out["soft"] = None
        else:
            soft = soft_quantize(z, self.stack.bind(P), alpha, rng=rng, noise=noise,
                                 noise_scale=noise_scale)
            out["recon"] = soft.recon
            out["soft"] = soft
        out["h_hat"] = project(self.head, P, out["recon"])
        out["hs"] = [project(self.head, P, zm) for zm in zs]
        return out

    def loss(self, tape, P, xs, alpha, tau, policy=NegativePolicy(), normalize=True, **kw):
        out = self.forward(tape, P, xs, alpha, **kw)
        out["loss"] = nt_xent(out["h_hat"], out["hs"], tau, policy, normalize)
        return out

    def embed(self, xs):
        """Fused embeddings ``z`` for a list of per-modality arrays."""
        tape = ad.Tape()
        P = {n: tape.const(v) for n, v in self.params.items()}
        zs = self._encode_all(tape, P, xs)
        z, _ = fuse(zs, P["fusion.q"])
        return z.value.copy()

    def tokenize(self, xs):
        """Hard codes (N, L) for a list of per-modality arrays."""
        return hard_quantize(self.embed(xs), self.codebooks())
