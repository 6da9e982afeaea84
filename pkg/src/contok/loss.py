"""NT-Xent alignment between projected reconstructions and modality projections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class NegativePolicy:
    """Which in-batch terms enter each anchor's denominator.

    ``reconstruction``: other items' reconstructions (ĥ_j, j != i).
    ``modality``: other items' projections of the same modality (h_{m,j}, j != i).
    ``positive``: the positive pair itself.
    """

    reconstruction: bool = True
    modality: bool = True
    positive: bool = True

    @classmethod
    def from_name(cls, name):
        table = {
            "both": cls(True, True),
            "recon": cls(True, False),
            "modal": cls(False, True),
        }
        if name not in table:
            raise ValueError(f"unknown negative policy {name!r}; choose from {sorted(table)}")
        return table[name]

    @property
    def name(self):
        if self.reconstruction and self.modality:
            return "both"
        if self.reconstruction:
            return "recon"
        if self.modality:
            return "modal"
        return "none"


def nt_xent(h_hat, hs, tau, policy=NegativePolicy(), normalize=True):
    """Contrastive loss with ĥ as anchor, summed over modalities.

    Args:
        h_hat: Var (B, p), projected reconstructions.
        hs: list of Vars (B, p), one per modality.
        tau: temperature > 0.
        policy: :class:`NegativePolicy`.
        normalize: L2-normalize rows first (cosine similarity). ``False``
            uses the raw dot product.

    Returns:
        scalar Var ``sum_m mean_i -log(exp(s_ii/tau) / sum_neg exp(s/tau))``.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if not hs:
        raise ValueError("need at least one modality projection")
    B = h_hat.shape[0]
    for m, h in enumerate(hs):
        if h.shape != h_hat.shape:
            raise ValueError(f"modality {m} projections have shape {h.shape}, expected {h_hat.shape}")
    off = ~np.eye(B, dtype=bool)
    diag = np.eye(B, dtype=bool)
    mask = np.concatenate(
        [diag if policy.positive else np.zeros_like(diag),
         off if policy.modality else np.zeros_like(off),
         off if policy.reconstruction else np.zeros_like(off)],
        axis=1,
    )
    if not mask.any(axis=1).all():
        raise ValueError("negative policy leaves an empty denominator for this batch size")

    if normalize:
        h_hat = ad.l2_normalize(h_hat, axis=1)
        hs = [ad.l2_normalize(h, axis=1) for h in hs]
    inv_tau = 1.0 / tau
    recon_sim = (h_hat @ h_hat.T) * inv_tau
    total = None
    for h in hs:
        cross = (h_hat @ h.T) * inv_tau
        pos = ad.sum(h_hat * h, axis=1) * inv_tau
        logits = ad.concat([cross, cross, recon_sim], axis=1)
        lse = ad.logsumexp(logits, axis=1, mask=mask)
        term = ad.sum(lse - pos) * (1.0 / B)
        total = term if total is None else total + term
    return total
