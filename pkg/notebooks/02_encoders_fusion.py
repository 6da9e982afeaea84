"""
Modality encoders and attention fusion
======================================

Each modality has its own MLP encoder into a shared latent width. A single
learned query vector scores the modality embeddings, and the fused embedding
is their softmax-weighted sum.
"""

import numpy as np

from contok import autodiff as ad
from contok.encoders import ModalityEncoder, ProjectionHead, encode, fuse, project

rng = np.random.default_rng(1)
text = ModalityEncoder("text", 32, (64,), 8)
image = ModalityEncoder("image", 24, (64,), 8)
params = {**text.init(rng), **image.init(rng)}
head = ProjectionHead(8)
params.update(head.init(rng))
q = rng.standard_normal(8)

xt = rng.standard_normal((5, 32))
xi = rng.standard_normal((5, 24))

tape = ad.Tape()
P = {k: tape.leaf(v, name=k) for k, v in params.items()}
zs = [encode(text, P, tape.const(xt)), encode(image, P, tape.const(xi))]
z, weights = fuse(zs, tape.leaf(q, name="q"))
print("per-item modality weights (rows sum to 1)")
print(np.round(weights.value, 3))

# the projection head maps latents into the space where the loss is computed
h = project(head, P, z)
print("fused", z.shape, "projected", h.shape)

# a wrong input width is caught with the modality named
try:
    encode(text, P, tape.const(rng.standard_normal((5, 31))))
except ValueError as exc:
    print("error:", exc)
