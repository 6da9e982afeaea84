"""
NT-Xent between reconstructions and modality views
==================================================

The anchor for item i is its quantized projection. Positives are the same
item's modality embeddings. Negatives come from other items, either their
reconstructions, their modality embeddings, or both.
"""

import numpy as np

from contok import autodiff as ad
from contok.loss import NegativePolicy, nt_xent

rng = np.random.default_rng(3)
B, d = 6, 5
h_hat = rng.standard_normal((B, d))
hs = [h_hat + 0.1 * rng.standard_normal((B, d)) for _ in range(2)]

for name in ("both", "recon", "modal"):
    tape = ad.Tape()
    loss = nt_xent(tape.const(h_hat), [tape.const(h) for h in hs], tau=0.1,
                   policy=NegativePolicy.from_name(name))
    print(f"negatives={name:5s} loss {loss.value:.4f}")

# with a single item there are no negatives and the loss is exactly zero
tape = ad.Tape()
print("B=1:", nt_xent(tape.const(h_hat[:1]), [tape.const(h[:1]) for h in hs], tau=0.1).value)

# lowering tau sharpens the distribution and the loss drops for well-matched pairs
for tau in (1.0, 0.5, 0.1):
    tape = ad.Tape()
    print(f"tau={tau}: {nt_xent(tape.const(h_hat), [tape.const(h) for h in hs], tau).value:.4f}")
