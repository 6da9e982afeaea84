"""
Soft and hard residual quantization
===================================

Hard quantization picks the nearest codeword level by level and subtracts it.
The soft version replaces the arg-min with a softmax over negative squared
distances at temperature alpha, so the codebooks receive gradients. As alpha
shrinks the two agree.
"""

import numpy as np

from contok import autodiff as ad
from contok.quantizer import AlphaSchedule, CodebookStack, hard_quantize, soft_quantize

rng = np.random.default_rng(2)
stack = CodebookStack(levels=3, size=8, dim=4, shared=False)
stack.codewords = rng.standard_normal(stack.shape)
z = rng.standard_normal((6, 4))

codes = hard_quantize(z, stack)
print("hard codes\n", codes)

for alpha in (1.0, 0.1, 1e-4):
    tape = ad.Tape()
    soft = soft_quantize(tape.const(z), [tape.const(stack.level(l)) for l in range(3)], alpha)
    argmax = np.stack([w.value.argmax(axis=1) for w in soft.weights], axis=1)
    # the reconstruction telescopes: z_hat = r_0 - r_L
    gap = np.abs(soft.recon.value - (soft.residuals[0].value - soft.residuals[-1].value)).max()
    print(f"alpha={alpha:g}: agreement {np.mean(argmax == codes):.2f}, telescoping gap {gap:.1e}")

# alpha decays exponentially during training and stops at a floor
sched = AlphaSchedule.for_epochs(200, alpha0=0.2, floor=1e-3)
print("alpha by epoch", [round(sched.alpha_at(t), 5) for t in (0, 50, 100, 199)])
