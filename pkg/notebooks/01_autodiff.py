"""
Reverse-mode gradients on a tape
================================

Every trainable quantity in the tokenizer is a numpy float64 array recorded
on a ``Tape``. Here we build a small graph, ask for its gradient, and compare
against central finite differences.
"""

import numpy as np

from contok import autodiff as ad

rng = np.random.default_rng(0)
W = rng.standard_normal((4, 3))
x = rng.standard_normal((5, 4))

# the forward pass is ordinary arithmetic on Vars
tape = ad.Tape()
Wv = tape.leaf(W, name="W")
h = ad.relu(tape.const(x) @ Wv)
loss = ad.sum(ad.logsumexp(h, axis=1))
grads = tape.backward(loss)
analytic = grads[Wv.id]


# the oracle re-runs the forward pass on perturbed copies of W
def f():
    return float(np.log(np.exp(np.maximum(x @ W, 0)).sum(axis=1)).sum())


(numeric,) = ad.finite_diff(f, [W])
print("loss", loss.value)
print("max |analytic - numeric|", np.abs(analytic - numeric).max())

# Adam keeps per-parameter moments; one step moves W against the gradient
state = ad.AdamState()
params = {"W": W.copy()}
ad.adam_update(params, {"W": analytic}, state, lr=1e-2)
print("step size", np.abs(params["W"] - W).max())
