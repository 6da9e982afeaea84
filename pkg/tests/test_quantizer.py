import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contok import autodiff as ad
from contok.quantizer import (AlphaSchedule, CodebookStack, alpha_at, hard_quantize,
                              soft_quantize)


def _soft(z, codebooks, alpha, **kw):
    tape = ad.Tape()
    zv = tape.leaf(np.atleast_2d(z))
    cvs = [tape.leaf(E) for E in codebooks]
    return tape, zv, cvs, soft_quantize(zv, cvs, alpha, **kw)


def test_exact_match_limit():
    E = np.array([[0.3, -1.0], [1.0, 2.0], [-2.0, 0.5]])
    _, _, _, sa = _soft(E[1], [E], 1e-6)
    np.testing.assert_allclose(sa.weights[0].value, [[0.0, 1.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(sa.residuals[1].value, 0.0, atol=1e-12)
    np.testing.assert_allclose(sa.recon.value, [E[1]], atol=1e-12)


@pytest.mark.parametrize("alpha", [1e-3, 0.1, 1.0, 10.0])
def test_equidistant_codewords_split_evenly(alpha):
    E = np.array([[1.0, 0.0], [-1.0, 0.0]])
    _, _, _, sa = _soft(np.array([0.0, 0.7]), [E], alpha)
    np.testing.assert_allclose(sa.weights[0].value, [[0.5, 0.5]], rtol=0, atol=1e-15)


def test_scalar_closed_form():
    # oracle: weights = softmax(-(z - e)^2 / alpha) written out by hand
    z, e0, e1, alpha = 0.75, 0.0, 1.0, 1.0
    l0, l1 = -((z - e0) ** 2) / alpha, -((z - e1) ** 2) / alpha
    assert (l0, l1) == (-0.5625, -0.0625)
    w1 = 1.0 / (1.0 + math.exp(l0 - l1))
    expected = (1.0 - w1, w1)
    assert abs(expected[0] - 0.3775) < 1e-4 and abs(expected[1] - 0.6225) < 1e-4

    _, _, _, sa = _soft(np.array([z]), [np.array([[e0], [e1]])], alpha)
    np.testing.assert_allclose(sa.weights[0].value[0], expected, rtol=1e-14)
    np.testing.assert_allclose(sa.recon.value[0, 0], expected[1] * e1, rtol=1e-14)


def test_alpha_must_be_positive():
    with pytest.raises(ValueError):
        _soft(np.zeros(2), [np.eye(2)], 0.0)
    with pytest.raises(ValueError):
        _soft(np.zeros(2), [np.eye(2)], -1.0)


def test_weights_on_simplex_with_and_without_noise():
    rng = np.random.default_rng(0)
    E = [rng.standard_normal((6, 4)) for _ in range(3)]
    z = rng.standard_normal((10, 4))
    for noise_rng in (None, np.random.default_rng(1)):
        _, _, _, sa = _soft(z, E, 0.3, rng=noise_rng)
        for w in sa.weights:
            assert np.all(w.value >= 0)
            np.testing.assert_allclose(w.value.sum(axis=1), 1.0, atol=1e-12)


def test_gumbel_noise_reproducible_and_noise_off_deterministic():
    rng = np.random.default_rng(0)
    E = [rng.standard_normal((5, 3))] * 2
    z = rng.standard_normal((4, 3))
    a = _soft(z, E, 0.5, rng=np.random.default_rng(7))[3]
    b = _soft(z, E, 0.5, rng=np.random.default_rng(7))[3]
    c = _soft(z, E, 0.5, rng=np.random.default_rng(8))[3]
    assert a.recon.value.tobytes() == b.recon.value.tobytes()
    assert a.recon.value.tobytes() != c.recon.value.tobytes()
    d = _soft(z, E, 0.5)[3]
    e = _soft(z, E, 0.5)[3]
    assert d.recon.value.tobytes() == e.recon.value.tobytes()


def test_shared_codebook_levels_share_storage():
    stack = CodebookStack(levels=3, size=4, dim=2, shared=True)
    assert stack.level(0) is stack.level(2)
    stack.codewords[1, 0] = 5.0
    assert stack.level(2)[1, 0] == 5.0
    per = CodebookStack(levels=3, size=4, dim=2, shared=False)
    assert per.codewords.shape == (3, 4, 2)


def test_hard_exact_decomposition_with_zero_codeword():
    rng = np.random.default_rng(3)
    E = rng.standard_normal((8, 5))
    E[2] = 0.0
    codes = hard_quantize(E[5], [E, E, E])
    assert tuple(codes) == (5, 2, 2)


def test_hard_ties_go_to_lowest_index():
    E = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, -1.0]])
    # (0, 0) is equidistant from all three; (0.5, 0.5) from the first two
    assert hard_quantize(np.zeros(2), [E])[0] == 0
    assert hard_quantize(np.array([0.5, 0.5]), [E])[0] == 0
    E2 = E[[1, 0, 2]]
    assert hard_quantize(np.array([0.5, 0.5]), [E2])[0] == 0


def test_hard_quantize_accepts_stack_and_batches():
    rng = np.random.default_rng(4)
    stack = CodebookStack(2, 6, 3, shared=False, codewords=rng.standard_normal((2, 6, 3)))
    z = rng.standard_normal((5, 3))
    batch = hard_quantize(z, stack)
    assert batch.shape == (5, 2)
    for i in range(5):
        np.testing.assert_array_equal(hard_quantize(z[i], stack), batch[i])


def _hard_gaps(z, codebooks):
    """Per-level gap between the two smallest distances along the hard path."""
    r = z.copy()
    gaps = []
    for E in codebooks:
        d = ((r[:, None, :] - E[None]) ** 2).sum(-1)
        s = np.sort(d, axis=1)
        gaps.append(s[:, 1] - s[:, 0])
        r = r - E[d.argmin(1)]
    return np.stack(gaps, axis=1)


def soft_hard_agreement(n=1000, seed=0, alpha=1e-4):
    rng = np.random.default_rng(seed)
    d, K, L = 8, 16, 3
    E = [rng.standard_normal((K, d)) for _ in range(L)]
    z = rng.standard_normal((n, d)) * 1.5
    _, _, _, sa = _soft(z, E, alpha)
    soft_codes = np.stack([w.value.argmax(axis=1) for w in sa.weights], axis=1)
    hard_codes = hard_quantize(z, E)
    agree = (soft_codes == hard_codes).mean(axis=0)
    gaps = _hard_gaps(z, E)
    bad_rows = np.nonzero((soft_codes != hard_codes).any(axis=1))[0]
    # a disagreement is explained by a near-tie at or before the first differing level
    worst_gap = 0.0
    for i in bad_rows:
        first = int(np.argmax(soft_codes[i] != hard_codes[i]))
        worst_gap = max(worst_gap, float(gaps[i, : first + 1].min()))
    return agree, worst_gap, len(bad_rows)


def test_soft_argmax_matches_hard_argmin_in_the_limit():
    agree, worst_gap, n_bad = soft_hard_agreement()
    assert np.all(agree >= 0.99), agree
    assert worst_gap < 1e-6, (n_bad, worst_gap)


def test_soft_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    E0 = rng.standard_normal((4, 3))
    E1 = rng.standard_normal((4, 3))
    z0 = rng.standard_normal((5, 3))
    target = rng.standard_normal((5, 3))
    noise = [rng.gumbel(size=(5, 4)) for _ in range(2)]
    tape = ad.Tape()
    z = tape.leaf(z0)
    cb = [tape.leaf(E0), tape.leaf(E1)]
    sa = soft_quantize(z, cb, 0.7, noise=noise)
    loss = ad.sum((sa.recon - target) * (sa.recon - target)) + ad.sum(sa.weights[1] * sa.weights[1])
    analytic = tape.backward(loss)
    leaves = [z] + cb
    arrays = [v.value.copy() for v in leaves]
    numeric = ad.finite_diff(lambda: float(tape.forward(loss)), arrays, 1e-5,
                             set_value=lambda i, a: tape.set_value(leaves[i], a))
    for v, gn in zip(leaves, numeric):
        ga = analytic[v.id]
        assert np.linalg.norm(ga - gn) / np.linalg.norm(gn) < 1e-4


def test_alpha_schedule_values():
    assert alpha_at(AlphaSchedule(0.2, 0.0, 1e-3), 0) == 0.2
    s = AlphaSchedule(0.2, math.log(2) / 100, 1e-3)
    assert abs(alpha_at(s, 100) - 0.1) < 1e-15
    assert alpha_at(s, 10**6) == 1e-3
    assert alpha_at(AlphaSchedule(0.1, 5.0, 1e-3, constant=True), 50) == 0.1
    with pytest.raises(ValueError):
        alpha_at(s, -1)


def test_alpha_schedule_for_epochs_reaches_twice_floor():
    s = AlphaSchedule.for_epochs(200, 0.2, 1e-3)
    assert abs(s.alpha_at(199) - 2e-3) < 1e-15
    assert s.alpha_at(0) == 0.2


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 5.0), st.floats(0.0, 2.0), st.floats(1e-6, 1e-3),
       st.integers(0, 10_000), st.integers(0, 10_000))
def test_alpha_positive_nonincreasing(alpha0, decay, floor, t1, t2):
    s = AlphaSchedule(alpha0, decay, floor)
    lo, hi = sorted((t1, t2))
    assert s.alpha_at(hi) <= s.alpha_at(lo)
    assert s.alpha_at(hi) > 0


def test_codebook_json_round_trip_exact():
    rng = np.random.default_rng(9)
    for shared in (True, False):
        shape = (7, 5) if shared else (3, 7, 5)
        stack = CodebookStack(3, 7, 5, shared, rng.standard_normal(shape) * 1e3)
        back = CodebookStack.from_json(stack.to_json())
        assert back == stack
        assert back.codewords.tobytes() == stack.codewords.tobytes()
        assert back.checksum() == stack.checksum()


def test_codebook_json_rejects_unknown_version():
    stack = CodebookStack(1, 2, 2)
    bad = stack.to_json().replace('"version": 1', '"version": 99')
    with pytest.raises(ValueError, match="version"):
        CodebookStack.from_json(bad)
