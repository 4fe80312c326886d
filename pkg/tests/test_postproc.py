import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qnat.postproc import (
    QuantConfig, denoise_report, normalize_backward, normalize_batch, quant_penalty, quant_penalty_grad,
    quantize, quantize_ste_mask,
)

CFG = QuantConfig(5, -2, 2)
finite = st.floats(-5, 5, allow_nan=False)


class TestNormalize:
    def test_three_values(self):
        out, stats = normalize_batch([[0.2], [0.4], [0.6]])
        np.testing.assert_allclose(out[:, 0], [-1.2247, 0, 1.2247], atol=1e-4)
        assert stats.mean[0] == pytest.approx(0.4)

    def test_constant_column(self):
        out, _ = normalize_batch([[0.5], [0.5], [0.5]])
        np.testing.assert_array_equal(out, 0)

    def test_idempotent_on_standardized(self, rng):
        a = rng.normal(size=(64, 3))
        z, _ = normalize_batch(a)
        z2, _ = normalize_batch(z)
        np.testing.assert_allclose(z2, z, atol=1e-7)

    def test_single_row_rejected(self):
        with pytest.raises(ValueError):
            normalize_batch([[0.1, 0.2]])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 1.0), st.floats(-0.5, 0.5))
    def test_affine_invariance(self, seed, a, b):
        A = np.random.default_rng(seed).uniform(-1, 1, size=(32, 4))
        # exact without the variance floor
        z1, _ = normalize_batch(A, epsilon=0.0)
        z2, _ = normalize_batch(a * A + b, epsilon=0.0)
        np.testing.assert_allclose(z2, z1, atol=1e-9)
        # with it, scaling by a acts like a floor of epsilon / a^2 on A
        z3, stats = normalize_batch(a * A + b)
        expected = (A - A.mean(axis=0)) / np.sqrt(A.var(axis=0) + stats.epsilon / a**2)
        np.testing.assert_allclose(z3, expected, atol=1e-9)

    def test_backward_matches_finite_differences(self, rng):
        a = rng.normal(size=(6, 2))
        w = rng.normal(size=(6, 2))
        z, stats = normalize_batch(a)
        g = normalize_backward(w, z, stats)
        h = 1e-6
        num = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            ap, am = a.copy(), a.copy()
            ap[idx] += h
            am[idx] -= h
            num[idx] = (np.sum(w * normalize_batch(ap)[0]) - np.sum(w * normalize_batch(am)[0])) / (2 * h)
        np.testing.assert_allclose(g, num, atol=1e-6)


class TestQuantize:
    @pytest.mark.parametrize("v, q", [(0.3, 0), (-2.7, -2), (1.6, 2), (0.5, 1), (-0.5, -1), (7, 2), (-1, -1)])
    def test_examples(self, v, q):
        assert quantize(v, CFG) == q

    @given(arrays(float, 10, elements=finite))
    def test_idempotent(self, v):
        q = quantize(v, CFG)
        np.testing.assert_array_equal(quantize(q, CFG), q)

    @given(arrays(float, 10, elements=finite))
    def test_snaps_to_nearest_centroid(self, v):
        c = CFG.centroids()
        q = quantize(v, CFG)
        clipped = np.clip(v, -2, 2)
        best = np.min(np.abs(clipped[:, None] - c[None, :]), axis=1)
        np.testing.assert_allclose(np.abs(clipped - q), best, atol=1e-12)
        assert np.all(np.isin(q, c))

    @settings(max_examples=50)
    @given(st.integers(0, 4), st.floats(-0.4999, 0.4999))
    def test_bounded_noise_removed(self, k, e):
        c = CFG.centroids()[k]
        assert quantize(c + e, CFG) == c

    def test_other_levels(self):
        cfg = QuantConfig(3, -1, 1)
        np.testing.assert_array_equal(quantize([-0.6, 0.4, 0.9], cfg), [-1, 0, 1])

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            QuantConfig(1)
        with pytest.raises(ValueError):
            QuantConfig(5, 1, -1)

    def test_ste_mask(self):
        np.testing.assert_array_equal(quantize_ste_mask([-3, -2, 0, 2, 2.1], CFG), [0, 1, 1, 1, 0])


class TestPenalty:
    def test_on_centroid(self):
        assert quant_penalty([1.0, -2.0, 0.0], CFG) == 0

    def test_single(self):
        assert quant_penalty([0.3], CFG) == pytest.approx(0.09)

    def test_pair(self):
        assert quant_penalty([0.3, -1.4], CFG) == pytest.approx(0.25)

    @given(arrays(float, 6, elements=st.floats(-1.99, 1.99)))
    def test_grad_formula(self, v):
        np.testing.assert_allclose(quant_penalty_grad(v, CFG), 2 * (v - quantize(v, CFG)))

    def test_grad_numerical_away_from_boundaries(self):
        v = np.array([0.3, -1.2, 1.7])
        h = 1e-6
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            num = (quant_penalty(v + e, CFG) - quant_penalty(v - e, CFG)) / (2 * h)
            assert num == pytest.approx(quant_penalty_grad(v, CFG)[i], abs=1e-6)


class TestDenoise:
    def test_identical(self):
        r = denoise_report(np.ones((3, 2)), np.ones((3, 2)), CFG)
        assert r.mse_before == 0 and r.mse_after == 0 and r.after.snr_infinite

    def test_small_uniform_noise_removed(self, rng):
        clean = rng.choice(CFG.centroids(), size=(40, 4))
        noisy = clean + rng.uniform(-0.3, 0.3, size=clean.shape)
        r = denoise_report(clean, noisy, CFG)
        assert r.mse_after == 0 and r.mse_before > 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            denoise_report(np.ones(3), np.ones(4), CFG)
