"""Quantizer, discretized likelihoods, and rate accounting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit, ndtr

from maskcodec import entropy as E
from maskcodec import tensor as T
from maskcodec.gradcheck import grad_check


class TestQuantize:
    def test_plain_rounding(self):
        assert E.quantize(np.array([1.4]))[0] == 1

    def test_half_away_from_zero(self):
        assert E.quantize(np.array([-0.5]))[0] == -1
        assert E.quantize(np.array([0.5]))[0] == 1

    def test_half_up_and_clamp(self):
        out = E.quantize(np.array([2.5, 300.0, -300.0]))
        np.testing.assert_array_equal(out, [3, 255, -255])

    def test_integer_dtype_and_alphabet(self):
        out = E.quantize(np.random.default_rng(0).normal(0, 100, 1000))
        assert out.dtype == np.int32
        assert out.min() >= E.SYMBOL_MIN and out.max() <= E.SYMBOL_MAX


class TestTrainPerturb:
    def test_support_bound_strict(self):
        x = np.zeros(100_000)
        out = E.train_perturb(x, 3)
        assert np.all(np.abs(out - x) < 0.5)

    def test_deterministic_per_seed(self):
        x = np.random.default_rng(1).normal(size=(50, 3))
        np.testing.assert_array_equal(E.train_perturb(x, 42), E.train_perturb(x, 42))
        assert not np.array_equal(E.train_perturb(x, 42), E.train_perturb(x, 43))

    def test_mean_within_monte_carlo_band(self):
        # U(-0.5, 0.5) mean over 1e6 draws: 3 sigma = 3/(sqrt(12)*1000) ~ 8.7e-4
        u = E.train_perturb(np.zeros(1_000_000), 7)
        assert -0.002 < u.mean() < 0.002


class TestGaussianLikelihood:
    def test_centered_unit_scale(self):
        p = E.gaussian_likelihood(np.array([0]), E.EntropyParams(mu=[0.0], sigma=[1.0]))
        expected = ndtr(0.5) - ndtr(-0.5)  # 0.382925 (error-function oracle)
        np.testing.assert_allclose(p[0], expected, rtol=1e-12)
        np.testing.assert_allclose(p[0], 0.382925, atol=5e-7)

    def test_shifted_mean(self):
        p = E.gaussian_likelihood(np.array([0]), E.EntropyParams(mu=[0.5], sigma=[1.0]))
        np.testing.assert_allclose(p[0], ndtr(0.0) - ndtr(-1.0), rtol=1e-12)
        np.testing.assert_allclose(p[0], 0.341345, atol=5e-7)

    def test_sigma_clamped_to_minimum(self):
        # sigma below 0.11 behaves exactly like sigma = 0.11
        p_small = E.gaussian_likelihood(np.array([0]), E.EntropyParams(mu=[0.0], sigma=[0.01]))
        expected = ndtr(0.5 / 0.11) - ndtr(-0.5 / 0.11)
        np.testing.assert_allclose(p_small[0], expected, rtol=1e-12)

    def test_probability_floor(self):
        p = E.gaussian_likelihood(np.array([250]), E.EntropyParams(mu=[0.0], sigma=[1.0]))
        assert p[0] == E.PROB_FLOOR

    @given(st.floats(-30, 30), st.floats(0.05, 50.0))
    @settings(max_examples=100, deadline=None)
    def test_bin_probabilities_nonnegative_and_monotone_edges(self, mu, sigma):
        symbols = np.arange(-20, 21)
        params = E.EntropyParams(mu=np.full(41, mu), sigma=np.full(41, sigma))
        p = E.gaussian_likelihood(symbols, params)
        assert np.all(p >= E.PROB_FLOOR) and np.all(p <= 1.0)
        # CDF at upper edges is monotone in the edge position
        edges = ndtr((symbols + 0.5 - mu) / max(sigma, E.SIGMA_MIN))
        assert np.all(np.diff(edges) >= 0)

    def test_clamp_cost_bounded_at_boundary(self):
        # clamping sigma can only widen bins for in-range symbols near mu:
        # -log2 P at the clamped scale is never above the analytic bound at SIGMA_MIN
        bound_bits = -np.log2(ndtr(0.5 / E.SIGMA_MIN) - ndtr(-0.5 / E.SIGMA_MIN))
        for sigma in (0.10, 0.05, 0.01, 1e-6):
            p = E.gaussian_likelihood(np.array([0]), E.EntropyParams(mu=[0.0], sigma=[sigma]))
            assert -np.log2(p[0]) <= bound_bits + 1e-12


class TestFactorizedLikelihood:
    def test_logistic_center_bin(self):
        prior = E.FactorizedPrior(loc=np.array([0.0]), scale=np.array([1.0]))
        p = E.factorized_likelihood(np.array([[0]]), prior)
        np.testing.assert_allclose(p[0, 0], expit(0.5) - expit(-0.5), rtol=1e-12)
        np.testing.assert_allclose(p[0, 0], 0.244919, atol=5e-7)

    def test_symmetry_at_zero_location(self):
        prior = E.FactorizedPrior(loc=np.array([0.0]), scale=np.array([2.0]))
        for k in (1, 5, 40):
            p_pos = E.factorized_likelihood(np.array([[k]]), prior)
            p_neg = E.factorized_likelihood(np.array([[-k]]), prior)
            np.testing.assert_allclose(p_pos, p_neg, rtol=1e-12)

    def test_telescoping_sum_at_most_one(self):
        # wide prior: every alphabet bin stays above the floor, so the sum
        # telescopes to F(255.5) - F(-255.5) < 1
        prior = E.FactorizedPrior(loc=np.array([0.0]), scale=np.array([40.0]))
        symbols = np.arange(E.SYMBOL_MIN, E.SYMBOL_MAX + 1).reshape(-1, 1)
        p = E.factorized_likelihood(symbols, prior)
        assert p.min() > E.PROB_FLOOR  # floor inactive by construction
        assert np.all(p <= 1.0)
        assert p.sum() <= 1.0 + 1e-6

    def test_scale_must_be_positive(self):
        with pytest.raises(ValueError):
            E.FactorizedPrior(loc=np.array([0.0]), scale=np.array([0.0]))


class TestRateEstimate:
    def test_sixteen_half_probability_symbols(self):
        p = np.full(16, 0.5)
        r = E.rate_estimate(p, np.ones(0), num_pixels=16)
        assert r.bits_y == 16.0 and r.bpp == 1.0

    def test_certain_symbols_cost_nothing(self):
        r = E.rate_estimate(np.ones(10), np.ones(5), num_pixels=4)
        assert r.bits_y == 0.0 and r.bits_z == 0.0 and r.bpp == 0.0

    def test_additivity(self):
        rng = np.random.default_rng(5)
        p_y = rng.uniform(E.PROB_FLOOR, 1.0, 100)
        p_z = rng.uniform(E.PROB_FLOOR, 1.0, 30)
        r = E.rate_estimate(p_y, p_z, num_pixels=64)
        np.testing.assert_allclose(r.bits_y / 64 + r.bits_z / 64, r.bpp, rtol=1e-12)

    def test_matches_independent_double_sum(self):
        rng = np.random.default_rng(6)
        p_y = rng.uniform(E.PROB_FLOOR, 1.0, 500)
        p_z = rng.uniform(E.PROB_FLOOR, 1.0, 200)
        r = E.rate_estimate(p_y, p_z, num_pixels=100)
        oracle_y = 0.0
        for v in p_y:  # independent oracle loop, double precision
            oracle_y += -np.log2(v)
        oracle_z = 0.0
        for v in p_z:
            oracle_z += -np.log2(v)
        np.testing.assert_allclose(r.bits_y, oracle_y, rtol=1e-9)
        np.testing.assert_allclose(r.bits_z, oracle_z, rtol=1e-9)
        np.testing.assert_allclose(r.bpp, (oracle_y + oracle_z) / 100, rtol=1e-9)


class TestDifferentiableBits:
    def test_matches_numpy_on_integer_symbols(self):
        rng = np.random.default_rng(9)
        symbols = rng.integers(-10, 10, size=(4, 4, 3)).astype(np.float64)
        mu = rng.normal(size=(4, 4, 3))
        sigma = np.abs(rng.normal(size=(4, 4, 3))) + 0.2
        bits = E.gaussian_bits(T.Tensor(symbols), T.Tensor(mu), T.Tensor(sigma))
        p = E.gaussian_likelihood(symbols, E.EntropyParams(mu=mu, sigma=sigma))
        np.testing.assert_allclose(float(bits.data), -np.log2(p).sum(), rtol=1e-12)

    def test_logistic_matches_numpy(self):
        rng = np.random.default_rng(10)
        symbols = rng.integers(-5, 5, size=(3, 3, 2)).astype(np.float64)
        loc = rng.normal(size=2)
        scale = np.abs(rng.normal(size=2)) + 0.5
        bits = E.logistic_bits(T.Tensor(symbols), T.Tensor(loc), T.Tensor(scale))
        p = E.factorized_likelihood(symbols, E.FactorizedPrior(loc=loc, scale=scale))
        np.testing.assert_allclose(float(bits.data), -np.log2(p).sum(), rtol=1e-12)

    def test_rate_gradient_wrt_mu_sigma_and_values(self):
        rng = np.random.default_rng(11)
        values = rng.normal(size=(3, 3, 2)) * 2.0
        mu0 = rng.normal(size=(3, 3, 2))
        sigma0 = np.abs(rng.normal(size=(3, 3, 2))) + 0.4

        r = grad_check(lambda m: E.gaussian_bits(T.Tensor(values), m, T.Tensor(sigma0)),
                       T.Tensor(mu0), tol=1e-3)
        assert r.passed, f"mu: {r}"
        r = grad_check(lambda s: E.gaussian_bits(T.Tensor(values), T.Tensor(mu0), s),
                       T.Tensor(sigma0), tol=1e-3)
        assert r.passed, f"sigma: {r}"
        # the perturbed-values path (y + u) also gets gradient
        u = E.train_perturb(np.zeros_like(values), 5)
        r = grad_check(lambda y: E.gaussian_bits(T.add(y, T.Tensor(u)), T.Tensor(mu0),
                                                 T.Tensor(sigma0)),
                       T.Tensor(values), tol=1e-3)
        assert r.passed, f"values: {r}"
