from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfg_iscc.errors import InvalidArgumentError
from mfg_iscc.grid import MatrixField, ScalarField, make_grid
from mfg_iscc.system import (ChannelModel, PriceParams, SensingDataParams, channel_grams, drift,
                             mean_interference, rate_exact, rate_linear, sample_channel, sensing_rate, sinr,
                             unit_price_finite, unit_price_mf)

MODEL = ChannelModel(seed=7, m_antennas=4, k_antennas=2, pathloss_db=20.0, noise_power_c=1e-3)


def uniform_rho(g):
    return ScalarField(g, np.full(g.shape, 1.0 / g.q_max))


class TestChannel:
    def test_deterministic(self):
        np.testing.assert_array_equal(sample_channel(MODEL, 3, 5), sample_channel(MODEL, 3, 5))

    def test_seed_and_index_dependence(self):
        other = ChannelModel(seed=8, m_antennas=4, k_antennas=2, pathloss_db=20.0)
        assert np.any(sample_channel(MODEL, 3, 5) != sample_channel(other, 3, 5))
        assert np.any(sample_channel(MODEL, 3, 5) != sample_channel(MODEL, 5, 3))

    def test_second_moment(self):
        m = ChannelModel(seed=1, m_antennas=1, k_antennas=1, pathloss_db=30.0)
        draws = np.array([sample_channel(m, i, 0)[0, 0] for i in range(10_000)])
        assert np.mean(np.abs(draws) ** 2) == pytest.approx(m.pathloss_gain, rel=0.05)

    def test_grams(self):
        g = make_grid(1, 1, 3, 2)
        G = channel_grams(MODEL, g)
        H = sample_channel(MODEL, 2, 1)
        np.testing.assert_allclose(G[2, 1], H.conj().T @ H, atol=1e-16)

    def test_negative_index(self):
        with pytest.raises(InvalidArgumentError):
            sample_channel(MODEL, -1, 0)


class TestInterference:
    def test_zero_precoder(self):
        g = make_grid(1, 1, 4, 3)
        W = MatrixField(g, np.zeros(g.shape + (2, 2), complex))
        assert mean_interference(uniform_rho(g), W, MODEL, 10, 1) == 0.0

    def test_delta(self, rng):
        g = make_grid(2, 1, 5, 3)
        i, j, N = 3, 2, 17
        rho = np.zeros(g.shape)
        rho[i, :] = 1.0 / g.dq
        Wv = np.zeros(g.shape + (2, 2), complex)
        Wv[i, j] = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        H = sample_channel(MODEL, i, j)
        expected = N * sum(np.linalg.norm(H @ Wv[i, j][:, c]) ** 2 for c in range(2))
        got = mean_interference(ScalarField(g, rho), MatrixField(g, Wv), MODEL, N, j)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_uniform_density_constant_gram(self, rng):
        g = make_grid(1, 1, 6, 2)
        w = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        Wv = np.broadcast_to(w, g.shape + (2, 2)).copy()
        H = rng.normal(size=(4, 2)) + 1j * rng.normal(size=(4, 2))
        grams = np.broadcast_to(H.conj().T @ H, g.shape + (2, 2)).copy()
        expected = 5 * (np.linalg.norm(H @ w[:, 0]) ** 2 + np.linalg.norm(H @ w[:, 1]) ** 2)
        got = mean_interference(uniform_rho(g), MatrixField(g, Wv), grams, 5, 0)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_negative_density(self):
        g = make_grid(1, 1, 4, 2)
        rho = np.full(g.shape, 1.0)
        rho[0, 0] = -1e-6
        W = MatrixField(g, np.zeros(g.shape + (2, 2), complex))
        with pytest.raises(InvalidArgumentError):
            mean_interference(ScalarField(g, rho), W, MODEL, 1, 0)


class TestSinr:
    H = np.eye(4, 2).astype(complex)

    def test_zero_comm_beam(self):
        assert sinr(np.array([[1.0, 0.0], [1.0, 0.0]]), self.H, 0.0, 1.0) == 0.0

    def test_unit_ratio(self):
        W = np.array([[0.0, 0.6], [0.0, 0.8]])
        assert sinr(W, self.H, 0.0, 1.0) == pytest.approx(1.0, rel=1e-15)

    def test_interference_monotone(self):
        W = np.array([[0.0, 1.0], [0.0, 0.5]])
        assert sinr(W, self.H, 2.0, 0.1) < sinr(W, self.H, 1.0, 0.1)

    def test_noise_must_be_positive(self):
        with pytest.raises(InvalidArgumentError):
            sinr(np.zeros((2, 2)), self.H, 0.0, 0.0)


class TestRates:
    def test_exact_unit(self):
        assert rate_exact(1.0, 1.0) == 1.0

    @pytest.mark.parametrize("x0", [0.01, 1.0, 10.0])
    def test_tangency(self, x0):
        assert rate_linear(x0, 3e5, x0) == pytest.approx(rate_exact(x0, 3e5), rel=1e-14)

    def test_linear_dominates(self):
        chi = np.linspace(0, 100, 2001)
        for x0 in (0.01, 1.0, 10.0):
            assert np.all(rate_linear(chi, 1.0, x0) >= rate_exact(chi, 1.0) - 1e-12)

    @given(st.floats(0, 1e3), st.floats(0, 1e3))
    def test_exact_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert rate_exact(lo, 1.0) <= rate_exact(hi, 1.0)

    def test_bad_anchor(self):
        with pytest.raises(InvalidArgumentError):
            rate_linear(1.0, 1.0, 0.0)


class TestSensingRate:
    def test_unit(self):
        assert sensing_rate(SensingDataParams(1, 1, 1, 1, 1)) == 1

    def test_product(self):
        assert sensing_rate(SensingDataParams(2, 1, 10, 1000, 8)) == 160000

    def test_redundancy_below_one(self):
        with pytest.raises(InvalidArgumentError):
            SensingDataParams(0.5, 1, 1, 1, 1)

    @pytest.mark.parametrize("field", ["beam_switch_speed", "n_quantized_angles", "sampling_freq",
                                       "bits_per_sample"])
    def test_positive(self, field):
        kw = dict(redundancy=1, beam_switch_speed=1, n_quantized_angles=1, sampling_freq=1, bits_per_sample=1)
        kw[field] = 0
        with pytest.raises(InvalidArgumentError):
            SensingDataParams(**kw)


class TestPrice:
    def test_single_device(self):
        assert unit_price_finite(1, [5.0], 0, PriceParams(base_price=0.3)) == 0.3

    def test_three_devices(self):
        p = PriceParams(base_price=0.1, load_coeff=1.0)
        assert unit_price_finite(3, [1, 1, 1], 1, p) == pytest.approx(1.1, rel=1e-15)

    def test_empty_rates(self):
        with pytest.raises(InvalidArgumentError):
            unit_price_finite(1, [], 0, PriceParams())

    def test_large_population_limit(self):
        rng = np.random.default_rng(3)
        p = PriceParams(base_price=0.1, load_coeff=0.05)
        n = 10_000
        g = make_grid(1.0, 1.0, 200, 2)
        R = 4.0 * (1.0 + g.q)
        rho = uniform_rho(g)
        mf = unit_price_mf(rho, ScalarField(g, np.repeat(R[:, None], 2, axis=1)), 0, p)
        # devices drawn from rho, each carrying the rate of its state node
        rates = R[rng.integers(0, g.n1, n)]
        assert unit_price_finite(n, rates, 0, p) == pytest.approx(mf, rel=0.01)

    def test_mf_zero_rate(self):
        g = make_grid(1, 1, 4, 2)
        assert unit_price_mf(uniform_rho(g), ScalarField(g, np.zeros(g.shape)), 0, PriceParams()) == 0.1

    def test_mf_delta(self):
        g = make_grid(1, 1, 4, 2)
        rho = np.zeros(g.shape)
        rho[2] = 1.0 / g.dq
        R = np.zeros(g.shape)
        R[2] = 7.0
        p = PriceParams(base_price=0.1, load_coeff=0.5)
        assert unit_price_mf(ScalarField(g, rho), ScalarField(g, R), 1, p) == pytest.approx(3.6, rel=1e-15)

    def test_mf_ramp(self):
        g = make_grid(1, 1, 4, 2)
        R = np.array([[0.0], [1.0], [2.0], [3.0]]) * np.ones((1, 2))
        p = PriceParams(base_price=0.1, load_coeff=0.5)
        assert unit_price_mf(uniform_rho(g), ScalarField(g, R), 0, p) == pytest.approx(0.1 + 0.5 * 1.5)

    def test_mf_at_least_base(self, rng):
        g = make_grid(1, 1, 6, 3)
        rho = rng.uniform(0, 1, g.shape)
        rho /= rho.sum(axis=0) * g.dq
        R = rng.uniform(0, 10, g.shape)
        for j in range(3):
            assert unit_price_mf(ScalarField(g, rho), ScalarField(g, R), j, PriceParams()) >= 0.1

    def test_price_validation(self):
        with pytest.raises(InvalidArgumentError):
            PriceParams(base_price=0.0)
        with pytest.raises(InvalidArgumentError):
            PriceParams(bandwidth=-1.0)


class TestDrift:
    def test_equilibrium(self):
        assert drift(5.0, 5.0) == 0.0

    def test_anchor(self):
        B, x0, D = 1e6, 10.0, 800.0
        assert drift(rate_linear(x0, B, x0), D) == pytest.approx(-B * math.log2(1 + x0) + D, rel=1e-14)

    def test_pure_drain(self):
        assert drift(rate_linear(0.5, 1e6, 10.0), 0.0) < 0
