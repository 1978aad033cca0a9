from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from mfg_iscc.errors import InvalidArgumentError
from mfg_iscc.sensing import (ArrayGeometry, BeampatternSpec, beampattern_mse, build_mse_kernel,
                              ideal_beampattern, majorize, majorize_field, optimal_gamma, quartic_mse,
                              steering_matrix, steering_vector, surrogate_mse)

GEOM = ArrayGeometry()
SPEC = BeampatternSpec.from_targets()
KERNEL = build_mse_kernel(SPEC, GEOM)
P_MAX = 0.1


def random_W(rng, n=None, power=None):
    shape = (2, 2) if n is None else (n, 2, 2)
    W = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    target = rng.uniform(0, P_MAX, () if n is None else n) if power is None else power
    scale = np.sqrt(target / np.sum(np.abs(W) ** 2, axis=(-2, -1)))
    return W * np.asarray(scale)[..., None, None]


class TestSteering:
    def test_broadside(self):
        np.testing.assert_allclose(steering_vector(0.0, ArrayGeometry(4)), np.ones(4))

    def test_thirty_degrees(self):
        np.testing.assert_allclose(steering_vector(30.0, GEOM), [1, 1j], atol=1e-15)

    def test_endfire(self):
        np.testing.assert_allclose(steering_vector(90.0, ArrayGeometry(3)), [1, -1, 1], atol=1e-15)

    def test_first_entry_and_modulus(self):
        a = steering_matrix(np.linspace(-90, 90, 37), ArrayGeometry(5, 0.37))
        assert np.all(a[:, 0] == 1)
        np.testing.assert_allclose(np.abs(a), 1.0, atol=1e-15)

    @given(st.floats(-90, 90))
    def test_mirror_is_conjugate(self, th):
        np.testing.assert_allclose(steering_vector(-th, GEOM), np.conj(steering_vector(th, GEOM)), atol=1e-15)

    def test_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            steering_vector(91.0, GEOM)

    @pytest.mark.parametrize("k,d", [(0, 0.5), (2, 0.0), (1.5, 0.5)])
    def test_bad_geometry(self, k, d):
        with pytest.raises(InvalidArgumentError):
            ArrayGeometry(k, d)


class TestIdealBeampattern:
    @pytest.mark.parametrize("theta,expected", [(-40.0, 1), (-34.0, 0), (3.0, 1), (-45.0, 1), (-35.0, 1),
                                                (5.0, 1), (5.5, 0), (60.0, 0)])
    def test_membership(self, theta, expected):
        assert ideal_beampattern(theta, (-40.0, 0.0, 40.0), 10.0) == expected

    def test_spec_form(self):
        assert ideal_beampattern(-40.0, SPEC) == 1
        assert ideal_beampattern(-34.0, SPEC) == 0

    def test_spec_grid(self):
        assert SPEC.n_angles == 181
        # three targets, 11 one-degree samples each
        assert SPEC.desired.sum() == 33

    def test_spec_validation(self):
        with pytest.raises(InvalidArgumentError):
            BeampatternSpec(np.array([0.0, 0.0]), np.array([1.0, 0.0]))
        with pytest.raises(InvalidArgumentError):
            BeampatternSpec(np.array([0.0, 1.0]), np.array([1.5, 0.0]))


class TestBeampatternMse:
    def test_zero_precoder_zero_scale(self):
        assert beampattern_mse(0.0, np.zeros((2, 2)), SPEC, GEOM) == 0.0

    def test_zero_precoder_unit_scale(self):
        assert beampattern_mse(1.0, np.zeros((2, 2)), SPEC, GEOM) == pytest.approx(33 / 181, rel=1e-15)

    def test_nonnegative(self, rng):
        W = random_W(rng, 50)
        assert np.all(beampattern_mse(rng.normal(size=50), W, SPEC, GEOM) >= 0)

    def test_quartic_agrees(self, rng):
        W = random_W(rng, 100)
        direct = beampattern_mse(optimal_gamma(W, SPEC, GEOM), W, SPEC, GEOM)
        np.testing.assert_allclose(quartic_mse(W, KERNEL), direct, rtol=1e-9)


class TestOptimalGamma:
    def test_zero(self):
        assert optimal_gamma(np.zeros((2, 2)), SPEC, GEOM) == 0.0

    def test_proportional_pattern(self, rng):
        W = random_W(rng)
        a = steering_matrix(SPEC.angles_deg, GEOM)
        p = np.sum(np.abs(a.conj() @ W) ** 2, axis=-1)
        W = W * np.sqrt(1.8 / p.max())
        p = np.sum(np.abs(a.conj() @ W) ** 2, axis=-1)
        spec = BeampatternSpec(SPEC.angles_deg, p / 2)
        assert optimal_gamma(W, spec, GEOM) == pytest.approx(2.0, rel=1e-12)

    def test_golden_section_oracle(self, rng):
        for _ in range(10):
            W = random_W(rng)
            res = minimize_scalar(lambda g: beampattern_mse(g, W, SPEC, GEOM), bracket=(-1.0, 1.0),
                                  method="golden", tol=1e-12)
            assert optimal_gamma(W, SPEC, GEOM) == pytest.approx(res.x, abs=1e-6)

    def test_is_minimizer(self, rng):
        W = random_W(rng)
        g = optimal_gamma(W, SPEC, GEOM)
        best = beampattern_mse(g, W, SPEC, GEOM)
        for dg in (-0.1, -1e-3, 1e-3, 0.1):
            assert beampattern_mse(g + dg, W, SPEC, GEOM) >= best

    def test_all_zero_desired(self):
        spec = BeampatternSpec(np.array([0.0, 10.0]), np.zeros(2))
        with pytest.raises(InvalidArgumentError):
            optimal_gamma(np.ones((2, 2)), spec, GEOM)


class TestKernel:
    def test_single_angle_zero_desired(self):
        spec = BeampatternSpec(np.array([20.0]), np.zeros(1))
        k = build_mse_kernel(spec, GEOM)
        a = steering_vector(20.0, GEOM)
        A = np.outer(a, a.conj())
        b1 = -A.T.reshape(-1)  # column-major vec
        np.testing.assert_allclose(k.b_vectors[0], b1, atol=1e-15)
        np.testing.assert_allclose(k.C, np.outer(b1, b1.conj()), atol=1e-15)

    @pytest.mark.parametrize("targets,width", [((-40.0, 0.0, 40.0), 10.0), ((10.0,), 30.0), ((-70.0, 65.0), 4.0)])
    def test_hermitian_psd(self, targets, width):
        k = build_mse_kernel(BeampatternSpec.from_targets(targets, width), ArrayGeometry(3, 0.4))
        np.testing.assert_allclose(k.C, k.C.conj().T, atol=1e-15)
        ev = np.linalg.eigvalsh(k.C)
        assert ev.min() >= -1e-10
        assert k.lambda_max == pytest.approx(np.max(np.abs(ev)), rel=1e-10)


class TestMajorizer:
    def test_zero_expansion_point(self, rng):
        maj = majorize(np.zeros((2, 2)), KERNEL, P_MAX)
        assert np.all(maj.B2 == 0)
        assert np.all(maj.u_vectors == 0)
        W = random_W(rng)
        expected = np.real(np.sum(W.conj() * (maj.B1 @ W))) + maj.e2
        assert surrogate_mse(W, maj) == pytest.approx(expected, rel=1e-14)
        assert surrogate_mse(np.zeros((2, 2)), maj) == maj.e2

    def test_reshape_identity(self, rng):
        Wk = random_W(rng, 200)
        maj = majorize_field(Wk, KERNEL, P_MAX)
        X = Wk @ np.conj(np.swapaxes(Wk, -1, -2))
        x = np.swapaxes(X, -1, -2).reshape(200, -1)
        b = 2.0 * x @ KERNEL.C.T - 2.0 * KERNEL.lambda_max * x
        np.testing.assert_allclose(maj.vec_b(), b, atol=1e-10)

    def test_definiteness(self, rng):
        maj = majorize_field(random_W(rng, 500), KERNEL, P_MAX)
        assert np.linalg.eigvalsh(maj.B1).min() >= -1e-9
        assert np.linalg.eigvalsh(maj.B2).max() <= 1e-9

    def test_upper_bound(self, rng):
        Wk, W = random_W(rng, 1000), random_W(rng, 1000)
        maj = majorize_field(Wk, KERNEL, P_MAX)
        direct = beampattern_mse(optimal_gamma(W, SPEC, GEOM), W, SPEC, GEOM)
        assert np.all(surrogate_mse(W, maj) >= direct - 1e-9)

    def test_tight_at_full_power_rank_one(self, rng):
        # ||W W^H||_F = ||W||_F^2 = P_max holds for a rank-one expansion point at full power
        w = rng.standard_normal(2) + 1j * rng.standard_normal(2)
        Wk = np.stack([w, np.zeros(2)], axis=1)
        Wk *= np.sqrt(P_MAX) / np.linalg.norm(Wk)
        maj = majorize(Wk, KERNEL, P_MAX)
        assert surrogate_mse(Wk, maj) == pytest.approx(quartic_mse(Wk, KERNEL), rel=1e-9, abs=1e-15)

    def test_convexity(self, rng):
        maj = majorize_field(random_W(rng, 300), KERNEL, P_MAX)
        W1, W2 = random_W(rng, 300), random_W(rng, 300)
        t = rng.uniform(0, 1, 300)[:, None, None]
        mid = surrogate_mse(t * W1 + (1 - t) * W2, maj)
        chord = t[:, 0, 0] * surrogate_mse(W1, maj) + (1 - t[:, 0, 0]) * surrogate_mse(W2, maj)
        assert np.all(mid <= chord + 1e-12)

    def test_power_precondition(self):
        with pytest.raises(InvalidArgumentError):
            majorize(np.ones((2, 2)), KERNEL, P_MAX)

    def test_shape_precondition(self):
        with pytest.raises(InvalidArgumentError):
            majorize(np.zeros((3, 2)), KERNEL, P_MAX)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_batched_matches_single(self, seed):
        r = np.random.default_rng(seed)
        Wk = random_W(r, 3)
        batch = majorize_field(Wk, KERNEL, P_MAX)
        for n in range(3):
            one = majorize(Wk[n], KERNEL, P_MAX)
            np.testing.assert_allclose(batch.B1[n], one.B1, atol=1e-15)
            np.testing.assert_allclose(batch.e2[n], one.e2, rtol=1e-13)
