from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfg_iscc.errors import InvalidArgumentError
from mfg_iscc.grid import (MatrixField, ScalarField, ddq_upwind, integrate_state, inverse_laplacian,
                           laplacian, make_grid, partial_q, partial_t)


def field(grid, values):
    return ScalarField(grid, np.asarray(values, dtype=float))


class TestMakeGrid:
    def test_unit_square(self):
        g = make_grid(1, 1, 4, 4)
        assert g.dq == 0.25 and g.dt == 0.25

    def test_desk_like(self):
        g = make_grid(10, 0.4, 64, 64)
        assert g.dq == pytest.approx(0.15625, abs=0, rel=1e-15)
        assert g.dt == pytest.approx(0.00625, abs=0, rel=1e-15)

    @pytest.mark.parametrize("args", [(0, 1, 4, 4), (1, -1, 4, 4), (math.inf, 1, 4, 4),
                                      (1, math.nan, 4, 4), (1, 1, 1, 4), (1, 1, 4, 2.5), (1, 1, True, 4)])
    def test_rejects_bad_arguments(self, args):
        with pytest.raises(InvalidArgumentError):
            make_grid(*args)

    @given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.integers(2, 500), st.integers(2, 500))
    def test_steps_tile_the_domain(self, q, T, n1, n2):
        g = make_grid(q, T, n1, n2)
        assert g.dq * g.n1 == pytest.approx(q, rel=1e-15)
        assert g.dt * g.n2 == pytest.approx(T, rel=1e-15)

    def test_node_coordinates(self):
        g = make_grid(1, 0.4, 4, 2)
        np.testing.assert_allclose(g.q, [0, 0.25, 0.5, 0.75])
        np.testing.assert_allclose(g.t, [0.2, 0.4])


class TestFields:
    def test_shape_checked(self):
        g = make_grid(1, 1, 4, 3)
        with pytest.raises(InvalidArgumentError):
            ScalarField(g, np.zeros((3, 4)))

    def test_non_finite_rejected(self):
        g = make_grid(1, 1, 4, 3)
        v = np.zeros((4, 3))
        v[1, 1] = np.nan
        with pytest.raises(InvalidArgumentError):
            ScalarField(g, v)

    def test_values_are_read_only(self):
        g = make_grid(1, 1, 4, 3)
        f = field(g, np.zeros((4, 3)))
        with pytest.raises(ValueError):
            f.values[0, 0] = 1.0

    def test_matrix_field_shape(self):
        g = make_grid(1, 1, 4, 3)
        assert MatrixField(g, np.zeros((4, 3, 2, 2))).k_antennas == 2
        with pytest.raises(InvalidArgumentError):
            MatrixField(g, np.zeros((4, 3, 2, 3)))


class TestPartialQ:
    def test_constant_gives_zero(self):
        g = make_grid(1, 1, 6, 5)
        f = field(g, np.full(g.shape, 3.7))
        assert np.all(partial_q(f).values == 0)
        assert np.all(partial_q(f, "upwind", np.ones(g.shape)).values == 0)

    def test_linear_ramp_exact(self):
        g = make_grid(2, 1, 7, 3)
        f = field(g, np.repeat(g.q[:, None], 3, axis=1))
        np.testing.assert_allclose(partial_q(f).values, 1.0, rtol=0, atol=1e-13)
        for s in (1.0, -1.0):
            np.testing.assert_allclose(partial_q(f, "upwind", np.full(g.shape, s)).values, 1.0, atol=1e-13)

    def test_second_order_convergence(self):
        errs = []
        for n in (32, 64):
            g = make_grid(1, 1, n, 2)
            f = field(g, np.repeat(np.sin(2 * np.pi * g.q)[:, None], 2, axis=1))
            exact = 2 * np.pi * np.cos(2 * np.pi * g.q)
            errs.append(np.max(np.abs(partial_q(f).values[:, 0] - exact)))
        assert errs[0] / errs[1] > 3.5

    def test_upwind_orientation(self):
        g = make_grid(1, 1, 4, 2)
        v = np.array([0.0, 1.0, 4.0, 9.0])[:, None] * np.ones((1, 2))
        fwd = partial_q(field(g, v), "upwind", np.ones(g.shape)).values[:, 0]
        bwd = partial_q(field(g, v), "upwind", -np.ones(g.shape)).values[:, 0]
        np.testing.assert_allclose(fwd, np.array([1, 3, 5, 5]) / g.dq)
        np.testing.assert_allclose(bwd, np.array([1, 1, 3, 5]) / g.dq)

    def test_zero_flux_ends(self):
        v = np.array([[0.0], [1.0], [4.0]])
        out = ddq_upwind(v, np.array([[1.0], [1.0], [-1.0]]), 1.0, "zero-flux")
        np.testing.assert_allclose(out[:, 0], [1.0, 3.0, 3.0])
        out = ddq_upwind(v, np.array([[-1.0], [1.0], [1.0]]), 1.0, "zero-flux")
        np.testing.assert_allclose(out[:, 0], [0.0, 3.0, 0.0])

    def test_upwind_requires_sign(self):
        g = make_grid(1, 1, 4, 2)
        with pytest.raises(InvalidArgumentError):
            partial_q(field(g, np.zeros(g.shape)), "upwind")
        with pytest.raises(InvalidArgumentError):
            partial_q(field(g, np.zeros(g.shape)), "spectral")

    @given(st.floats(-10, 10), st.floats(-10, 10))
    @settings(max_examples=30)
    def test_linearity(self, a, b):
        g = make_grid(1, 1, 6, 4)
        r = np.random.default_rng(0)
        f, h = field(g, r.normal(size=g.shape)), field(g, r.normal(size=g.shape))
        lhs = partial_q(a * f + b * h).values
        rhs = a * partial_q(f).values + b * partial_q(h).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + abs(a) + abs(b)) / g.dq)


class TestPartialT:
    def test_constant(self):
        g = make_grid(1, 1, 3, 5)
        assert np.all(partial_t(field(g, np.ones(g.shape))).values == 0)

    def test_linear_exact(self):
        g = make_grid(1, 2, 3, 5)
        f = field(g, np.repeat(g.t[None, :], 3, axis=0))
        np.testing.assert_allclose(partial_t(f).values, 1.0, atol=1e-13)

    def test_first_order_convergence(self):
        errs = []
        for n in (40, 80):
            g = make_grid(1, 1, 2, n)
            f = field(g, np.repeat((g.t ** 2)[None, :], 2, axis=0))
            errs.append(np.max(np.abs(partial_t(f).values[0] - 2 * g.t)))
        # first order: the error roughly halves, and stays within C dt
        assert 1.7 < errs[0] / errs[1] < 2.3
        assert errs[1] <= 2.0 / 80


class TestInverseLaplacian:
    def test_zero(self):
        g = make_grid(1, 1, 8, 8)
        assert np.all(inverse_laplacian(field(g, np.zeros(g.shape))).values == 0)

    def test_recovers_forward_operator(self):
        g = make_grid(1, 0.4, 24, 16)
        qq, tt = np.meshgrid(g.q, g.t, indexing="ij")
        u = np.cos(3 * qq) * np.sin(5 * tt) + qq * tt
        u -= u.mean()
        rec = inverse_laplacian(field(g, laplacian(u, g.dq, g.dt))).values
        assert np.max(np.abs(rec - u)) <= 1e-8

    def test_eigenvector(self):
        g = make_grid(1, 1, 8, 8)
        # Neumann eigenvectors of the 5-point operator are products of DCT-II cosines
        k, m = 3, 2
        i = np.arange(8)
        v = np.outer(np.cos(np.pi * k * (i + 0.5) / 8), np.cos(np.pi * m * (i + 0.5) / 8))
        lam = -(2 * np.sin(np.pi * k / 16) / g.dq) ** 2 - (2 * np.sin(np.pi * m / 16) / g.dt) ** 2
        np.testing.assert_allclose(laplacian(v, g.dq, g.dt), lam * v, atol=1e-10)
        np.testing.assert_allclose(inverse_laplacian(field(g, v)).values, v / lam, atol=1e-12)

    def test_mean_zero_gauge(self, rng):
        g = make_grid(1, 1, 10, 7)
        u = inverse_laplacian(field(g, rng.normal(size=g.shape) + 5.0)).values
        assert abs(u.mean()) < 1e-12


class TestIntegrateState:
    def test_domain_measure(self):
        g = make_grid(10, 1, 20, 3)
        assert integrate_state(field(g, np.ones(g.shape)), 1) == pytest.approx(10.0)

    def test_normalized_density(self, rng):
        g = make_grid(3, 1, 9, 2)
        v = rng.uniform(0.1, 1, g.shape)
        v /= v.sum(axis=0) * g.dq
        assert integrate_state(field(g, v), 0) == pytest.approx(1.0, abs=1e-14)

    def test_rectangle_rule_hand_sum(self):
        g = make_grid(1, 1, 4, 2)
        vals = np.array([0.25, 0.5, 0.75, 1.0])[:, None] * np.ones((1, 2))
        assert integrate_state(field(g, vals), 1) == pytest.approx(0.625, abs=1e-15)

    @pytest.mark.parametrize("j", [-1, 2, 1.5, True])
    def test_bad_index(self, j):
        g = make_grid(1, 1, 4, 2)
        with pytest.raises(InvalidArgumentError):
            integrate_state(field(g, np.ones(g.shape)), j)

    def test_raw_array_needs_grid(self):
        with pytest.raises(InvalidArgumentError):
            integrate_state(np.ones((4, 2)), 0)
