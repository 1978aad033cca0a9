"""Queue-state x time grid, fields over it, and finite-difference operators.

The state axis ``q`` (axis 0) carries ``n1`` nodes at ``q_k = k * dq`` for
``k = 0 .. n1 - 1`` so that the empty queue is a grid node.  The time axis
(axis 1) carries ``n2`` nodes at ``t_j = (j + 1) * dt``; the initial slice at
``t = 0`` is stored separately by whoever owns the density.

Array-level helpers (``ddq_*``, ``ddt_forward``, ``laplacian``,
``solve_poisson``) take raw ``ndarray`` values and are what the solver calls in
its inner loop.  The ``partial_q`` / ``partial_t`` / ``inverse_laplacian`` /
``integrate_state`` functions wrap them for :class:`ScalarField` values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import fft

from .errors import InvalidArgumentError, NumericalFailureError

__all__ = [
    "GridSpec",
    "ScalarField",
    "MatrixField",
    "make_grid",
    "partial_q",
    "partial_t",
    "laplacian",
    "inverse_laplacian",
    "integrate_state",
    "ddq_central",
    "ddq_upwind",
    "ddt_forward",
    "solve_poisson",
]

POISSON_RTOL = 1e-10


@dataclass(frozen=True)
class GridSpec:
    """Uniform discretization of ``[0, q_max] x [0, horizon_T]``."""

    q_max: float
    horizon_T: float
    n1: int
    n2: int

    @property
    def dq(self) -> float:
        return self.q_max / self.n1

    @property
    def dt(self) -> float:
        return self.horizon_T / self.n2

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n1, self.n2)

    @property
    def q(self) -> np.ndarray:
        """State coordinates, shape ``(n1,)``."""
        return self.dq * np.arange(self.n1)

    @property
    def t(self) -> np.ndarray:
        """Time coordinates of the stored slices, shape ``(n2,)``."""
        return self.dt * np.arange(1, self.n2 + 1)

    @property
    def cell_volume(self) -> float:
        return self.dq * self.dt


def make_grid(q_max: float, horizon_T: float, n1: int, n2: int) -> GridSpec:
    """Build a :class:`GridSpec`, validating every argument."""
    for name, val in (("q_max", q_max), ("horizon_T", horizon_T)):
        if not (isinstance(val, (int, float, np.floating, np.integer))
                and math.isfinite(val) and val > 0):
            raise InvalidArgumentError(f"{name} must be positive and finite, got {val!r}")
    for name, val in (("n1", n1), ("n2", n2)):
        if isinstance(val, bool) or int(val) != val or val < 2:
            raise InvalidArgumentError(f"{name} must be an integer >= 2, got {val!r}")
    return GridSpec(float(q_max), float(horizon_T), int(n1), int(n2))


def _check_values(grid: GridSpec, values: np.ndarray, trailing: tuple[int, ...]) -> None:
    expected = grid.shape + trailing
    if values.shape != expected:
        raise InvalidArgumentError(f"field shape {values.shape} does not match grid {expected}")
    if not np.all(np.isfinite(values)):
        raise InvalidArgumentError("field contains non-finite entries")


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real values on the grid nodes, ``values.shape == (n1, n2)``."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        _check_values(self.grid, vals, ())
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def with_values(self, values: np.ndarray) -> "ScalarField":
        return ScalarField(self.grid, values)

    def __add__(self, other: "ScalarField") -> "ScalarField":
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        return self.with_values(self.values - other.values)

    def __mul__(self, scalar: float) -> "ScalarField":
        return self.with_values(self.values * scalar)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class MatrixField:
    """A complex ``K x 2`` precoder per node, ``values.shape == (n1, n2, K, 2)``."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        if vals.ndim != 4 or vals.shape[-1] != 2:
            raise InvalidArgumentError(f"matrix field must be (n1, n2, K, 2), got {vals.shape}")
        _check_values(self.grid, vals, vals.shape[2:])
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def k_antennas(self) -> int:
        return self.values.shape[2]


# ---------------------------------------------------------------------------
# array-level operators

def ddq_central(values: np.ndarray, dq: float) -> np.ndarray:
    """Central differences in q; second-order one-sided stencils at the ends."""
    return np.gradient(values, dq, axis=0, edge_order=2)


def ddq_upwind(values: np.ndarray, sign: np.ndarray, dq: float,
               boundary: Literal["one-sided", "zero-flux"] = "one-sided") -> np.ndarray:
    """Sign-selected one-sided differences in q.

    Where ``sign >= 0`` the forward difference ``(f[k+1] - f[k]) / dq`` is
    used, elsewhere the backward one.  This is the orientation that makes
    ``rho * sign * ddq_upwind(phi)`` the exact negative adjoint of the
    conservative upwind flux divergence of ``rho * sign``.

    At the q-ends a stencil that would leave the domain is replaced by the
    opposite one-sided difference (``"one-sided"``) or by zero
    (``"zero-flux"``, the no-flux adjoint used by the transport operator).
    """
    diff = np.diff(values, axis=0) / dq
    fwd = np.empty_like(values)
    bwd = np.empty_like(values)
    fwd[:-1] = diff
    bwd[1:] = diff
    if boundary == "one-sided":
        fwd[-1] = diff[-1]
        bwd[0] = diff[0]
    elif boundary == "zero-flux":
        fwd[-1] = 0.0
        bwd[0] = 0.0
    else:
        raise InvalidArgumentError(f"unknown boundary treatment {boundary!r}")
    return np.where(sign >= 0, fwd, bwd)


def ddt_forward(values: np.ndarray, dt: float) -> np.ndarray:
    """Forward differences in t, backward difference on the final slice."""
    out = np.empty_like(values)
    out[:, :-1] = np.diff(values, axis=1) / dt
    out[:, -1] = out[:, -2]
    return out


def laplacian(values: np.ndarray, dq: float, dt: float, speed: float = 1.0) -> np.ndarray:
    """Five-point Laplacian ``speed**2 * f_qq + f_tt`` with reflecting (Neumann) ends."""
    p = np.pad(values, 1, mode="edge")
    f_qq = (p[2:, 1:-1] - 2.0 * values + p[:-2, 1:-1]) / dq**2
    f_tt = (p[1:-1, 2:] - 2.0 * values + p[1:-1, :-2]) / dt**2
    return speed**2 * f_qq + f_tt


def _neumann_symbol(n: int, h: float) -> np.ndarray:
    k = np.arange(n)
    return -(2.0 * np.sin(np.pi * k / (2.0 * n)) / h) ** 2


def solve_poisson(rhs: np.ndarray, dq: float, dt: float, speed: float = 1.0) -> np.ndarray:
    """Mean-zero solution of ``laplacian(u) = rhs - mean(rhs)``.

    The Neumann five-point Laplacian is diagonalized by the type-II DCT, so the
    solve is direct.  The residual is still checked against
    :data:`POISSON_RTOL` and a :class:`NumericalFailureError` is raised if it
    is not met.
    """
    f = rhs - rhs.mean()
    n1, n2 = f.shape
    symbol = speed**2 * _neumann_symbol(n1, dq)[:, None] + _neumann_symbol(n2, dt)[None, :]
    symbol[0, 0] = 1.0
    coef = fft.dctn(f, type=2, norm="ortho")
    coef /= symbol
    coef[0, 0] = 0.0
    u = fft.idctn(coef, type=2, norm="ortho")

    scale = np.linalg.norm(f)
    if scale > 0.0:
        res = np.linalg.norm(laplacian(u, dq, dt, speed) - f) / scale
        if not res <= POISSON_RTOL:
            raise NumericalFailureError("Poisson solve did not reach tolerance", residual=float(res))
    return u


# ---------------------------------------------------------------------------
# field-level operations

def partial_q(f: ScalarField, scheme: Literal["central", "upwind"] = "central",
              sign: ScalarField | np.ndarray | None = None,
              boundary: Literal["one-sided", "zero-flux"] = "one-sided") -> ScalarField:
    """Finite-difference approximation of ``df/dq``.

    Parameters
    ----------
    f : ScalarField
        Field to differentiate.
    scheme : {"central", "upwind"}
        ``"upwind"`` requires ``sign``; see :func:`ddq_upwind` for the
        orientation convention.
    sign : ScalarField or ndarray, optional
        Drift field whose sign selects the one-sided stencil.
    boundary : {"one-sided", "zero-flux"}
        End treatment for the upwind scheme.
    """
    g = f.grid
    if scheme == "central":
        return f.with_values(ddq_central(f.values, g.dq))
    if scheme == "upwind":
        if sign is None:
            raise InvalidArgumentError("upwind differencing needs a sign field")
        s = sign.values if isinstance(sign, ScalarField) else np.asarray(sign, dtype=float)
        if s.shape != g.shape:
            raise InvalidArgumentError("sign field does not match the grid")
        return f.with_values(ddq_upwind(f.values, s, g.dq, boundary))
    raise InvalidArgumentError(f"unknown scheme {scheme!r}")


def partial_t(f: ScalarField) -> ScalarField:
    """Forward-difference ``df/dt`` (backward on the final slice)."""
    return f.with_values(ddt_forward(f.values, f.grid.dt))


def inverse_laplacian(f: ScalarField, speed: float = 1.0) -> ScalarField:
    """Solve ``laplacian(u) = f`` with Neumann ends in the mean-zero gauge.

    ``f`` is mean-centred first, since the Neumann Laplacian annihilates
    constants.  ``speed`` rescales the q-direction (``speed**2 * u_qq + u_tt``);
    the default is the plain isotropic operator.
    """
    g = f.grid
    return f.with_values(solve_poisson(f.values, g.dq, g.dt, speed))


def integrate_state(f: ScalarField | np.ndarray, j: int, grid: GridSpec | None = None) -> float:
    """Rectangle-rule integral ``sum_k f[k, j] * dq`` over the state axis."""
    if isinstance(f, ScalarField):
        grid, values = f.grid, f.values
    else:
        if grid is None:
            raise InvalidArgumentError("a grid is required for raw arrays")
        values = np.asarray(f, dtype=float)
    if isinstance(j, bool) or int(j) != j or not 0 <= j < values.shape[1]:
        raise InvalidArgumentError(f"time index {j!r} out of range [0, {values.shape[1]})")
    return float(values[:, int(j)].sum() * grid.dq)
