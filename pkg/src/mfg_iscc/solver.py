"""G-prox primal-dual hybrid gradient solver for the mean-field precoding game.

Discretization
--------------
The density is stored on the grid slices ``t_j = (j + 1) dt`` with the initial
slice ``rho0`` kept apart; ``rho[:, -1]`` is the terminal density.  Density,
precoder and drift share nodes.  The transport constraint is the
implicit-in-time conservative upwind scheme

    r[:, j] = (rho[:, j] - rho[:, j - 1]) / dt + div(rho[:, j], Gamma[:, j])

(``rho[:, -1]`` read as ``rho0``) with zero flux through both queue ends.
Each slice is an M-matrix solve, so the march is stable and keeps the
density non-negative for any drift.  Running costs use the right-endpoint
rule over the stored slices.

Sign convention: the Lagrangian carries ``-<phi3, r>``.  After summation by
parts this gives the ``+d_t phi3 + Gamma d_q phi3`` density gradient, the
``+xi (phi3(T) - C q)`` terminal step and an ascent step on ``phi3`` along
``-G^{-1} r`` for the chosen dual metric ``G``.

Mean-field couplings (unit price and interference) are evaluated once per
outer iteration and held fixed inside it ("frozen coefficients").

Precoder step
-------------
The W update is an exact per-node trust-region solve of the frozen model.
The upwind term makes the model piecewise smooth in the drift with a kink at
``Gamma = 0``; :func:`update_W` resolves which side (or the kink itself) the
minimizer lies on.  A per-node step bound, halved where consecutive steps
reverse direction, damps the period-two exchange between the precoders and
the transport multiplier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg.lapack import dgtsv as _gtsv

from .errors import InvalidArgumentError, NumericalFailureError
from .grid import GridSpec, MatrixField, ScalarField, ddq_upwind, solve_poisson
from .sensing import Majorizer, MseKernel, majorize_field, surrogate_mse
from .system import LN2, PriceParams, received_power

__all__ = [
    "Problem",
    "SolverConfig",
    "SolverState",
    "Solution",
    "MeanField",
    "TraceRecord",
    "mean_field",
    "drift_field",
    "rate_field",
    "upwind_divergence",
    "transport_residual",
    "evolve",
    "transport_adjoint",
    "transport_solve",
    "transport_adjoint_solve",
    "dual_metric_solve",
    "project_density",
    "initial_state",
    "lagrangian",
    "objective",
    "grad_rho",
    "grad_W",
    "update_rho",
    "update_W",
    "update_terminal_rho",
    "update_duals",
    "residuals",
    "estimate_operator_norm",
    "solve",
]


# ---------------------------------------------------------------------------
# problem data


@dataclass(frozen=True, eq=False)
class Problem:
    """Everything the solver needs, already discretized and in solver units.

    Queue lengths are measured in data units of ``data_unit_bits`` bits, so
    rates and drifts here are in data units per second.
    """

    grid: GridSpec
    grams: np.ndarray = field(repr=False)          # (n1, n2, K, K) H^H H per node
    kernel: MseKernel = field(repr=False)
    price: PriceParams
    n_devices: int
    p_max: float
    zeta: float
    noise_power: float
    sensing_rate_bits: float
    data_unit_bits: float
    rho0: np.ndarray = field(repr=False)

    def __post_init__(self):
        g = self.grid
        if self.grams.shape[:2] != g.shape:
            raise InvalidArgumentError("channel Gram array does not match the grid")
        if self.n_devices < 1:
            raise InvalidArgumentError("device count must be >= 1")
        for name in ("p_max", "zeta", "noise_power", "data_unit_bits"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if not self.sensing_rate_bits >= 0:
            raise InvalidArgumentError("sensing rate must be non-negative")
        rho0 = np.asarray(self.rho0, dtype=float)
        if rho0.shape != (g.n1,) or np.any(rho0 < 0) or abs(rho0.sum() * g.dq - 1) > 1e-9:
            raise InvalidArgumentError("rho0 must be a non-negative density on the state grid")
        object.__setattr__(self, "rho0", rho0)

    @property
    def k_antennas(self) -> int:
        return self.grams.shape[-1]

    @property
    def rate_scale(self) -> float:
        """Bandwidth expressed in data units per second."""
        return self.price.bandwidth / self.data_unit_bits

    @property
    def sensing_rate(self) -> float:
        """Sensing data arrival ``D`` in data units per second."""
        return self.sensing_rate_bits / self.data_unit_bits


@dataclass(frozen=True)
class SolverConfig:
    """Iteration controls.

    ``step_primal`` / ``step_dual`` of ``None`` select steps automatically
    from a power-iteration estimate of the transport operator norm so that
    ``xi * sigma * ||A||**2 = step_safety``.  ``h1_speed`` rescales the
    q-direction of the H1 metric (``speed**2 d_qq + d_tt``); ``None`` uses
    ``q_max / T`` so both axes are measured in the same relative units.

    ``dual_metric`` selects the proximal metric of the transport multiplier:
    ``"transport"`` (default) uses the Gram operator ``A A^T`` of the upwind
    FPK map, ``"h1"`` the space-time Laplacian.
    """

    step_primal: float | None = None
    step_dual: float | None = None
    max_iters: int = 500
    tol_residual: float = 1e-6
    w_inner_iters: int = 3
    project_duals: bool = True
    dual_ratio: float = 1e6
    step_safety: float = 0.9
    h1_speed: float | None = None
    halving_patience: int = 5
    mse_dual_scale: float = 1.0
    power_dual_scale: float = 1.0
    w_step_scale: float = 1.0
    dual_metric: str = "transport"
    w_trust: float | None = 0.1

    def __post_init__(self):
        if self.w_trust is not None and not self.w_trust > 0:
            raise InvalidArgumentError("w_trust must be positive")
        if self.dual_metric not in ("transport", "h1"):
            raise InvalidArgumentError(f"dual_metric must be 'transport' or 'h1', got {self.dual_metric!r}")
        for name in ("step_primal", "step_dual", "h1_speed"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.max_iters < 0 or self.w_inner_iters < 1:
            raise InvalidArgumentError("max_iters must be >= 0 and w_inner_iters >= 1")
        if not self.tol_residual >= 0:
            raise InvalidArgumentError("tol_residual must be non-negative")
        for name in ("dual_ratio", "step_safety", "mse_dual_scale", "power_dual_scale", "w_step_scale"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    cost: float
    fpk_residual: float
    hjb_residual: float
    mse_violation: float
    power_violation: float
    mass_error: float


@dataclass(frozen=True, eq=False)
class SolverState:
    rho: ScalarField
    W: MatrixField
    phi1: ScalarField
    phi2: ScalarField
    phi3: ScalarField
    rho0: np.ndarray = field(repr=False)
    iter: int = 0
    trace: tuple[TraceRecord, ...] = ()

    @property
    def grid(self) -> GridSpec:
        return self.rho.grid

    @property
    def rho_terminal(self) -> np.ndarray:
        return self.rho.values[:, -1]


@dataclass(frozen=True, eq=False)
class Solution:
    state: SolverState
    converged: bool
    iterations_used: int
    steps: tuple[float, float]
    trace: tuple[TraceRecord, ...] = ()


@dataclass(frozen=True, eq=False)
class MeanField:
    """Population quantities held fixed within one outer iteration."""

    price: np.ndarray          # (n2,) unit computation price per interval
    interference: np.ndarray   # (n2,) mean-field interference power
    denom: np.ndarray          # (n2,) interference + noise


# ---------------------------------------------------------------------------
# physics on the grid


def previous_density(rho: np.ndarray, rho0: np.ndarray) -> np.ndarray:
    """Density one step earlier for every slice, ``hstack(rho0, rho[:, :-1])``."""
    return np.concatenate([rho0[:, None], rho[:, :-1]], axis=1)


def node_powers(W: np.ndarray, grams: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(||H w_r||^2, ||H w_c||^2)`` for every node."""
    return received_power(W[..., 0], grams), received_power(W[..., 1], grams)


def rate_field(problem: Problem, s_c: np.ndarray, denom: np.ndarray) -> np.ndarray:
    """Exact rate ``B log2(1 + chi)`` in data units per second."""
    return problem.rate_scale * np.log1p(s_c / denom[None, :]) / LN2


def drift_field(problem: Problem, s_c: np.ndarray, denom: np.ndarray) -> np.ndarray:
    """Queue drift ``D - R_lin(chi)`` in data units per second."""
    x0 = problem.price.sinr_anchor
    chi = s_c / denom[None, :]
    r_lin = problem.rate_scale * (math.log2(1 + x0) + (chi - x0) / (LN2 * (1 + x0)))
    return problem.sensing_rate - r_lin


def mean_field(problem: Problem, rho: np.ndarray, W: np.ndarray,
               rho0: np.ndarray | None = None) -> MeanField:
    """Unit price and interference from the current density and precoders."""
    g = problem.grid
    s_r, s_c = node_powers(W, problem.grams)
    interference = problem.n_devices * np.sum((s_r + s_c) * rho, axis=0) * g.dq
    denom = interference + problem.noise_power
    R = rate_field(problem, s_c, denom)
    price = problem.price.base_price + problem.price.load_coeff * np.sum(R * rho, axis=0) * g.dq
    return MeanField(price=price, interference=interference, denom=denom)


def upwind_divergence(rho: np.ndarray, gamma: np.ndarray, dq: float) -> np.ndarray:
    """Conservative upwind ``d_q(rho * gamma)`` with zero flux at both ends.

    Interface flux ``F_{i+1/2} = max(gamma_i, 0) rho_i + min(gamma_{i+1}, 0) rho_{i+1}``.
    Works column-wise on 2-D input.
    """
    flux_core = np.maximum(gamma[:-1], 0) * rho[:-1] + np.minimum(gamma[1:], 0) * rho[1:]
    zero = np.zeros_like(flux_core[:1])
    flux = np.concatenate([zero, flux_core, zero], axis=0)
    return (flux[1:] - flux[:-1]) / dq


def _slice_bands(gamma: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tridiagonals of ``I / dt + div(., gamma)`` for every time slice at once.

    Returns ``(lower, diag, upper)`` with shapes ``(n1 - 1, n2)``,
    ``(n1, n2)`` and ``(n1 - 1, n2)``; ``lower[i]`` is entry ``(i + 1, i)``.
    """
    gp = np.maximum(gamma, 0.0) / grid.dq
    gm = np.minimum(gamma, 0.0) / grid.dq
    diag = np.full(gamma.shape, 1.0 / grid.dt)
    diag[:-1] += gp[:-1]
    diag[1:] -= gm[1:]
    return np.ascontiguousarray((-gp[:-1]).T), np.ascontiguousarray(diag.T), np.ascontiguousarray(gm[1:].T)


def _tridiag_solve(lower, diag, upper, rhs):
    # direct LAPACK call: the per-slice overhead of solve_banded dominates small grids
    x, info = _gtsv(lower, diag, upper, rhs)[3:]
    if info != 0:
        raise NumericalFailureError("singular transport slice")
    return x


def transport_residual(rho: np.ndarray, rho0: np.ndarray, gamma: np.ndarray,
                       grid: GridSpec) -> np.ndarray:
    """Pointwise residual of the discrete FPK equation, shape ``(n1, n2)``."""
    return (rho - previous_density(rho, rho0)) / grid.dt + upwind_divergence(rho, gamma, grid.dq)


def evolve(rho0: np.ndarray, gamma: np.ndarray, grid: GridSpec) -> np.ndarray:
    """March the discrete FPK scheme forward from ``rho0``; zero residual by construction."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != grid.shape:
        raise InvalidArgumentError("drift field does not match the grid")
    rho0 = np.asarray(rho0, dtype=float)
    if rho0.shape != (grid.n1,):
        raise InvalidArgumentError("initial density does not match the grid")
    return transport_solve(np.zeros(grid.shape), gamma, grid, rho0)


def transport_adjoint(y: np.ndarray, gamma: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Adjoint, in the ``dq dt`` inner product, of the FPK residual map with a zero initial slice."""
    out = y / grid.dt
    out[:, :-1] -= y[:, 1:] / grid.dt
    out -= gamma * ddq_upwind(y, gamma, grid.dq, "zero-flux")
    return out


def transport_solve(r: np.ndarray, gamma: np.ndarray, grid: GridSpec,
                    rho0: np.ndarray | None = None) -> np.ndarray:
    """Solve ``A x = r`` by a forward march, ``A`` the FPK residual map.

    The initial slice is ``rho0`` (zero when omitted).
    """
    out = np.empty(grid.shape)
    cur = np.zeros(grid.n1) if rho0 is None else rho0
    lower, diag, upper = _slice_bands(gamma, grid)
    rhs = np.ascontiguousarray(r.T)
    for j in range(grid.n2):
        cur = _tridiag_solve(lower[j], diag[j], upper[j], rhs[j] + cur / grid.dt)
        out[:, j] = cur
    return out


def transport_adjoint_solve(y: np.ndarray, gamma: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Solve ``A^T u = y`` (adjoint in the ``dq dt`` inner product) by a backward march."""
    out = np.empty(grid.shape)
    nxt = np.zeros(grid.n1)
    lower, diag, upper = _slice_bands(gamma, grid)
    rhs = np.ascontiguousarray(y.T)
    for j in range(grid.n2 - 1, -1, -1):
        # transposed slice: the off-diagonals swap roles
        nxt = _tridiag_solve(upper[j], diag[j], lower[j], rhs[j] + nxt / grid.dt)
        out[:, j] = nxt
    return out


def dual_metric_solve(r: np.ndarray, gamma: np.ndarray, grid: GridSpec, metric: str,
                      h1_speed: float = 1.0) -> np.ndarray:
    """Apply ``G^{-1}`` for the transport-multiplier metric.

    ``"h1"`` is the space-time Neumann Laplacian (``G = -lap``);
    ``"transport"`` is the Gram operator ``G = A A^T`` of the upwind FPK map,
    inverted with one forward and one backward march.
    """
    if metric == "h1":
        return -solve_poisson(r, grid.dq, grid.dt, h1_speed)
    if metric == "transport":
        return transport_adjoint_solve(transport_solve(r, gamma, grid), gamma, grid)
    raise InvalidArgumentError(f"unknown dual metric {metric!r}")


def project_density(values: np.ndarray, dq: float) -> np.ndarray:
    """Euclidean projection of each column onto ``{x >= 0, sum(x) dq = 1}``."""
    v = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(v)):
        raise NumericalFailureError("density update produced non-finite values")
    squeeze = v.ndim == 1
    if squeeze:
        v = v[:, None]
    target = 1.0 / dq
    u = -np.sort(-v, axis=0)
    css = np.cumsum(u, axis=0) - target
    idx = np.arange(1, v.shape[0] + 1)[:, None]
    cond = u - css / idx > 0
    k = v.shape[0] - np.argmax(cond[::-1], axis=0)     # last index where cond holds
    tau = css[k - 1, np.arange(v.shape[1])] / k
    out = np.maximum(v - tau, 0.0)
    # remove rounding drift so each slice integrates to one to machine precision
    out *= target / out.sum(axis=0)
    return out[:, 0] if squeeze else out


# ---------------------------------------------------------------------------
# state


def initial_state(problem: Problem, seed: int = 0) -> SolverState:
    """``rho0`` on every slice, random precoders at half the power budget, zero duals."""
    g = problem.grid
    rng = np.random.default_rng([int(seed), 0x5EED])
    K = problem.k_antennas
    W = rng.standard_normal(g.shape + (K, 2)) + 1j * rng.standard_normal(g.shape + (K, 2))
    W *= np.sqrt(0.5 * problem.p_max / np.sum(np.abs(W) ** 2, axis=(-2, -1)))[..., None, None]
    rho = np.repeat(problem.rho0[:, None], g.n2, axis=1)
    zeros = np.zeros(g.shape)
    return SolverState(
        rho=ScalarField(g, rho), W=MatrixField(g, W),
        phi1=ScalarField(g, zeros), phi2=ScalarField(g, zeros), phi3=ScalarField(g, zeros),
        rho0=problem.rho0.copy(),
    )


def _majorizer(state: SolverState, problem: Problem) -> Majorizer:
    return majorize_field(state.W.values, problem.kernel, problem.p_max, check_power=False)


# ---------------------------------------------------------------------------
# Lagrangian and gradients


def objective(state: SolverState, problem: Problem, mf: MeanField | None = None) -> dict:
    """Energy, computation and terminal cost of a state (rectangle rule)."""
    g = problem.grid
    rho, W = state.rho.values, state.W.values
    mf = mean_field(problem, rho, W, state.rho0) if mf is None else mf
    _, s_c = node_powers(W, problem.grams)
    power = np.sum(np.abs(W) ** 2, axis=(-2, -1))
    R = rate_field(problem, s_c, mf.denom)
    vol = g.cell_volume
    energy = problem.price.weight_energy * float(np.sum(power * rho)) * vol
    compute = problem.price.weight_compute * float(np.sum(mf.price[None, :] * R * rho)) * vol
    terminal = problem.price.terminal_penalty * float(np.sum(g.q * rho[:, -1])) * g.dq
    return {"energy": energy, "compute_cost": compute, "terminal": terminal,
            "total": energy + compute + terminal}


def lagrangian(state: SolverState, problem: Problem, maj: Majorizer | None = None,
               mf: MeanField | None = None, form: str = "parts") -> float:
    """Discrete Lagrangian of the relaxed problem.

    Parameters
    ----------
    state, problem
        Current iterate and discretized scenario.
    maj : Majorizer, optional
        Sensing surrogate; built at ``state.W`` when omitted.
    mf : MeanField, optional
        Frozen population quantities.  Computed from ``state`` when omitted,
        which gives the exact Lagrangian; gradient checks pass a fixed one.
    form : {"parts", "direct"}
        ``"parts"`` is the summation-by-parts expression (running
        ``rho (d_t phi3 + Gamma d_q phi3)`` plus boundary terms);
        ``"direct"`` evaluates ``-<phi3, r>`` literally.  They agree to
        rounding.
    """
    g = problem.grid
    rho, W = state.rho.values, state.W.values
    phi3 = state.phi3.values
    maj = _majorizer(state, problem) if maj is None else maj
    mf = mean_field(problem, rho, W, state.rho0) if mf is None else mf
    cost = objective(state, problem, mf)["total"]

    c1 = surrogate_mse(W, maj) - problem.zeta
    c2 = np.sum(np.abs(W) ** 2, axis=(-2, -1)) - problem.p_max
    vol = g.cell_volume
    dual = float(np.sum(state.phi1.values * c1 + state.phi2.values * c2)) * vol

    _, s_c = node_powers(W, problem.grams)
    gamma = drift_field(problem, s_c, mf.denom)
    if form == "direct":
        r = transport_residual(rho, state.rho0, gamma, g)
        transport = -float(np.sum(phi3 * r)) * vol
    elif form == "parts":
        dphi_t = np.zeros_like(phi3)
        dphi_t[:, :-1] = np.diff(phi3, axis=1) / g.dt
        dphi_q = ddq_upwind(phi3, gamma, g.dq, "zero-flux")
        running = float(np.sum(rho * (dphi_t + gamma * dphi_q))) * vol
        boundary = float(np.sum(state.rho0 * phi3[:, 0] - rho[:, -1] * phi3[:, -1])) * g.dq
        transport = running + boundary
    else:
        raise InvalidArgumentError(f"unknown Lagrangian form {form!r}")
    return cost + dual + transport


def grad_rho(state: SolverState, problem: Problem, mf: MeanField | None = None) -> ScalarField:
    """Gradient of the Lagrangian with respect to the stored density slices.

    Every column holds ``beta1 ||W||^2 + beta2 Phi R + Gamma d_q phi3`` plus
    the forward difference ``d_t phi3``; on the terminal column the time
    difference is replaced by ``(C q - phi3(T)) / dt``.  All columns are
    densities per ``dq dt``.  The proximal term is left to the caller.
    """
    g = problem.grid
    rho, W, phi3 = state.rho.values, state.W.values, state.phi3.values
    mf = mean_field(problem, rho, W, state.rho0) if mf is None else mf
    _, s_c = node_powers(W, problem.grams)
    power = np.sum(np.abs(W) ** 2, axis=(-2, -1))
    R = rate_field(problem, s_c, mf.denom)
    gamma = drift_field(problem, s_c, mf.denom)
    pr = problem.price

    out = np.empty(g.shape)
    run = pr.weight_energy * power + pr.weight_compute * mf.price[None, :] * R
    run += gamma * ddq_upwind(phi3, gamma, g.dq, "zero-flux")
    out[:, :-1] = run[:, :-1] + np.diff(phi3, axis=1) / g.dt
    out[:, -1] = run[:, -1] + (pr.terminal_penalty * g.q - phi3[:, -1]) / g.dt
    return ScalarField(g, out)


def _w_coefficients(state: SolverState, problem: Problem, mf: MeanField) -> tuple:
    """Per-node scalar weights of the frozen-coefficient W model."""
    g = problem.grid
    rho = state.rho.values
    _, s_c = node_powers(state.W.values, problem.grams)
    gamma = drift_field(problem, s_c, mf.denom)
    dphi_q = ddq_upwind(state.phi3.values, gamma, g.dq, "zero-flux")
    pr = problem.price
    # d(rate)/d(s_c) = scale / (ln2 (den + s_c)); d(Gamma)/d(s_c) = -scale / (ln2 (1 + x0) den)
    price_w = pr.weight_compute * mf.price[None, :] * rho * problem.rate_scale / LN2
    transport_w = -rho * dphi_q * problem.rate_scale / (LN2 * (1 + pr.sinr_anchor) * mf.denom[None, :])
    return rho, price_w, transport_w


def _grad_W_with(state: SolverState, problem: Problem, maj: Majorizer, mf: MeanField,
                 transport_w: np.ndarray) -> np.ndarray:
    W = state.W.values
    rho, price_w, _ = _w_coefficients(state, problem, mf)
    _, s_c = node_powers(W, problem.grams)
    phi1 = state.phi1.values[..., None, None]
    phi2 = state.phi2.values[..., None, None]

    out = 2 * problem.price.weight_energy * rho[..., None, None] * W
    out = out + 2 * phi1 * (maj.B1 @ W + maj.u_vectors) + 2 * phi2 * W
    gw_c = np.einsum("...kl,...l->...k", problem.grams, W[..., 1])
    coef = price_w / (mf.denom[None, :] + s_c) + transport_w
    out[..., 1] += 2 * coef[..., None] * gw_c
    return out


def grad_W(state: SolverState, problem: Problem, maj: Majorizer | None = None,
           mf: MeanField | None = None) -> MatrixField:
    """Gradient of the Lagrangian with respect to the precoders.

    Uses the real-gradient convention ``2 dL/d(conj W)`` (what a steepest
    descent step on the real and imaginary parts follows).  The
    communication column alone picks up the rate and transport terms.
    """
    maj = _majorizer(state, problem) if maj is None else maj
    mf = mean_field(problem, state.rho.values, state.W.values, state.rho0) if mf is None else mf
    _, _, transport_w = _w_coefficients(state, problem, mf)
    return MatrixField(problem.grid, _grad_W_with(state, problem, maj, mf, transport_w))


def _clarke_grad_W(state: SolverState, problem: Problem, maj: Majorizer, mf: MeanField,
                   band: float) -> np.ndarray:
    """:func:`grad_W`, except that where ``|Gamma| <= band`` the minimum-norm
    element of the hull of both upwind branches is returned."""
    gw = grad_W(state, problem, maj, mf).values
    gamma = _drift_of(problem, state.W.values, mf)
    near = np.abs(gamma) <= band
    if not np.any(near):
        return gw
    tw_up, tw_down = _transport_branches(state, problem, mf)
    g_up = _grad_W_with(state, problem, maj, mf, tw_up)[near]
    g_dn = _grad_W_with(state, problem, maj, mf, tw_down)[near]
    d = g_up - g_dn
    dd = np.sum(np.abs(d) ** 2, axis=(-2, -1))
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = np.where(dd > 0, -np.real(np.sum(np.conj(d) * g_dn, axis=(-2, -1))) / dd, 0.0)
    theta = np.clip(theta, 0.0, 1.0)
    gw = gw.copy()
    gw[near] = g_dn + theta[:, None, None] * d
    return gw


# ---------------------------------------------------------------------------
# primal updates


def update_rho(state: SolverState, problem: Problem, xi: float,
               mf: MeanField | None = None) -> ScalarField:
    """Projected gradient step on the interior slices; the terminal slice is kept."""
    if not xi >= 0:
        raise InvalidArgumentError("step size must be non-negative")
    g = problem.grid
    rho = state.rho.values
    grad = grad_rho(state, problem, mf).values
    new = rho.copy()
    new[:, :-1] = project_density(rho[:, :-1] - xi * grad[:, :-1], g.dq)
    return ScalarField(g, new)


def update_terminal_rho(state: SolverState, problem: Problem, xi: float,
                        mf: MeanField | None = None) -> np.ndarray:
    """``rho_T <- proj(rho_T + xi (phi3(T) - C q - dt * h_T))``.

    ``h_T = beta1 ||W||^2 + beta2 Phi R + Gamma d_q phi3`` on the terminal
    slice is the running-cost part of that slice's gradient; it vanishes as
    ``dt -> 0``.  With ``xi / dt`` as the step this is the same projected
    gradient step the interior slices take.
    """
    if not xi >= 0:
        raise InvalidArgumentError("step size must be non-negative")
    g = problem.grid
    step = -g.dt * grad_rho(state, problem, mf).values[:, -1]
    return project_density(state.rho_terminal + xi * step, g.dq)


def _eigh(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched Hermitian eigendecomposition; closed form for ``2 x 2`` blocks."""
    if M.shape[-1] != 2:
        return np.linalg.eigh(M)
    a, d, off = M[..., 0, 0].real, M[..., 1, 1].real, M[..., 0, 1]
    mean, h, mod = 0.5 * (a + d), 0.5 * (a - d), np.abs(off)
    s = np.hypot(h, mod)
    lam = np.stack([mean - s, mean + s], axis=-1)
    safe = np.where(s > 0, s, 1.0)
    # rotation angle with cos(2t) = h / s, sin(2t) = |off| / s, evaluated without cancellation
    big = np.sqrt(0.5 * (1.0 + np.abs(h) / safe))
    small = mod / (2.0 * safe * big)
    cos_t = np.where(h >= 0, big, small)
    sin_t = np.where(h >= 0, small, big)
    cos_t = np.where(s > 0, cos_t, 1.0)
    sin_t = np.where(s > 0, sin_t, 0.0)
    e = np.where(mod > 0, off / np.where(mod > 0, mod, 1.0), 1.0)
    V = np.empty(M.shape, dtype=complex)
    V[..., 0, 0] = -sin_t
    V[..., 1, 0] = np.conj(e) * cos_t
    V[..., 0, 1] = cos_t
    V[..., 1, 1] = np.conj(e) * sin_t
    return lam, V


def _ball_coords(lam: np.ndarray, c: np.ndarray, radius2: float) -> np.ndarray:
    """Trust-region solve in eigen-coordinates.

    ``lam`` ascending ``(..., n)``, ``c = V^H b``.  Returns the coordinates of
    the minimizer of ``sum_i lam_i |y_i|^2 - 2 Re(c_i^* y_i)`` over
    ``||y||^2 <= radius2``.  The multiplier ``mu`` solves the secular equation
    ``||y(mu)|| = r`` by Newton steps on ``1/||y(mu)||`` started left of the
    root, where the iteration is monotone.
    """
    c2 = np.abs(c) ** 2
    # components at rounding level would otherwise mask the hard case
    r = math.sqrt(radius2)
    scale2 = (1e-13 * r * np.max(np.abs(lam), axis=-1, keepdims=True)) ** 2
    negligible = (c2 <= 1e-24 * np.max(c2, axis=-1, keepdims=True)) | (c2 <= scale2)
    phase0 = np.where(np.abs(c[..., 0]) > 0, c[..., 0] / np.maximum(np.abs(c[..., 0]), 1e-300), 1.0)
    c = np.where(negligible, 0.0, c)
    c2 = np.where(negligible, 0.0, c2)
    mu = np.zeros(lam.shape[:-1])

    def sec(ca, d, power):
        # sum of ca / d**power, skipping empty components (avoids 0/0 at a pole)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.sum(np.where(ca > 0, ca / d**power, 0.0), axis=-1)

    norm0 = np.sqrt(sec(c2, lam, 2))
    active = ~((lam[..., 0] > 0) & (norm0 <= r))
    hard = np.zeros(active.shape, dtype=bool)
    if np.any(active):
        la, ca = lam[active], c2[active]
        lo = np.maximum(-la[:, 0], 0.0)
        hi = lo + np.sqrt(ca.sum(axis=-1)) / r + 1e-300
        # hard case: the bottom component is empty and the norm stays inside the ball
        n_lo = np.sqrt(sec(ca, la + lo[:, None], 2))
        hard_a = (ca[:, 0] == 0.0) & (n_lo < r)
        # each |c_i| / (lam_i + mu) <= ||y(mu)|| gives a lower bound on the root
        m = np.maximum(lo, np.max(np.sqrt(ca) / r - la, axis=-1))
        m = np.minimum(m, hi)
        idx = np.flatnonzero(~hard_a)
        for _ in range(100):
            if idx.size == 0:
                break
            la_i, ca_i, lo_i, hi_i, m_i = la[idx], ca[idx], lo[idx], hi[idx], m[idx]
            d = la_i + m_i[:, None]
            n2 = sec(ca_i, d, 2)
            with np.errstate(divide="ignore", invalid="ignore"):
                f = 1.0 / np.sqrt(n2) - 1.0 / r
                lo_i = np.where(f < 0, m_i, lo_i)
                hi_i = np.where(f >= 0, m_i, hi_i)
                m_new = m_i - f / (sec(ca_i, d, 3) * n2**-1.5)
            # safeguard (only rounding can push Newton out of the bracket)
            outside = ~((m_new >= lo_i) & (m_new <= hi_i))
            m_new = np.where(outside, 0.5 * (lo_i + hi_i), m_new)
            # ||y|| within ~1e-13 r of the radius, or mu stalled at rounding level
            done = (np.abs(f) * r <= 1e-13) | (np.abs(m_new - m_i) <= 1e-15 * np.maximum(1.0, np.abs(m_i)))
            m[idx], lo[idx], hi[idx] = m_new, lo_i, hi_i
            idx = idx[~done]
        m = np.where(hard_a, np.maximum(-la[:, 0], 0.0), m)
        mu[active] = m
        hard[active] = hard_a

    if np.any(hard):
        c = c.copy()
        c[hard, 0] = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(np.abs(c) > 0, c / (lam + mu[..., None]), 0.0)
    if np.any(hard):
        # move along the bottom eigenvector up to the boundary
        short = radius2 - np.sum(np.abs(coef[hard]) ** 2, axis=-1)
        coef[hard, 0] = np.sqrt(np.maximum(short, 0.0)) * phase0[hard]
    return coef


def _ball_minimizer(H: np.ndarray, b: np.ndarray, radius2: float) -> np.ndarray:
    """Minimize ``x^H H x - 2 Re(b^H x)`` over ``||x||^2 <= radius2``, batched.

    ``H`` Hermitian ``(..., n, n)``.  Exact trust-region solution from the
    eigendecomposition (see :func:`_ball_coords`).
    """
    lam, V = _eigh(H)
    c = np.einsum("...ki,...k->...i", V.conj(), b)
    return np.einsum("...ik,...k->...i", V, _ball_coords(lam, c, radius2))


def _transport_branches(state: SolverState, problem: Problem, mf: MeanField) -> tuple:
    """Transport weights of the W model on either side of ``Gamma = 0``.

    The upwind term ``rho Gamma D phi3`` uses the forward difference where
    ``Gamma >= 0`` and the backward one elsewhere, so it is piecewise linear in
    ``Gamma`` with a kink at zero (large at the q-ends, where one side is the
    zero-flux difference).  Returns the weights of both pieces.
    """
    g = problem.grid
    rho = state.rho.values
    pr = problem.price
    scale = -rho * problem.rate_scale / (LN2 * (1 + pr.sinr_anchor) * mf.denom[None, :])
    up = ddq_upwind(state.phi3.values, np.ones(g.shape), g.dq, "zero-flux")
    down = ddq_upwind(state.phi3.values, -np.ones(g.shape), g.dq, "zero-flux")
    return scale * up, scale * down


def _kink_tolerance(problem: Problem) -> float:
    return 1e-7 * (abs(problem.sensing_rate) + problem.rate_scale)


def _w_prox(base, rhs, grams, price_w, transport_w, denom, W0, p_max, inner_iters):
    # flat batch: base/grams (n, K, K); rhs/W0 (n, K, 2); the rest (n,)
    # The model is block diagonal in (w_r, w_c): base for w_r and
    # base + coef * gram for w_c, coupled only through the ball.
    K = grams.shape[-1]
    lam_r, V_r = _eigh(base)
    c_r = np.einsum("...ki,...k->...i", V_r.conj(), rhs[..., 0])
    W = W0
    first_delta = None
    for _ in range(max(1, inner_iters)):
        _, s_c = node_powers(W, grams)
        coef = price_w / (denom + s_c) + transport_w
        lam_c, V_c = _eigh(base + coef[..., None, None] * grams)
        c_c = np.einsum("...ki,...k->...i", V_c.conj(), rhs[..., 1])
        lam = np.concatenate([lam_r, lam_c], axis=-1)
        order = np.argsort(lam, axis=-1)
        y = _ball_coords(np.take_along_axis(lam, order, -1),
                         np.take_along_axis(np.concatenate([c_r, c_c], axis=-1), order, -1), p_max)
        coords = np.empty_like(y)
        np.put_along_axis(coords, order, y, -1)
        W_new = np.stack([np.einsum("...ik,...k->...i", V_r, coords[..., :K]),
                          np.einsum("...ik,...k->...i", V_c, coords[..., K:])], axis=-1)
        if not np.all(np.isfinite(W_new)):
            raise NumericalFailureError("precoder inner iteration produced non-finite values")
        delta = float(np.linalg.norm(W_new - W))
        if first_delta is None:
            first_delta = delta
        elif delta > 10 * first_delta + 1e-8 * math.sqrt(p_max * W0.shape[0]):
            raise NumericalFailureError("precoder inner iteration diverged", residual=delta)
        W = W_new
    return W


def _kink_search(prox_at, drift_at, W_lo, W_hi, g_lo, g_hi, tol, iters):
    """Illinois regula falsi on the branch blend ``theta`` for ``Gamma(W(theta)) = 0``.

    ``W_lo`` / ``g_lo`` belong to ``theta = 0`` (drift >= 0) and ``W_hi`` /
    ``g_hi`` to ``theta = 1`` (drift < 0).  Returns the last iterate on the
    non-negative side for every node.
    """
    n = g_lo.size
    t_lo, t_hi = np.zeros(n), np.ones(n)
    g_lo, g_hi = g_lo.astype(float).copy(), g_hi.astype(float).copy()
    best = W_lo.copy()
    side = np.zeros(n, dtype=int)
    active = np.arange(n)
    for _ in range(iters):
        if active.size == 0:
            break
        gl, gh = g_lo[active], g_hi[active]
        width = t_hi[active] - t_lo[active]
        th = t_lo[active] - gl * width / (gh - gl)
        th = np.clip(th, t_lo[active] + 1e-9 * width, t_hi[active] - 1e-9 * width)
        Wm = prox_at(active, th)
        gm = drift_at(active, Wm)
        pos = gm >= 0
        ia, ib = active[pos], active[~pos]
        t_lo[ia], g_lo[ia] = th[pos], gm[pos]
        best[ia] = Wm[pos]
        t_hi[ib], g_hi[ib] = th[~pos], gm[~pos]
        # Illinois: halve the stale end when the same side moves twice
        s_new = np.where(pos, 1, -1)
        stale = side[active] == s_new
        g_hi[ia[stale[pos]]] *= 0.5
        g_lo[ib[stale[~pos]]] *= 0.5
        side[active] = s_new
        done = (np.abs(gm) <= tol) | (t_hi[active] - t_lo[active] <= 1e-12)
        active = active[~done]
    return best


def update_W(state: SolverState, problem: Problem, maj: Majorizer, xi: float,
             mf: MeanField | None = None, inner_iters: int = 3,
             trust: float | np.ndarray | None = None, kink_iters: int = 20) -> MatrixField:
    """Proximal W step under frozen mean-field coefficients.

    Per node this minimizes the quadratic model (energy, surrogate MSE,
    power and transport terms, with the exact-rate term linearized around
    the previous sweep) plus ``||W - W^k||^2 / (2 xi)`` over the power ball.
    When the model is convex with an interior minimizer this is the linear
    stationarity solve; otherwise the exact ball-constrained minimizer is
    taken.

    The transport weight is taken from the upwind branch selected by the
    sign of the drift at ``W^k``.  If the step lands on the other side of
    ``Gamma = 0`` the other branch is tried, and if that flips back too the
    minimizer sits on the kink: the branch weights are blended (a
    subgradient) and the blend is root-searched until ``Gamma = 0``.
    ``trust`` (scalar or per node) optionally caps ``||W - W^k||_F`` at
    ``trust * sqrt(P_max)``.
    """
    g = problem.grid
    xi = np.broadcast_to(np.asarray(xi, dtype=float), g.shape)
    if not np.all(xi > 0):
        raise InvalidArgumentError("step size must be positive")
    Wk = state.W.values
    K = problem.k_antennas
    mf = mean_field(problem, state.rho.values, Wk, state.rho0) if mf is None else mf
    rho, price_w, _ = _w_coefficients(state, problem, mf)
    tw_up, tw_down = _transport_branches(state, problem, mf)
    eye = np.eye(K)

    diag = problem.price.weight_energy * rho + state.phi2.values + 0.5 / xi
    base = state.phi1.values[..., None, None] * maj.B1 + diag[..., None, None] * eye
    rhs = (0.5 / xi)[..., None, None] * Wk - state.phi1.values[..., None, None] * maj.u_vectors
    denom = np.broadcast_to(mf.denom[None, :], g.shape)

    n = g.n1 * g.n2
    flat = dict(base=base.reshape(n, K, K), rhs=rhs.reshape(n, K, 2),
                grams=problem.grams.reshape(n, K, K), price_w=price_w.ravel(),
                denom=denom.ravel(), W0=Wk.reshape(n, K, 2))
    up_first = (_drift_of(problem, Wk, mf) >= 0).ravel()

    def prox(sel, tw):
        return _w_prox(flat["base"][sel], flat["rhs"][sel], flat["grams"][sel],
                       flat["price_w"][sel], tw, flat["denom"][sel], flat["W0"][sel],
                       problem.p_max, inner_iters)

    def drift_at(sel, W):
        _, s_c = node_powers(W, flat["grams"][sel])
        return drift_field(problem, s_c[None, :], flat["denom"][sel])[0]

    up, down = tw_up.ravel(), tw_down.ravel()
    W = prox(slice(None), np.where(up_first, up, down))
    gam = drift_at(slice(None), W)
    flipped = np.flatnonzero(np.where(up_first, gam < 0, gam >= 0))
    if flipped.size:
        other = np.where(up_first[flipped], down[flipped], up[flipped])
        W_o = prox(flipped, other)
        g_o = drift_at(flipped, W_o)
        keep = np.where(up_first[flipped], g_o < 0, g_o >= 0)
        W[flipped[keep]] = W_o[keep]
        sub = np.flatnonzero(~keep)
        if sub.size:
            kink = flipped[sub]
            # theta blends the down (0) and up (1) weights; on kink nodes the
            # drift is >= 0 at theta = 0 and < 0 at theta = 1
            uf = up_first[kink][:, None, None]
            W_lo = np.where(uf, W_o[sub], W[kink])
            W_hi = np.where(uf, W[kink], W_o[sub])
            g_lo = np.where(uf[:, 0, 0], g_o[sub], gam[kink])
            g_hi = np.where(uf[:, 0, 0], gam[kink], g_o[sub])
            W[kink] = _kink_search(lambda sel, th: prox(kink[sel], th * up[kink[sel]]
                                                       + (1 - th) * down[kink[sel]]),
                                   lambda sel, Wm: drift_at(kink[sel], Wm),
                                   W_lo, W_hi, g_lo, g_hi, _kink_tolerance(problem), kink_iters)
    W = W.reshape(Wk.shape)
    if trust is not None:
        # per-node trust region; a convex combination stays inside the ball
        step = np.sqrt(np.sum(np.abs(W - Wk) ** 2, axis=(-2, -1)))
        radius = np.asarray(trust, dtype=float) * math.sqrt(problem.p_max)
        shrink = np.minimum(1.0, radius / np.maximum(step, 1e-300))
        W = Wk + shrink[..., None, None] * (W - Wk)
    # guard the ball against rounding
    power = np.sum(np.abs(W) ** 2, axis=(-2, -1))
    over = power > problem.p_max
    if np.any(over):
        W = W.copy()
        W[over] *= np.sqrt(problem.p_max / power[over])[:, None, None]
    return MatrixField(g, align_phases(W, Wk))


def align_phases(W: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Rotate each precoder column by a unit phase to best match ``ref``.

    Every quantity of the model depends on a column only through
    ``w w^H``, so this changes nothing but keeps the PDHG extrapolation
    ``2 W^{k+1} - W^k`` from mixing unrelated phases.
    """
    z = np.sum(np.conj(W) * ref, axis=-2, keepdims=True)
    mag = np.abs(z)
    # below this the overlap carries no phase information (and z / mag can overflow)
    ok = mag > 1e-150
    rot = np.where(ok, z / np.where(ok, mag, 1.0), 1.0)
    return W * rot


# ---------------------------------------------------------------------------
# dual updates and diagnostics


def _drift_of(problem: Problem, W: np.ndarray, mf: MeanField) -> np.ndarray:
    _, s_c = node_powers(W, problem.grams)
    return drift_field(problem, s_c, mf.denom)


def update_duals(state: SolverState, problem: Problem, sigma: float, rho_bar: np.ndarray,
                 W_bar: np.ndarray, maj: Majorizer, mf: MeanField,
                 project: bool = True, h1_speed: float = 1.0,
                 mse_scale: float = 1.0, power_scale: float = 1.0,
                 metric: str = "h1", metric_gamma: np.ndarray | None = None):
    """Dual ascent: projected steps for the MSE and power multipliers and a
    preconditioned step for the transport multiplier (see :func:`dual_metric_solve`).
    ``metric_gamma`` is the drift defining the transport metric; it defaults
    to the extrapolated drift.

    Returns ``(phi1, phi2, phi3)`` as :class:`ScalarField`.
    """
    g = problem.grid
    c1 = surrogate_mse(W_bar, maj) - problem.zeta
    c2 = np.sum(np.abs(W_bar) ** 2, axis=(-2, -1)) - problem.p_max
    phi1 = state.phi1.values + sigma * mse_scale * c1
    phi2 = state.phi2.values + sigma * power_scale * c2
    if project:
        phi1 = np.maximum(phi1, 0.0)
        phi2 = np.maximum(phi2, 0.0)
    _, s_c = node_powers(W_bar, problem.grams)
    gamma = drift_field(problem, s_c, mf.denom)
    r = transport_residual(rho_bar, state.rho0, gamma, g)
    if metric_gamma is None:
        metric_gamma = gamma
    phi3 = state.phi3.values - sigma * dual_metric_solve(r, metric_gamma, g, metric, h1_speed)
    return ScalarField(g, phi1), ScalarField(g, phi2), ScalarField(g, phi3)


def residuals(state: SolverState, problem: Problem, maj: Majorizer | None = None,
              mf: MeanField | None = None, kink_band: float = 1e-6) -> dict:
    """FPK and HJB residuals in the ``dq dt``-weighted L2 norm.

    The HJB residual measures W-stationarity: ``grad_W`` at interior nodes,
    and at nodes on the power sphere the same gradient with an outward
    normal component removed (the power multiplier can absorb it).  It
    vanishes exactly at constrained stationary points.  Where ``|Gamma|`` is
    within ``kink_band * (D + B / data_unit)`` of zero the upwind transport
    term is not differentiable and the minimum-norm subgradient is used.
    """
    g = problem.grid
    W = state.W.values
    maj = _majorizer(state, problem) if maj is None else maj
    mf = mean_field(problem, state.rho.values, W, state.rho0) if mf is None else mf
    _, s_c = node_powers(W, problem.grams)
    gamma = drift_field(problem, s_c, mf.denom)
    r = transport_residual(state.rho.values, state.rho0, gamma, g)
    gw = _clarke_grad_W(state, problem, maj, mf, kink_band * (abs(problem.sensing_rate) + problem.rate_scale))
    power = np.sum(np.abs(W) ** 2, axis=(-2, -1))
    radial = np.real(np.sum(np.conj(W) * gw, axis=(-2, -1)))
    on_sphere = (power >= problem.p_max * (1 - 1e-9)) & (radial < 0)
    gw = gw - np.where(on_sphere, radial / np.maximum(power, 1e-300), 0.0)[..., None, None] * W
    vol = g.cell_volume
    fpk = math.sqrt(float(np.sum(r**2)) * vol)
    hjb = math.sqrt(float(np.sum(np.abs(gw) ** 2)) * vol)
    return {"fpk": fpk, "hjb": hjb}


def estimate_operator_norm(problem: Problem, state: SolverState, h1_speed: float = 1.0,
                           iters: int = 30, seed: int = 0, metric: str = "h1") -> float:
    """Power-iteration estimate of ``||A||`` from L2 into the dual of the ``metric`` norm.

    ``A`` maps the density slices to the FPK residual at the current drift.
    """
    g = problem.grid
    _, s_c = node_powers(state.W.values, problem.grams)
    mf = mean_field(problem, state.rho.values, state.W.values, state.rho0)
    gamma = drift_field(problem, s_c, mf.denom)
    zero0 = np.zeros(g.n1)

    def A(x):
        return transport_residual(x, zero0, gamma, g)

    def At(y):
        return transport_adjoint(y, gamma, g)

    x = np.random.default_rng(seed).standard_normal(g.shape)
    est = 0.0
    for _ in range(iters):
        x /= math.sqrt(float(np.sum(x**2)) * g.cell_volume)
        y = dual_metric_solve(A(x), gamma, g, metric, h1_speed)
        x = At(y)
        est = float(np.sum(x * x)) * g.cell_volume
        est = math.sqrt(math.sqrt(est))
    return est


# ---------------------------------------------------------------------------
# outer loop


def _record(state: SolverState, problem: Problem, it: int,
            maj: Majorizer, mf: MeanField) -> TraceRecord:
    res = residuals(state, problem, maj, mf)
    cost = objective(state, problem)["total"]
    W = state.W.values
    mse = surrogate_mse(W, maj) - problem.zeta
    power = np.sum(np.abs(W) ** 2, axis=(-2, -1)) - problem.p_max
    mass = np.abs(state.rho.values.sum(axis=0) * problem.grid.dq - 1.0)
    return TraceRecord(it, cost, res["fpk"], res["hjb"],
                       float(max(mse.max(), 0.0)), float(max(power.max(), 0.0)), float(mass.max()))


def resolve_steps(problem: Problem, cfg: SolverConfig, state: SolverState) -> tuple[float, float, float]:
    """Return ``(xi, sigma, h1_speed)`` after filling automatic choices."""
    g = problem.grid
    speed = cfg.h1_speed if cfg.h1_speed is not None else g.q_max / g.horizon_T
    xi, sigma = cfg.step_primal, cfg.step_dual
    if xi is None or sigma is None:
        norm = estimate_operator_norm(problem, state, speed, metric=cfg.dual_metric)
        budget = cfg.step_safety / norm**2
        if xi is None and sigma is None:
            xi = math.sqrt(budget / cfg.dual_ratio)
            sigma = xi * cfg.dual_ratio
        elif xi is None:
            xi = budget / sigma
        else:
            sigma = budget / xi
    return float(xi), float(sigma), float(speed)


def solve(problem: Problem, cfg: SolverConfig, seed: int = 0,
          state: SolverState | None = None, callback=None) -> Solution:
    """Run the G-prox PDHG iteration.

    Each iteration: freeze the mean field; step the interior density, the
    precoders and the terminal density; extrapolate; step the three duals;
    rebuild the sensing surrogate; record residuals.  Stops at
    ``cfg.max_iters`` or when ``fpk + hjb <= cfg.tol_residual``.
    """
    state = initial_state(problem, seed) if state is None else state
    g = problem.grid
    xi, sigma, speed = resolve_steps(problem, cfg, state)
    maj = _majorizer(state, problem)
    trace: list[TraceRecord] = []
    converged = False
    worse_streak = 0
    prev_res = math.inf

    trust = None if cfg.w_trust is None else np.full(g.shape, cfg.w_trust)
    last_step = None
    for it in range(1, cfg.max_iters + 1):
        try:
            mf = mean_field(problem, state.rho.values, state.W.values, state.rho0)
            rho_new = update_rho(state, problem, xi, mf)
            mid = replace(state, rho=rho_new)
            W_new = update_W(mid, problem, maj, xi * cfg.w_step_scale, mf, cfg.w_inner_iters, trust)
            if trust is not None:
                step = W_new.values - state.W.values
                if last_step is not None:
                    # shrink where the step reverses, regrow elsewhere
                    turn = np.real(np.sum(np.conj(step) * last_step, axis=(-2, -1))) < 0
                    trust = np.where(turn, np.maximum(0.5 * trust, 0.01 * cfg.w_trust),
                                     np.minimum(1.2 * trust, cfg.w_trust))
                last_step = step
            rho_T = update_terminal_rho(state, problem, xi / g.dt, mf)
            rho_vals = rho_new.values.copy()
            rho_vals[:, -1] = rho_T
            rho_new = ScalarField(g, rho_vals)

            rho_bar = 2 * rho_new.values - state.rho.values
            W_bar = 2 * W_new.values - state.W.values
            phi1, phi2, phi3 = update_duals(
                state, problem, sigma, rho_bar, W_bar, maj, mf,
                cfg.project_duals, speed, cfg.mse_dual_scale, cfg.power_dual_scale,
                cfg.dual_metric, _drift_of(problem, W_new.values, mf))
            state = SolverState(rho_new, W_new, phi1, phi2, phi3, state.rho0, it)
            maj = _majorizer(state, problem)
            rec = _record(state, problem, it, maj,
                          mean_field(problem, state.rho.values, state.W.values, state.rho0))
        except NumericalFailureError as exc:
            raise exc.with_iteration(it, tuple(trace)) from exc
        if not (math.isfinite(rec.fpk_residual) and math.isfinite(rec.hjb_residual)
                and math.isfinite(rec.cost)):
            raise NumericalFailureError("non-finite residual", iteration=it, trace=tuple(trace))
        trace.append(rec)
        if callback is not None:
            callback(state, rec)

        combined = rec.fpk_residual + rec.hjb_residual
        if combined <= cfg.tol_residual:
            converged = True
            break
        worse_streak = worse_streak + 1 if combined > prev_res else 0
        prev_res = combined
        if worse_streak >= cfg.halving_patience:
            xi *= 0.5
            sigma *= 0.5
            worse_streak = 0

    trace_t = tuple(trace)
    state = replace(state, trace=trace_t)
    return Solution(state=state, converged=converged, iterations_used=len(trace),
                    steps=(xi, sigma), trace=trace_t)
