"""Built-in invariant and oracle checks behind ``mfg-iscc check``.

Each check is small (well under a second or two) and returns a
:class:`CheckResult`; :func:`run_checks` runs them all.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .config import ScenarioConfig, build_problem
from .grid import MatrixField, ScalarField, make_grid
from .sensing import (ArrayGeometry, BeampatternSpec, beampattern_mse, build_mse_kernel, majorize_field,
                      optimal_gamma, quartic_mse, surrogate_mse)
from .solver import SolverConfig, evolve, grad_W, grad_rho, initial_state, lagrangian, mean_field, \
    project_density, solve
from .system import PriceParams, unit_price_finite

__all__ = ["CheckResult", "CHECKS", "run_checks"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _random_smooth_state(problem, rng):
    g = problem.grid
    st = initial_state(problem, int(rng.integers(1 << 30)))
    qq, tt = np.meshgrid(np.linspace(0, 1, g.n1), np.linspace(0, 1, g.n2), indexing="ij")
    a = rng.uniform(-1, 1, 4)
    rho = project_density(1.0 + 0.4 * np.sin(np.pi * (a[0] * qq + a[1] * tt)), g.dq)
    phi3 = 50.0 * np.cos(np.pi * (a[2] * qq + a[3] * tt))
    return replace(st, rho=ScalarField(g, rho),
                   phi1=ScalarField(g, rng.uniform(0, 1, g.shape)),
                   phi2=ScalarField(g, rng.uniform(0, 1, g.shape)),
                   phi3=ScalarField(g, phi3))


def check_gradients(n_states: int = 5, seed: int = 0) -> CheckResult:
    """Analytic density and precoder gradients against central differences."""
    sc = ScenarioConfig(grid=replace(ScenarioConfig().grid, n1=8, n2=8))
    problem = build_problem(sc)
    g = problem.grid
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_states):
        st = _random_smooth_state(problem, rng)
        maj = majorize_field(st.W.values, problem.kernel, problem.p_max)
        mf = mean_field(problem, st.rho.values, st.W.values, st.rho0)
        gr = grad_rho(st, problem, mf).values
        gw = grad_W(st, problem, maj, mf).values
        i, j = int(rng.integers(g.n1)), int(rng.integers(g.n2 - 1))
        h = 1e-4

        def central(make):
            return (lagrangian(make(h), problem, maj, mf)
                    - lagrangian(make(-h), problem, maj, mf)) / (2 * h) / g.cell_volume

        def bump_rho(s):
            r = st.rho.values.copy()
            r[i, j] += s
            return replace(st, rho=ScalarField(g, r))

        fd = central(bump_rho)
        worst = max(worst, abs(fd - gr[i, j]) / abs(gr[i, j]))
        # whole node gradient (real and imaginary parts of every entry)
        fd_w, an_w = [], []
        for a in range(2):
            for c in range(2):
                for d in (1.0, 1j):
                    def bump_w(s, a=a, c=c, d=d):
                        W = st.W.values.copy()
                        W[i, j, a, c] += s * d
                        return replace(st, W=MatrixField(g, W))
                    fd_w.append(central(bump_w))
                    an_w.append(float(np.real(np.conj(d) * gw[i, j, a, c])))
        fd_w, an_w = np.array(fd_w), np.array(an_w)
        worst = max(worst, float(np.linalg.norm(fd_w - an_w) / np.linalg.norm(an_w)))
    return CheckResult("gradients", worst <= 1e-5, f"max relative error {worst:.2e}")


def _random_W(rng, n, p_max):
    W = rng.standard_normal((n, 2, 2)) + 1j * rng.standard_normal((n, 2, 2))
    scale = np.sqrt(rng.uniform(0, p_max, n) / np.sum(np.abs(W) ** 2, axis=(-2, -1)))
    return W * scale[:, None, None]


def check_majorization(n_pairs: int = 200, seed: int = 0) -> CheckResult:
    """Surrogate lies above the quartic MSE; B1 PSD, B2 NSD, vec identity."""
    rng = np.random.default_rng(seed)
    geom = ArrayGeometry()
    kernel = build_mse_kernel(BeampatternSpec.from_targets(), geom)
    p_max = 0.1
    Wk, W = _random_W(rng, n_pairs, p_max), _random_W(rng, n_pairs, p_max)
    maj = majorize_field(Wk, kernel, p_max)
    gap = float(np.min(surrogate_mse(W, maj) - quartic_mse(W, kernel)))
    e1 = float(np.min(np.linalg.eigvalsh(maj.B1)))
    e2 = float(np.max(np.linalg.eigvalsh(maj.B2)))
    X = Wk @ np.conj(np.swapaxes(Wk, -1, -2))
    x = np.swapaxes(X, -1, -2).reshape(n_pairs, -1)
    b = 2.0 * x @ kernel.C.T - 2.0 * kernel.lambda_max * x
    vec = maj.vec_b()
    ident = float(np.max(np.abs(vec - b)))
    ok = gap >= -1e-9 and e1 >= -1e-9 and e2 <= 1e-9 and ident <= 1e-10
    return CheckResult("majorization", ok,
                       f"min gap {gap:.2e}, min eig B1 {e1:.2e}, max eig B2 {e2:.2e}, vec error {ident:.2e}")


def check_quartic(n: int = 100, seed: int = 0) -> CheckResult:
    """Beampattern MSE at the optimal scaling equals the quartic form."""
    rng = np.random.default_rng(seed)
    geom = ArrayGeometry()
    spec = BeampatternSpec.from_targets()
    kernel = build_mse_kernel(spec, geom)
    W = _random_W(rng, n, 0.1)
    direct = beampattern_mse(optimal_gamma(W, spec, geom), W, spec, geom)
    quart = quartic_mse(W, kernel)
    rel = float(np.max(np.abs(direct - quart) / np.abs(direct)))
    return CheckResult("quartic", rel <= 1e-8, f"max relative error {rel:.2e}")


def check_transport() -> CheckResult:
    """A Gaussian bump under constant drift moves by ``c t`` and keeps its mass."""
    g = make_grid(1.0, 0.25, 200, 100)
    q = g.q
    rho0 = np.exp(-0.5 * ((q - 0.3) / 0.03) ** 2)
    rho0 /= rho0.sum() * g.dq
    c = 1.0
    rho = evolve(rho0, np.full(g.shape, c), g)
    center = float(np.sum(q * rho[:, -1]) / np.sum(rho[:, -1]))
    expected = float(np.sum(q * rho0) / np.sum(rho0)) + c * g.horizon_T
    mass = float(abs(rho[:, -1].sum() * g.dq - 1.0))
    ok = abs(center - expected) <= 1.5 * g.dq and mass <= 1e-12
    return CheckResult("transport", ok, f"centre offset {abs(center - expected) / g.dq:.3f} dq, mass error {mass:.1e}")


def check_price_limit(seed: int = 0) -> CheckResult:
    """Finite-population price with many devices approaches the mean-field price."""
    rng = np.random.default_rng(seed)
    n = 10_000
    params = PriceParams()
    rates = rng.exponential(2.0, n)
    finite = unit_price_finite(n, rates, 0, params)
    mf = params.base_price + params.load_coeff * 2.0
    rel = abs(finite - mf) / mf
    return CheckResult("price-limit", bool(rel <= 0.01), f"relative gap {rel:.2e}")


def check_mass(iters: int = 5) -> CheckResult:
    """A short solve keeps every slice at unit mass."""
    sc = ScenarioConfig(grid=replace(ScenarioConfig().grid, n1=16, n2=16))
    sol = solve(build_problem(sc), SolverConfig(max_iters=iters))
    worst = max(r.mass_error for r in sol.trace)
    return CheckResult("mass", worst <= 1e-9, f"max mass error {worst:.1e}")


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "gradients": check_gradients,
    "majorization": check_majorization,
    "quartic": check_quartic,
    "transport": check_transport,
    "price-limit": check_price_limit,
    "mass": check_mass,
}


def run_checks(names=None) -> list[CheckResult]:
    """Run the named checks (all by default) and collect their results."""
    out = []
    for name in (CHECKS if names is None else names):
        try:
            out.append(CHECKS[name]())
        except Exception as exc:  # a crashing check is a failing check
            out.append(CheckResult(name, False, f"{type(exc).__name__}: {exc}"))
    return out

