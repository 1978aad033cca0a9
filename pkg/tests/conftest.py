from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from mfg_iscc.config import GridConfig, ScenarioConfig, build_problem
from mfg_iscc.grid import MatrixField, ScalarField, make_grid
from mfg_iscc.sensing import ArrayGeometry, BeampatternSpec, build_mse_kernel
from mfg_iscc.solver import Problem, initial_state
from mfg_iscc.system import PriceParams


def small_scenario(n1: int = 8, n2: int = 8, **kw) -> ScenarioConfig:
    """Desk physics on a coarse grid."""
    return dataclasses.replace(ScenarioConfig(), grid=GridConfig(n1=n1, n2=n2), **kw)


KERNEL = build_mse_kernel(BeampatternSpec.from_targets(), ArrayGeometry())


def hand_problem(n1=2, n2=2, gram=1.0, bandwidth=1e6, sensing_bits=800.0, zeta=0.014, **price):
    g = make_grid(1.0, 0.4, n1, n2)
    grams = np.broadcast_to(gram * np.eye(2, dtype=complex), g.shape + (2, 2)).copy()
    p = dict(base_price=0.1, load_coeff=0.01, terminal_penalty=1e3, bandwidth=bandwidth, sinr_anchor=0.01)
    p.update(price)
    return Problem(grid=g, grams=grams, kernel=KERNEL, price=PriceParams(**p), n_devices=10, p_max=0.1,
                   zeta=zeta, noise_power=1e-3, sensing_rate_bits=sensing_bits, data_unit_bits=1e3,
                   rho0=np.full(n1, 1.0))


def with_fields(state, **fields):
    g = state.grid
    out = {}
    for k, v in fields.items():
        out[k] = MatrixField(g, v) if k == "W" else ScalarField(g, v)
    return dataclasses.replace(state, **out)


def zero_state(problem, **fields):
    g = problem.grid
    st0 = initial_state(problem)
    base = dict(W=np.zeros(g.shape + (2, 2), complex))
    base.update(fields)
    return with_fields(st0, **base)


@pytest.fixture(scope="session")
def problem8():
    return build_problem(small_scenario())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
