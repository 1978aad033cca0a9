"""Experiment orchestration: single runs, parameter sweeps, metrics and export.

Everything here is deterministic given ``(scenario, solver config, seed)``:
exports of two identical runs are byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import ScenarioConfig, build_problem, scenario_from_dict, solver_config_from_dict
from .errors import InvalidArgumentError, NumericalFailureError
from .grid import MatrixField, ScalarField
from .solver import Problem, Solution, SolverConfig, SolverState, TraceRecord, mean_field, \
    node_powers, objective, rate_field, solve

__all__ = [
    "Metrics",
    "RunReport",
    "SweepRow",
    "TRACE_COLUMNS",
    "SWEEP_COLUMNS",
    "compute_metrics",
    "state_from_fields",
    "run_experiment",
    "sweep",
    "export",
    "load_report",
]

TRACE_COLUMNS = ("iter", "cost", "fpk_residual", "hjb_residual")
SWEEP_COLUMNS = ("param", "value", "energy", "compute_cost", "total_cost", "avg_sum_rate",
                 "terminal_mean_queue", "converged", "iterations")
EVOLUTION_COLUMNS = ("t", "q", "rho")


@dataclass(frozen=True)
class Metrics:
    """Population-average figures of merit of one solved scenario.

    ``energy`` and ``compute_cost`` are the running costs, ``total_cost``
    adds the terminal penalty.  ``avg_sum_rate`` is in bit/s and
    ``terminal_mean_queue`` in bits.
    """

    energy: float
    compute_cost: float
    total_cost: float
    avg_sum_rate: float
    terminal_mean_queue: float


def compute_metrics(state: SolverState | Solution, problem: Problem) -> Metrics:
    """Evaluate :class:`Metrics` on the grid with the solver's quadrature."""
    if isinstance(state, Solution):
        state = state.state
    g = problem.grid
    mf = mean_field(problem, state.rho.values, state.W.values, state.rho0)
    parts = objective(state, problem, mf)
    _, s_c = node_powers(state.W.values, problem.grams)
    R = rate_field(problem, s_c, mf.denom)
    rate = float(np.sum(R * state.rho.values)) * g.cell_volume / g.horizon_T
    mean_q = float(np.sum(g.q * state.rho_terminal)) * g.dq
    return Metrics(
        energy=parts["energy"],
        compute_cost=parts["compute_cost"],
        total_cost=parts["total"],
        avg_sum_rate=rate * problem.data_unit_bits,
        terminal_mean_queue=mean_q * problem.data_unit_bits,
    )


@dataclass(frozen=True, eq=False)
class RunReport:
    """Everything one run produced, in JSON-ready form.

    ``snapshots`` holds ``{"t": time, "rho": [...]}`` entries for the requested
    times.  ``fields`` (optional) holds the full final state so that the
    metrics can be recomputed with :func:`state_from_fields`.
    """

    scenario: dict
    solver: dict
    seed: int
    metrics: Metrics
    converged: bool
    iterations: int
    trace: tuple[TraceRecord, ...] = ()
    snapshots: tuple[dict, ...] = ()
    fields: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "scenario": self.scenario,
            "solver": self.solver,
            "seed": self.seed,
            "metrics": dataclasses.asdict(self.metrics),
            "converged": self.converged,
            "iterations": self.iterations,
            "trace": [dataclasses.asdict(r) for r in self.trace],
            "snapshots": [dict(s) for s in self.snapshots],
        }
        if self.fields is not None:
            out["fields"] = self.fields
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        return cls(
            scenario=data["scenario"],
            solver=data["solver"],
            seed=int(data["seed"]),
            metrics=Metrics(**{k: _num(v) for k, v in data["metrics"].items()}),
            converged=bool(data["converged"]),
            iterations=int(data["iterations"]),
            trace=tuple(TraceRecord(**{k: _num(v) if k != "iter" else int(v) for k, v in r.items()})
                        for r in data["trace"]),
            snapshots=tuple(data.get("snapshots", ())),
            fields=data.get("fields"),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, RunReport):
            return NotImplemented
        return _canonical(self.to_dict()) == _canonical(other.to_dict())


@dataclass(frozen=True)
class SweepRow:
    param: str
    value: float
    metrics: Metrics | None
    converged: bool
    iterations: int
    error: str | None = None


def _num(v) -> float:
    return math.nan if v is None else float(v)


def _canonical(obj):
    # JSON text identity is the structural equality used for reports
    return json.dumps(_jsonable(obj), sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# ---------------------------------------------------------------------------
# runs


def _slice_at(state: SolverState, t: float) -> np.ndarray:
    g = state.grid
    if not 0.0 <= t <= g.horizon_T * (1 + 1e-12):
        raise InvalidArgumentError(f"snapshot time {t} outside [0, {g.horizon_T}]")
    j = int(round(t / g.dt))
    return state.rho0 if j == 0 else state.rho.values[:, j - 1]


def state_from_fields(fields: dict, problem: Problem) -> SolverState:
    """Rebuild the primal part of a final state from ``RunReport.fields``."""
    g = problem.grid
    W = np.asarray(fields["W_real"], dtype=float) + 1j * np.asarray(fields["W_imag"], dtype=float)
    zeros = ScalarField(g, np.zeros(g.shape))
    return SolverState(rho=ScalarField(g, np.asarray(fields["rho"], dtype=float)),
                       W=MatrixField(g, W), phi1=zeros, phi2=zeros, phi3=zeros,
                       rho0=np.asarray(fields["rho0"], dtype=float))


def run_experiment(scenario: ScenarioConfig, solver_cfg: SolverConfig, seed: int = 0,
                   snapshot_times: Sequence[float] = (), include_fields: bool = False) -> RunReport:
    """Build, solve and summarize one scenario.

    Raises
    ------
    NumericalFailureError
        Propagated from the solver; its ``trace`` holds the completed iterations.
    """
    problem = build_problem(scenario)
    sol = solve(problem, solver_cfg, seed)
    st = sol.state
    snaps = tuple({"t": float(t), "rho": _slice_at(st, float(t)).tolist()} for t in snapshot_times)
    fields = None
    if include_fields:
        fields = {"rho0": st.rho0.tolist(), "rho": st.rho.values.tolist(),
                  "W_real": st.W.values.real.tolist(), "W_imag": st.W.values.imag.tolist()}
    return RunReport(
        scenario=scenario.to_dict(),
        solver=dataclasses.asdict(solver_cfg),
        seed=int(seed),
        metrics=compute_metrics(sol, problem),
        converged=sol.converged,
        iterations=sol.iterations_used,
        trace=sol.trace,
        snapshots=snaps,
        fields=fields,
    )


def _sweep_row(args) -> SweepRow:
    base, param, value, solver_cfg, seed = args
    try:
        report = run_experiment(base.with_param(param, value), solver_cfg, seed)
    except (NumericalFailureError, InvalidArgumentError) as exc:
        return SweepRow(param, float(value), None, False, getattr(exc, "iteration", None) or 0, str(exc))
    return SweepRow(param, float(value), report.metrics, report.converged, report.iterations)


def sweep(base: ScenarioConfig, param: str, values: Sequence[float], solver_cfg: SolverConfig,
          seed: int = 0, workers: int = 1) -> list[SweepRow]:
    """One independent run per value of ``param``; failures are recorded per row.

    ``workers > 1`` runs rows in separate processes.  Rows come back in the
    order of ``values`` either way.
    """
    values = list(values)
    if not values:
        raise InvalidArgumentError("sweep needs at least one value")
    base.with_param(param, values[0])   # validates the parameter name early
    jobs = [(base, param, v, solver_cfg, seed) for v in values]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_row, jobs))
    return [_sweep_row(j) for j in jobs]


# ---------------------------------------------------------------------------
# export


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return "" if v is None else str(v)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _sweep_rows(table: Sequence[SweepRow]) -> list[list]:
    rows = []
    for r in table:
        m = r.metrics
        nums = [None] * 5 if m is None else [m.energy, m.compute_cost, m.total_cost,
                                             m.avg_sum_rate, m.terminal_mean_queue]
        rows.append([r.param, r.value, *nums, r.converged, r.iterations])
    return rows


def _evolution_rows(report: RunReport, q: np.ndarray) -> list[list]:
    return [[s["t"], qk, rk] for s in report.snapshots for qk, rk in zip(q, s["rho"])]


def render(obj, fmt: str, what: str = "trace") -> str:
    """Text of an export; see :func:`export`."""
    if fmt not in ("csv", "json"):
        raise InvalidArgumentError(f"format must be 'csv' or 'json', got {fmt!r}")
    if isinstance(obj, RunReport):
        if fmt == "json":
            return json.dumps(_jsonable(obj.to_dict()), indent=1, allow_nan=False) + "\n"
        if what == "evolution":
            grid = scenario_from_dict(obj.scenario).grid.build()
            return _csv_text(EVOLUTION_COLUMNS, _evolution_rows(obj, grid.q))
        return _csv_text(TRACE_COLUMNS, [[r.iter, r.cost, r.fpk_residual, r.hjb_residual]
                                         for r in obj.trace])
    table = list(obj)
    if not all(isinstance(r, SweepRow) for r in table):
        raise InvalidArgumentError("export expects a RunReport or a list of SweepRow")
    if fmt == "json":
        data = [{"param": r.param, "value": r.value,
                 "metrics": None if r.metrics is None else dataclasses.asdict(r.metrics),
                 "converged": r.converged, "iterations": r.iterations, "error": r.error}
                for r in table]
        return json.dumps(_jsonable(data), indent=1, allow_nan=False) + "\n"
    return _csv_text(SWEEP_COLUMNS, _sweep_rows(table))


def export(obj, path, fmt: str = "csv", what: str = "trace") -> Path:
    """Write a report or sweep table.

    CSV of a :class:`RunReport` is its trace (``iter,cost,fpk_residual,
    hjb_residual``), or with ``what="evolution"`` its density snapshots in
    long form (``t,q,rho``).  CSV of a sweep has one row per value.  Numbers
    are written with 17 significant digits, so they round-trip exactly.
    JSON mirrors the report with a fixed key order; non-finite numbers become
    ``null``.
    """
    text = render(obj, fmt, what)
    p = Path(path)
    try:
        p.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {p}: {exc.strerror or exc}") from exc
    return p


def load_report(path) -> RunReport:
    """Read a JSON report written by :func:`export`."""
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"cannot read {p}: {exc.strerror or exc}") from exc
    return RunReport.from_dict(data)


def solver_config_of(report: RunReport) -> SolverConfig:
    """The solver configuration echoed in a report."""
    return solver_config_from_dict(report.solver)
