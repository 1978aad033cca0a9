"""Mean-field-game waveform precoding for large-scale crowd ISCC systems."""

from .errors import ConfigError, InvalidArgumentError, NumericalFailureError

__version__ = "0.1.0"

from .config import ScenarioConfig, build_problem, load_scenario, load_solver_config  # noqa: E402
from .harness import Metrics, RunReport, compute_metrics, export, load_report, run_experiment, sweep  # noqa: E402
from .solver import SolverConfig, solve  # noqa: E402

__all__ = [
    "ConfigError",
    "InvalidArgumentError",
    "NumericalFailureError",
    "ScenarioConfig",
    "SolverConfig",
    "Metrics",
    "RunReport",
    "build_problem",
    "load_scenario",
    "load_solver_config",
    "solve",
    "run_experiment",
    "compute_metrics",
    "sweep",
    "export",
    "load_report",
    "__version__",
]
