"""Scenario configuration: TOML ingestion, validation and problem assembly.

A scenario file is TOML with a few top-level scalars and one table per
component::

    device_count = 100
    p_max = 0.1
    zeta = 0.014

    [grid]
    q_max = 1.0
    horizon_T = 0.4
    n1 = 64
    n2 = 64

Every key is optional except that the values must validate; omitted keys take
the desk defaults below.  Unknown keys are rejected in strict mode (the
default) with a :class:`~mfg_iscc.errors.ConfigError` naming the dotted key.
An optional ``[solver]`` table holds :class:`~mfg_iscc.solver.SolverConfig`
overrides.

Queue lengths (``grid.q_max``) are in data units of ``data_unit_bits`` bits;
prices and the terminal penalty are per data unit.
"""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, InvalidArgumentError
from .grid import GridSpec, make_grid
from .sensing import ArrayGeometry, BeampatternSpec, build_mse_kernel
from .solver import Problem, SolverConfig
from .system import ChannelModel, PriceParams, SensingDataParams, channel_grams, sensing_rate

__all__ = [
    "ScenarioConfig",
    "RHO0_PRESETS",
    "load_scenario",
    "load_solver_config",
    "scenario_from_dict",
    "solver_config_from_dict",
    "build_problem",
    "initial_density",
    "SWEEP_PARAMS",
]

RHO0_PRESETS = ("uniform", "low", "high", "gaussian")
SWEEP_PARAMS = ("device_count", "horizon_T", "zeta")


@dataclass(frozen=True)
class BeampatternConfig:
    targets_deg: tuple[float, ...] = (-40.0, 0.0, 40.0)
    width_deg: float = 10.0
    resolution_deg: float = 1.0

    def build(self) -> BeampatternSpec:
        return BeampatternSpec.from_targets(self.targets_deg, self.width_deg, self.resolution_deg)


@dataclass(frozen=True)
class ChannelConfig:
    seed: int = 1
    pathloss_db: float = 90.0
    noise_power_dbm: float = -80.0

    @property
    def noise_power_w(self) -> float:
        return 10.0 ** ((self.noise_power_dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class GridConfig:
    q_max: float = 1.0
    horizon_T: float = 0.4
    n1: int = 64
    n2: int = 64

    def build(self) -> GridSpec:
        return make_grid(self.q_max, self.horizon_T, self.n1, self.n2)


def _desk_sensing() -> SensingDataParams:
    # 1 x 10 beams/s x 4 angles x 20 samples/s x 1 bit = 800 bit/s
    return SensingDataParams(redundancy=1.0, beam_switch_speed=10.0, n_quantized_angles=4,
                             sampling_freq=20.0, bits_per_sample=1.0)


def _desk_price() -> PriceParams:
    return PriceParams(base_price=0.1, load_coeff=0.01, weight_energy=1.0, weight_compute=1.0,
                       terminal_penalty=1e3, bandwidth=1e6, sinr_anchor=0.01)


@dataclass(frozen=True)
class ScenarioConfig:
    """One fully specified experiment (everything except solver controls)."""

    device_count: int = 100
    array: ArrayGeometry = field(default_factory=ArrayGeometry)
    bs_antennas: int = 16
    beampattern: BeampatternConfig = field(default_factory=BeampatternConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    sensing_data: SensingDataParams = field(default_factory=_desk_sensing)
    price: PriceParams = field(default_factory=_desk_price)
    p_max: float = 0.1
    zeta: float = 0.014
    grid: GridConfig = field(default_factory=GridConfig)
    rho0: str = "uniform"
    data_unit_bits: float = 7700.0

    def __post_init__(self):
        _check_int("device_count", self.device_count, 1)
        _check_int("bs_antennas", self.bs_antennas, 1)
        for name in ("p_max", "zeta", "data_unit_bits"):
            v = getattr(self, name)
            if not (_is_number(v) and math.isfinite(v) and v > 0):
                raise ConfigError(name, f"must be a positive finite number, got {v!r}")
        if self.rho0 not in RHO0_PRESETS:
            raise ConfigError("rho0", f"must be one of {', '.join(RHO0_PRESETS)}, got {self.rho0!r}")
        try:
            self.grid.build()
        except InvalidArgumentError as exc:
            raise ConfigError("grid", str(exc)) from exc
        try:
            self.beampattern.build()
        except (InvalidArgumentError, ValueError) as exc:
            raise ConfigError("beampattern", str(exc)) from exc
        _check_int("channel.seed", self.channel.seed, 0)

    @property
    def channel_model(self) -> ChannelModel:
        return ChannelModel(seed=self.channel.seed, m_antennas=self.bs_antennas,
                            k_antennas=self.array.k_antennas, pathloss_db=self.channel.pathloss_db,
                            noise_power_c=self.channel.noise_power_w)

    def to_dict(self) -> dict:
        """Plain nested dict in file layout (round-trips through :func:`scenario_from_dict`)."""
        out = dataclasses.asdict(self)
        out["beampattern"]["targets_deg"] = list(self.beampattern.targets_deg)
        return out

    def with_param(self, param: str, value) -> "ScenarioConfig":
        """Copy with one sweep parameter replaced."""
        if param == "device_count":
            return dataclasses.replace(self, device_count=_as_int("device_count", value))
        if param == "zeta":
            return dataclasses.replace(self, zeta=float(value))
        if param == "horizon_T":
            return dataclasses.replace(self, grid=dataclasses.replace(self.grid, horizon_T=float(value)))
        raise ConfigError("param", f"must be one of {', '.join(SWEEP_PARAMS)}, got {param!r}")


def _is_number(v) -> bool:
    return isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)


def _as_int(key: str, v) -> int:
    if isinstance(v, bool) or not _is_number(v) or int(v) != v:
        raise ConfigError(key, f"must be an integer, got {v!r}")
    return int(v)


def _check_int(key: str, v, lo: int) -> None:
    if _as_int(key, v) < lo:
        raise ConfigError(key, f"must be >= {lo}, got {v!r}")


# ---------------------------------------------------------------------------
# dict -> dataclass with strict keys

_SECTIONS = {
    "array": ArrayGeometry,
    "beampattern": BeampatternConfig,
    "channel": ChannelConfig,
    "sensing_data": SensingDataParams,
    "price": PriceParams,
    "grid": GridConfig,
}


def _build_section(name: str, cls, data: Any, strict: bool, default):
    if not isinstance(data, dict):
        raise ConfigError(name, "must be a table")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown and strict:
        raise ConfigError(f"{name}.{unknown[0]}", "unknown key")
    kwargs = {k: v for k, v in data.items() if k in known}
    for k, v in kwargs.items():
        if isinstance(v, list):
            kwargs[k] = tuple(v)
    try:
        return dataclasses.replace(default, **kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{name}.{exc.key}", str(exc).split(": ", 1)[-1]) from exc
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        msg = str(exc)
        bad = next((k for k in sorted(kwargs, key=len, reverse=True) if msg.startswith(k)), None)
        raise ConfigError(f"{name}.{bad}" if bad else name, msg) from exc


def scenario_from_dict(data: dict, strict: bool = True) -> ScenarioConfig:
    """Validate a parsed scenario mapping (the optional ``solver`` table is ignored)."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "scenario must be a table")
    base = ScenarioConfig()
    top = {f.name for f in dataclasses.fields(ScenarioConfig)}
    unknown = sorted(set(data) - top - {"solver"})
    if unknown and strict:
        raise ConfigError(unknown[0], "unknown key")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key not in top:
            continue
        if key in _SECTIONS:
            kwargs[key] = _build_section(key, _SECTIONS[key], value, strict, getattr(base, key))
        else:
            kwargs[key] = value
    try:
        return dataclasses.replace(base, **kwargs)
    except ConfigError:
        raise
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        raise ConfigError("<root>", str(exc)) from exc


def solver_config_from_dict(data: dict, strict: bool = True) -> SolverConfig:
    """Build a :class:`SolverConfig` from the ``[solver]`` table."""
    if not isinstance(data, dict):
        raise ConfigError("solver", "must be a table")
    known = {f.name for f in dataclasses.fields(SolverConfig)}
    unknown = sorted(set(data) - known)
    if unknown and strict:
        raise ConfigError(f"solver.{unknown[0]}", "unknown key")
    kwargs = {k: v for k, v in data.items() if k in known}
    try:
        return SolverConfig(**kwargs)
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        msg = str(exc)
        bad = next((k for k in sorted(kwargs, key=len, reverse=True) if k in msg), None)
        raise ConfigError(f"solver.{bad}" if bad else "solver", msg) from exc


def _read_toml(path) -> dict:
    p = Path(path)
    try:
        with p.open("rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {p}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"cannot parse {p}: {exc}") from exc


def load_scenario(path, strict: bool = True) -> ScenarioConfig:
    """Read and validate a scenario file; see the module docstring for the layout."""
    data = _read_toml(path)
    if "solver" in data:
        solver_config_from_dict(data["solver"], strict)
    return scenario_from_dict(data, strict)


def load_solver_config(path, strict: bool = True) -> SolverConfig:
    """The ``[solver]`` table of a scenario file, or defaults when absent."""
    return solver_config_from_dict(_read_toml(path).get("solver", {}), strict)


# ---------------------------------------------------------------------------
# problem assembly


def initial_density(preset: str, grid: GridSpec) -> np.ndarray:
    """Named initial queue densities, normalized to unit mass on the grid.

    ``low`` and ``high`` are exponentials with scale ``q_max / 10`` at the
    empty and full ends; ``gaussian`` is centred at ``q_max / 2`` with
    standard deviation ``q_max / 10``.
    """
    q = grid.q
    L = grid.q_max
    if preset == "uniform":
        w = np.ones_like(q)
    elif preset == "low":
        w = np.exp(-q / (0.1 * L))
    elif preset == "high":
        w = np.exp(-(L - q) / (0.1 * L))
    elif preset == "gaussian":
        w = np.exp(-0.5 * ((q - 0.5 * L) / (0.1 * L)) ** 2)
    else:
        raise ConfigError("rho0", f"must be one of {', '.join(RHO0_PRESETS)}, got {preset!r}")
    return w / (w.sum() * grid.dq)


def build_problem(scenario: ScenarioConfig) -> Problem:
    """Discretize a scenario: channels, MSE kernel, initial density."""
    grid = scenario.grid.build()
    model = scenario.channel_model
    kernel = build_mse_kernel(scenario.beampattern.build(), scenario.array)
    return Problem(
        grid=grid,
        grams=channel_grams(model, grid),
        kernel=kernel,
        price=scenario.price,
        n_devices=scenario.device_count,
        p_max=scenario.p_max,
        zeta=scenario.zeta,
        noise_power=model.noise_power_c,
        sensing_rate_bits=sensing_rate(scenario.sensing_data),
        data_unit_bits=scenario.data_unit_bits,
        rho0=initial_density(scenario.rho0, grid),
    )
