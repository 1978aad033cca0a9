"""Communication and computation model in mean-field form.

Rates returned by :func:`rate_exact` / :func:`rate_linear` are in bits per
second.  The solver divides them by the scenario's data unit so that queue
lengths, prices and penalties are all expressed per data unit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .grid import GridSpec, MatrixField, ScalarField, integrate_state

__all__ = [
    "ChannelModel",
    "SensingDataParams",
    "PriceParams",
    "sample_channel",
    "channel_grams",
    "received_power",
    "mean_interference",
    "sinr",
    "rate_exact",
    "rate_linear",
    "sensing_rate",
    "unit_price_finite",
    "unit_price_mf",
    "drift",
]

LN2 = math.log(2.0)


@dataclass(frozen=True)
class ChannelModel:
    seed: int = 0
    m_antennas: int = 16
    k_antennas: int = 2
    pathloss_db: float = 100.0
    noise_power_c: float = 1e-11

    @property
    def pathloss_gain(self) -> float:
        return 10.0 ** (-self.pathloss_db / 10.0)


@dataclass(frozen=True)
class SensingDataParams:
    redundancy: float = 1.0
    beam_switch_speed: float = 1.0
    n_quantized_angles: int = 1
    sampling_freq: float = 1.0
    bits_per_sample: float = 1.0

    def __post_init__(self):
        if not self.redundancy >= 1.0:
            raise InvalidArgumentError("redundancy must be >= 1")
        for name in ("beam_switch_speed", "n_quantized_angles", "sampling_freq", "bits_per_sample"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")


@dataclass(frozen=True)
class PriceParams:
    base_price: float = 0.1
    load_coeff: float = 0.01
    weight_energy: float = 1.0
    weight_compute: float = 1.0
    terminal_penalty: float = 1e3
    bandwidth: float = 1e6
    sinr_anchor: float = 10.0

    def __post_init__(self):
        for name in ("base_price", "load_coeff", "weight_energy", "weight_compute",
                     "terminal_penalty", "sinr_anchor"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if not self.bandwidth >= 0:
            raise InvalidArgumentError("bandwidth must be non-negative")


def sample_channel(model: ChannelModel, state_index: int, time_index: int) -> np.ndarray:
    """Deterministic ``M x K`` complex Gaussian channel for one grid node.

    Entries are circularly-symmetric with variance equal to the path-loss gain.
    The draw depends only on ``(seed, state_index, time_index)``.
    """
    if state_index < 0 or time_index < 0:
        raise InvalidArgumentError("channel indices must be non-negative")
    rng = np.random.default_rng([int(model.seed), int(state_index), int(time_index)])
    shape = (model.m_antennas, model.k_antennas)
    z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return z * math.sqrt(model.pathloss_gain / 2.0)


def channel_grams(model: ChannelModel, grid: GridSpec) -> np.ndarray:
    """``H^H H`` for every node, shape ``(n1, n2, K, K)``.

    Only the Gram matrix enters the model (through ``||H w||^2`` and
    ``H^H H w``), so the solver caches it once instead of the channels.
    """
    out = np.empty((grid.n1, grid.n2, model.k_antennas, model.k_antennas), dtype=complex)
    for i in range(grid.n1):
        for j in range(grid.n2):
            H = sample_channel(model, i, j)
            out[i, j] = H.conj().T @ H
    return out


def received_power(w: np.ndarray, gram: np.ndarray) -> np.ndarray:
    """``||H w||^2 = w^H (H^H H) w`` with broadcasting over leading axes."""
    return np.real(np.einsum("...k,...kl,...l->...", w.conj(), gram, w))


def mean_interference(rho: ScalarField, W: MatrixField, grams: np.ndarray | ChannelModel,
                      n_devices: int, j: int) -> float:
    """Mean-field interference power at time slice ``j``.

    ``N * sum_k (||H w_c||^2 + ||H w_r||^2) rho[k, j] dq``.  ``grams`` is the
    output of :func:`channel_grams` or the :class:`ChannelModel` to draw it from.
    """
    if np.any(rho.values[:, j] < -1e-12):
        raise InvalidArgumentError("density has negative entries")
    if isinstance(grams, ChannelModel):
        grams = channel_grams(grams, rho.grid)
    Wv = W.values[:, j]
    g = grams[:, j]
    power = received_power(Wv[..., 0], g) + received_power(Wv[..., 1], g)
    field = np.zeros(rho.grid.shape)
    field[:, j] = power * rho.values[:, j]
    return n_devices * integrate_state(field, j, rho.grid)


def sinr(W_node: np.ndarray, H: np.ndarray, interference: float, sigma_c2: float) -> float:
    """``||H w_c||^2 / (interference + sigma_c2)``."""
    if not sigma_c2 > 0:
        raise InvalidArgumentError("noise power must be positive")
    hw = H @ np.asarray(W_node)[:, 1]
    return float(np.real(np.vdot(hw, hw)) / (interference + sigma_c2))


def rate_exact(chi, bandwidth: float):
    """Shannon rate ``B log2(1 + chi)``."""
    return bandwidth * np.log1p(chi) / LN2


def rate_linear(chi, bandwidth: float, x0: float):
    """First-order expansion of :func:`rate_exact` around ``chi = x0``."""
    if not x0 > 0:
        raise InvalidArgumentError("sinr anchor must be positive")
    return bandwidth * (math.log2(1.0 + x0) + (np.asarray(chi) - x0) / (LN2 * (1.0 + x0)))


def sensing_rate(params: SensingDataParams) -> float:
    """Sensing data generation rate ``redundancy * nu * N_theta * f_s * b``."""
    return (params.redundancy * params.beam_switch_speed * params.n_quantized_angles
            * params.sampling_freq * params.bits_per_sample)


def unit_price_finite(n_devices: int, rates, i: int, params: PriceParams) -> float:
    """Finite-population unit price seen by device ``i``."""
    rates = np.asarray(rates, dtype=float)
    if rates.size == 0:
        raise InvalidArgumentError("rates must be non-empty")
    if n_devices < 1 or rates.size != n_devices:
        raise InvalidArgumentError("rates must have one entry per device")
    if n_devices == 1:
        return params.base_price
    others = rates.sum() - rates[i]
    return params.base_price + params.load_coeff * others / (n_devices - 1)


def unit_price_mf(rho: ScalarField, R: ScalarField, j: int, params: PriceParams) -> float:
    """Mean-field unit price ``kappa + varrho * integral R rho dq`` at slice ``j``."""
    return params.base_price + params.load_coeff * integrate_state(rho.values * R.values, j, rho.grid)


def drift(R_lin, D):
    """Queue drift ``D - R_lin``."""
    return np.asarray(D) - np.asarray(R_lin)
