"""Radar side of the ISAC device: steering vectors, beampattern MSE and its
majorization-minimization surrogate.

Matrices are vectorized column-major throughout, ``vec(X)[m + n*K] = X[m, n]``.
Most routines accept leading batch dimensions so a whole precoder field can be
processed in one call; the single-node forms are thin wrappers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

__all__ = [
    "ArrayGeometry",
    "BeampatternSpec",
    "MseKernel",
    "Majorizer",
    "steering_vector",
    "steering_matrix",
    "ideal_beampattern",
    "beampattern_mse",
    "optimal_gamma",
    "quartic_mse",
    "build_mse_kernel",
    "majorize",
    "majorize_field",
    "surrogate_mse",
]

_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class ArrayGeometry:
    k_antennas: int = 2
    spacing_over_wavelength: float = 0.5

    def __post_init__(self):
        if int(self.k_antennas) != self.k_antennas or self.k_antennas < 1:
            raise InvalidArgumentError("k_antennas must be a positive integer")
        if not self.spacing_over_wavelength > 0:
            raise InvalidArgumentError("spacing_over_wavelength must be positive")


def ideal_beampattern(theta, target_centers, width_deg=None) -> np.ndarray | int:
    """Binary mask: 1 within ``width_deg / 2`` of any target centre, else 0.

    ``target_centers`` may also be a :class:`BeampatternSpec`, whose centres
    and width are then used.
    """
    if isinstance(target_centers, BeampatternSpec):
        target_centers, width_deg = target_centers.target_centers, target_centers.width_deg
    if width_deg is None:
        raise InvalidArgumentError("width_deg is required with explicit target centres")
    th = np.asarray(theta, dtype=float)
    centers = np.asarray(target_centers, dtype=float).reshape(-1)
    half = 0.5 * float(width_deg) + _EDGE_TOL
    inside = (np.abs(th[..., None] - centers) <= half).any(axis=-1)
    out = inside.astype(int)
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class BeampatternSpec:
    """Sampled ideal beampattern ``P_d(theta_l)`` on an angle grid (degrees)."""

    angles_deg: np.ndarray = field(repr=False)
    desired: np.ndarray = field(repr=False)
    target_centers: tuple[float, ...] = ()
    width_deg: float = 10.0

    def __post_init__(self):
        ang = np.asarray(self.angles_deg, dtype=float)
        des = np.asarray(self.desired, dtype=float)
        if ang.ndim != 1 or ang.size == 0 or des.shape != ang.shape:
            raise InvalidArgumentError("angles and desired values must be equal-length 1-D arrays")
        if np.any(np.diff(ang) <= 0):
            raise InvalidArgumentError("angles must be strictly increasing")
        if np.any(np.abs(ang) > 90.0 + _EDGE_TOL):
            raise InvalidArgumentError("angles must lie in [-90, 90] degrees")
        if np.any((des < 0) | (des > 1)):
            raise InvalidArgumentError("desired beampattern values must lie in [0, 1]")
        object.__setattr__(self, "angles_deg", ang)
        object.__setattr__(self, "desired", des)
        object.__setattr__(self, "target_centers", tuple(float(c) for c in self.target_centers))

    @classmethod
    def from_targets(cls, target_centers=(-40.0, 0.0, 40.0), width_deg: float = 10.0,
                     resolution_deg: float = 1.0) -> "BeampatternSpec":
        n = int(round(180.0 / resolution_deg))
        angles = np.linspace(-90.0, 90.0, n + 1)
        return cls(angles, ideal_beampattern(angles, target_centers, width_deg),
                   tuple(target_centers), float(width_deg))

    @property
    def n_angles(self) -> int:
        return self.angles_deg.size


def steering_matrix(angles_deg, geom: ArrayGeometry) -> np.ndarray:
    """Steering vectors for several angles stacked as rows, shape ``(L, K)``."""
    th = np.deg2rad(np.asarray(angles_deg, dtype=float))
    phase = 2.0 * np.pi * geom.spacing_over_wavelength * np.multiply.outer(
        np.sin(th), np.arange(geom.k_antennas))
    return np.exp(1j * phase)


def steering_vector(theta: float, geom: ArrayGeometry) -> np.ndarray:
    """``a_k = exp(j 2 pi (d/lambda) (k-1) sin(theta))`` for ``k = 1..K``."""
    if abs(theta) > 90.0 + _EDGE_TOL:
        raise InvalidArgumentError("theta must lie in [-90, 90] degrees")
    return steering_matrix([theta], geom)[0]


def _beam_powers(W: np.ndarray, spec: BeampatternSpec, geom: ArrayGeometry) -> np.ndarray:
    # a^H W W^H a = ||W^H a||^2 for every angle, shape (..., L)
    a = steering_matrix(spec.angles_deg, geom)
    proj = np.einsum("lk,...kc->...lc", a.conj(), W)
    return np.sum(np.abs(proj) ** 2, axis=-1)


def beampattern_mse(gamma, W: np.ndarray, spec: BeampatternSpec, geom: ArrayGeometry):
    """``(1/L) sum_l |gamma P_d(theta_l) - a^H W W^H a|^2``."""
    p = _beam_powers(np.asarray(W, dtype=complex), spec, geom)
    err = np.asarray(gamma)[..., None] * spec.desired - p
    return np.mean(err**2, axis=-1)


def optimal_gamma(W: np.ndarray, spec: BeampatternSpec, geom: ArrayGeometry):
    """Closed-form minimizer of :func:`beampattern_mse` over the scaling factor."""
    denom = float(np.sum(spec.desired**2))
    if denom <= 0.0:
        raise InvalidArgumentError("desired beampattern is identically zero")
    p = _beam_powers(np.asarray(W, dtype=complex), spec, geom)
    return p @ spec.desired / denom


def _vec(X: np.ndarray) -> np.ndarray:
    return np.swapaxes(X, -1, -2).reshape(X.shape[:-2] + (-1,))


def _unvec(x: np.ndarray, k: int) -> np.ndarray:
    return np.swapaxes(x.reshape(x.shape[:-1] + (k, k)), -1, -2)


def _gram(W: np.ndarray) -> np.ndarray:
    return W @ np.conj(np.swapaxes(W, -1, -2))


@dataclass(frozen=True, eq=False)
class MseKernel:
    """Quartic MSE kernel ``C`` and the pieces needed to majorize it cheaply.

    Besides ``C``, ``b_vectors`` and ``lambda_max`` this caches
    ``steer_gram = sum_l vec(A_l) vec(A_l)^H`` and
    ``weighted = sum_l P_d(theta_l) A_l`` so that the majorizer of a whole
    field costs O(K^4) per node rather than O(L K^2).
    """

    C: np.ndarray = field(repr=False)
    b_vectors: np.ndarray = field(repr=False)
    lambda_max: float
    steer_gram: np.ndarray = field(repr=False)
    weighted: np.ndarray = field(repr=False)
    desired_energy: float
    n_angles: int
    k_antennas: int


def build_mse_kernel(spec: BeampatternSpec, geom: ArrayGeometry) -> MseKernel:
    """Assemble ``C = (1/L) sum_l b_l b_l^H`` and its largest eigenvalue."""
    a = steering_matrix(spec.angles_deg, geom)
    A = np.einsum("lm,ln->lmn", a, a.conj())
    avec = _vec(A)                                   # (L, K^2)
    pd = spec.desired
    S = float(np.sum(pd**2))
    L = spec.n_angles
    if S > 0:
        v = pd @ avec
        b = np.outer(pd, v) / S - avec
    else:
        b = -avec
    C = np.einsum("li,lj->ij", b, b.conj()) / L
    C = 0.5 * (C + C.conj().T)
    lam = float(np.linalg.eigvalsh(C)[-1])
    return MseKernel(
        C=C,
        b_vectors=b,
        lambda_max=max(lam, 0.0),
        steer_gram=np.einsum("li,lj->ij", avec, avec.conj()),
        weighted=np.einsum("l,lmn->mn", pd, A),
        desired_energy=S,
        n_angles=L,
        k_antennas=geom.k_antennas,
    )


def quartic_mse(W: np.ndarray, kernel: MseKernel):
    """``vec^H(W W^H) C vec(W W^H)``, the MSE with the scaling factor optimized out."""
    x = _vec(_gram(np.asarray(W, dtype=complex)))
    return np.real(np.einsum("...i,ij,...j->...", x.conj(), kernel.C, x))


@dataclass(frozen=True, eq=False)
class Majorizer:
    """Convex quadratic upper bound of the quartic MSE, built at ``expansion_point``.

    All arrays may carry leading batch dimensions (one majorizer per node).
    """

    expansion_point: np.ndarray = field(repr=False)
    B1: np.ndarray = field(repr=False)
    B2: np.ndarray = field(repr=False)
    u_vectors: np.ndarray = field(repr=False)
    e2: np.ndarray | float = field(repr=False)

    def vec_b(self) -> np.ndarray:
        return _vec(self.B1 + self.B2)


def majorize_field(Wk: np.ndarray, kernel: MseKernel, p_max: float,
                   check_power: bool = True) -> Majorizer:
    """Batched :func:`majorize` over arrays of shape ``(..., K, 2)``."""
    Wk = np.asarray(Wk, dtype=complex)
    if check_power:
        power = np.sum(np.abs(Wk) ** 2, axis=(-2, -1))
        if np.any(power > p_max * (1 + 1e-9) + 1e-15):
            raise InvalidArgumentError("expansion point violates the power budget")
    K = kernel.k_antennas
    L = kernel.n_angles
    S = kernel.desired_energy
    lam = kernel.lambda_max

    X = _gram(Wk)
    x = _vec(X)
    # sum_l <a_l, x> A_l and sum_l P_l <a_l, x>, both real-weighted combinations
    B_steer = _unvec(x @ kernel.steer_gram.T, K)
    if S > 0:
        wvec = _vec(kernel.weighted)
        s_w = np.real(x @ wvec.conj())
        mask = (s_w / (L * S))[..., None, None] * kernel.weighted
    else:
        mask = np.zeros_like(B_steer)
    B1 = (2.0 / L) * B_steer + 2.0 * mask
    B2 = -4.0 * mask - 2.0 * lam * X
    B1 = 0.5 * (B1 + np.conj(np.swapaxes(B1, -1, -2)))
    B2 = 0.5 * (B2 + np.conj(np.swapaxes(B2, -1, -2)))

    U = np.conj(np.swapaxes(B2, -1, -2)) @ Wk
    xCx = np.real(np.einsum("...i,ij,...j->...", x.conj(), kernel.C, x))
    e1 = lam * np.real(np.sum(x.conj() * x, axis=-1)) - xCx
    concave_at_k = np.real(np.sum(Wk.conj() * (B2 @ Wk), axis=(-2, -1)))
    e2 = -concave_at_k + e1 + lam * p_max**2
    return Majorizer(Wk, B1, B2, U, e2)


def majorize(Wk: np.ndarray, kernel: MseKernel, p_max: float) -> Majorizer:
    """MM surrogate of the quartic MSE around a single ``K x 2`` precoder."""
    Wk = np.asarray(Wk, dtype=complex)
    if Wk.ndim != 2 or Wk.shape != (kernel.k_antennas, 2):
        raise InvalidArgumentError(f"expected a ({kernel.k_antennas}, 2) precoder")
    return majorize_field(Wk, kernel, p_max)


def surrogate_mse(W: np.ndarray, maj: Majorizer):
    """``sum_j Re{w_j^H B1 w_j + 2 w_j^H u_j} + e2``."""
    W = np.asarray(W, dtype=complex)
    quad = np.real(np.sum(W.conj() * (maj.B1 @ W), axis=(-2, -1)))
    lin = 2.0 * np.real(np.sum(W.conj() * maj.u_vectors, axis=(-2, -1)))
    return quad + lin + maj.e2
