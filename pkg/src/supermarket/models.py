"""MAP arrivals, PH service times and the derived scalars of the supermarket model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from . import linalg
from .errors import NumericError, StabilityError, StructuralError, ValidationError

MAX_CHOICES = 32


@dataclass(frozen=True, eq=False)
class MapProcess:
    """Markovian arrival process with descriptor (C, D) per server unit."""

    C: np.ndarray
    D: np.ndarray
    gamma: np.ndarray
    lam: float

    @property
    def order(self) -> int:
        return self.C.shape[0]

    @property
    def generator(self) -> np.ndarray:
        return self.C + self.D

    def to_dict(self) -> dict:
        return {"C": self.C.tolist(), "D": self.D.tolist()}


@dataclass(frozen=True, eq=False)
class PhDistribution:
    """Phase-type distribution with representation (alpha, T)."""

    alpha: np.ndarray
    T: np.ndarray
    T0: np.ndarray
    mu: float
    tau: np.ndarray
    residual_mean: float
    neg_inv: np.ndarray = field(repr=False)

    @property
    def order(self) -> int:
        return self.T.shape[0]

    @property
    def mean(self) -> float:
        return 1.0 / self.mu

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "T": self.T.tolist()}


@dataclass(frozen=True, eq=False)
class ModelParams:
    map: MapProcess
    ph: PhDistribution
    d: int
    rho: float
    theta: float
    omega: float
    psi: float

    @property
    def m_a(self) -> int:
        return self.map.order

    @property
    def m_b(self) -> int:
        return self.ph.order

    @property
    def lam(self) -> float:
        return self.map.lam

    @property
    def mu(self) -> float:
        return self.ph.mu

    @property
    def is_poisson(self) -> bool:
        return self.map.order == 1

    def to_dict(self) -> dict:
        return {"map": self.map.to_dict(), "ph": self.ph.to_dict(), "d": self.d}


def build_map(C, D) -> MapProcess:
    """Validate a MAP descriptor and attach its stationary phase vector and rate.

    Raises ValidationError naming the offending entry or row when an invariant fails.
    """
    C = linalg.as_matrix(C)
    D = linalg.as_matrix(D)
    if C.shape[0] != C.shape[1] or C.shape != D.shape:
        raise StructuralError(f"C and D must be square and equal-sized, got {C.shape} and {D.shape}")
    neg = np.argwhere(D < 0)
    if neg.size:
        i, j = neg[0]
        raise ValidationError(f"D has a negative entry at ({i}, {j}): {D[i, j]}")
    m = C.shape[0]
    for i in range(m):
        if C[i, i] >= 0:
            raise ValidationError(f"C diagonal entry ({i}, {i}) must be negative, got {C[i, i]}")
        for j in range(m):
            if i != j and C[i, j] < 0:
                raise ValidationError(f"C has a negative off-diagonal entry at ({i}, {j}): {C[i, j]}")
    Q = linalg.check_generator(C + D, "C + D")
    gamma = linalg.stationary_vector(Q)
    lam = float(gamma @ D.sum(axis=1))
    if lam <= 0:
        raise ValidationError("MAP has zero arrival rate")
    return MapProcess(C=C, D=D, gamma=gamma, lam=lam)


def build_ph(alpha, T) -> PhDistribution:
    """Validate a PH representation and compute T0, mu, tau and the mean residual time."""
    alpha = linalg.as_vector(alpha)
    T = linalg.as_matrix(T)
    m = T.shape[0]
    if T.shape != (m, m) or alpha.size != m:
        raise StructuralError(f"alpha of length {alpha.size} does not conform with T of shape {T.shape}")
    bad = np.flatnonzero(alpha < 0)
    if bad.size:
        raise ValidationError(f"alpha has a negative entry at {bad[0]}: {alpha[bad[0]]}")
    if abs(alpha.sum() - 1.0) > linalg.STRUCT_TOL:
        raise ValidationError(f"alpha sums to {alpha.sum()}, not 1")
    for i in range(m):
        if T[i, i] >= 0:
            raise ValidationError(f"T diagonal entry ({i}, {i}) must be negative, got {T[i, i]}")
        for j in range(m):
            if i != j and T[i, j] < 0:
                raise ValidationError(f"T has a negative off-diagonal entry at ({i}, {j}): {T[i, j]}")
    T0 = -T.sum(axis=1)
    scale = max(1.0, float(np.abs(T).max()))
    bad = np.flatnonzero(T0 < -linalg.STRUCT_TOL * scale)
    if bad.size:
        raise ValidationError(f"T row {bad[0]} has positive sum; exit rate {T0[bad[0]]} < 0")
    T0 = np.where(T0 < 0, 0.0, T0)
    if not np.any(T0 > linalg.STRUCT_TOL * scale):
        raise ValidationError("exit vector T0 = -Te is identically zero")
    neg_inv = linalg.neg_inverse(T)
    mean = float(alpha @ neg_inv.sum(axis=1))
    if not mean > 0 or not np.isfinite(mean):
        raise NumericError("PH mean is not a positive finite number")
    embedded = T + np.outer(T0, alpha)
    if not linalg.is_irreducible(embedded):
        raise StructuralError("T + T0 alpha is reducible")
    tau = linalg.stationary_vector(embedded)
    residual_mean = float(tau @ neg_inv.sum(axis=1))
    return PhDistribution(
        alpha=alpha, T=T, T0=T0, mu=1.0 / mean, tau=tau,
        residual_mean=residual_mean, neg_inv=neg_inv,
    )


def build_params(map_: MapProcess, ph: PhDistribution, d: int) -> ModelParams:
    if int(d) != d or d < 1:
        raise ValidationError(f"choice count d must be a positive integer, got {d}")
    d = int(d)
    if d > MAX_CHOICES:
        raise ValidationError(f"choice count d is capped at {MAX_CHOICES}, got {d}")
    rho = map_.lam / ph.mu
    if not rho < 1.0:
        raise StabilityError(f"rho = lambda/mu = {rho:.6g} is not below 1")
    # theta and omega land in (0, 1]; exactly 1 for single-phase vectors
    theta = 1.0 / linalg.hadamard_root(map_.gamma, d).sum()
    omega = 1.0 / linalg.hadamard_root(ph.alpha, d).sum()
    psi = float(linalg.hadamard_power(ph.tau, d).sum())
    return ModelParams(map=map_, ph=ph, d=d, rho=rho, theta=float(theta), omega=float(omega), psi=psi)


# -- convenience constructors -------------------------------------------------

def poisson_map(lam: float) -> MapProcess:
    return build_map([[-lam]], [[lam]])


def exponential_ph(mu: float) -> PhDistribution:
    return build_ph([1.0], [[-mu]])


def erlang_ph(m: int, eta: float) -> PhDistribution:
    """m-phase Erlang with per-phase rate eta (mean m / eta)."""
    T = -eta * np.eye(m) + eta * np.eye(m, k=1)
    alpha = np.zeros(m)
    alpha[0] = 1.0
    return build_ph(alpha, T)


EXAMPLE_C = [[-10.0, 7.0], [4.0, -9.0]]
EXAMPLE_D = [[1.0, 2.0], [3.0, 2.0]]


def example_map() -> MapProcess:
    """The two-phase MAP used for the sojourn-time-versus-d example."""
    return build_map(EXAMPLE_C, EXAMPLE_D)


def mm_params(rho: float, d: int, mu: float = 1.0) -> ModelParams:
    """Poisson arrivals at rate rho * mu, exponential service at rate mu."""
    return build_params(poisson_map(rho * mu), exponential_ph(mu), d)


def params_from_dict(data: Mapping[str, Any]) -> ModelParams:
    """Build a model from the JSON schema ``{"map": {"C", "D"}, "ph": {"alpha", "T"}, "d"}``."""
    try:
        m = data["map"]
        p = data["ph"]
        d = data["d"]
        C, D = m["C"], m["D"]
        alpha, T = p["alpha"], p["T"]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"model is missing key {exc}") from exc
    return build_params(build_map(C, D), build_ph(alpha, T), d)
