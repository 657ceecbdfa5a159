"""Doubly exponential fixed points, their residuals, and the sojourn-time series.

Every fixed-point family here has the form ``pi_k = r(k) * b`` for a fixed
base vector ``b``; ``r(k)`` is kept both as a float and as its logarithm so
that the decay can be inspected long after the float value has underflowed.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import NumericError, PreconditionError, StructuralError, ValidationError
from .models import ModelParams, build_params, erlang_ph, poisson_map

DEFAULT_TAIL = 1e-14
MAX_LEVEL = 64


class Variant(str, enum.Enum):
    GENERAL = "GeneralClosedForm"
    POISSON_PH_FIRST = "PoissonPhFirst"
    POISSON_PH_SECOND = "PoissonPhSecond"
    MM_REDUCTION = "MmReduction"


# -- exponent helpers ---------------------------------------------------------

def power_exponent(d: int, k: int) -> float:
    """d**k as a float, +inf on overflow."""
    try:
        return float(d ** k)
    except OverflowError:
        return math.inf


def geometric_exponent(d: int, k: int) -> float:
    """(d**k - 1) / (d - 1) = 1 + d + ... + d**(k-1); equals k for d = 1."""
    if k <= 0:
        return 0.0
    if d == 1:
        return float(k)
    try:
        return float((d ** k - 1) // (d - 1))
    except OverflowError:
        return math.inf


def _pow(base: float, e: float) -> float:
    if e == 0:
        return 1.0
    if math.isinf(e):
        return 0.0 if base < 1.0 else (1.0 if base == 1.0 else math.inf)
    try:
        return base ** e
    except OverflowError:
        return math.inf


def _log_pow(base: float, e: float) -> float:
    if e == 0 or base == 1.0:
        return 0.0
    if base == 0.0:
        return -math.inf
    return e * math.log(base)


# -- fixed points -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FixedPoint:
    """Truncated fixed point ``pi_0, pi_1, ..., pi_K``.

    ``levels[k-1]`` holds ``pi_k``. ``log_sums[k-1]`` is ``log(pi_k e)``,
    finite even where the float level has underflowed to zero.
    """

    variant: Variant
    pi0: np.ndarray
    levels: list
    K: int
    tail_bound: float
    log_sums: np.ndarray
    params: ModelParams = field(repr=False)

    def level(self, k: int) -> np.ndarray:
        """Level k, computed from the closed form when k is beyond the truncation."""
        if k == 0:
            return self.pi0
        if k <= self.K:
            return self.levels[k - 1]
        return _BUILDERS[self.variant](self.params, k)[0]

    def sums(self) -> np.ndarray:
        return np.array([lv.sum() for lv in self.levels])

    def stacked(self) -> np.ndarray:
        """Levels 1..K as a (K, m) array."""
        return np.vstack(self.levels)


def _general_level(p: ModelParams, k: int):
    d = p.d
    base = np.kron(linalg.hadamard_root(p.map.gamma, d), linalg.hadamard_root(p.ph.alpha, d))
    x = p.theta * p.omega * p.rho
    dk = power_exponent(d, k)
    g = geometric_exponent(d, k)
    r = _pow(p.theta, dk) * _pow(x, g)
    log_r = _log_pow(p.theta, dk) + _log_pow(x, g)
    return r * base, log_r + math.log(base.sum())


def _mm_level(p: ModelParams, k: int):
    g = geometric_exponent(p.d, k)
    return np.array([_pow(p.rho, g)]), _log_pow(p.rho, g)


def _first_level(p: ModelParams, k: int):
    base = linalg.hadamard_root(p.ph.alpha, p.d)
    g = geometric_exponent(p.d, k)
    x = p.omega * p.rho
    return _pow(x, g) * base, _log_pow(x, g) + math.log(base.sum())


def _second_level(p: ModelParams, k: int):
    base = p.ph.tau
    g1 = geometric_exponent(p.d, k - 1)
    g = geometric_exponent(p.d, k)
    r = _pow(p.psi, g1) * _pow(p.rho, g)
    return r * base, _log_pow(p.psi, g1) + _log_pow(p.rho, g) + math.log(base.sum())


_BUILDERS = {
    Variant.GENERAL: _general_level,
    Variant.MM_REDUCTION: _mm_level,
    Variant.POISSON_PH_FIRST: _first_level,
    Variant.POISSON_PH_SECOND: _second_level,
}


def default_truncation(params: ModelParams, variant: Variant, tail: float = DEFAULT_TAIL) -> int:
    """Smallest K with pi_K e < tail, capped at MAX_LEVEL."""
    target = math.log(tail)
    for k in range(1, MAX_LEVEL + 1):
        if _BUILDERS[variant](params, k)[1] < target:
            return k
    return MAX_LEVEL


def _assemble(params: ModelParams, variant: Variant, pi0, K) -> FixedPoint:
    if K is None:
        K = default_truncation(params, variant)
    if K < 1:
        raise ValidationError(f"truncation level K must be >= 1, got {K}")
    built = [_BUILDERS[variant](params, k) for k in range(1, K + 1)]
    levels = [b[0] for b in built]
    log_sums = np.array([b[1] for b in built])
    return FixedPoint(
        variant=variant, pi0=np.asarray(pi0, dtype=float), levels=levels, K=K,
        tail_bound=float(levels[-1].sum()), log_sums=log_sums, params=params,
    )


def closed_form(params: ModelParams, K: int | None = None) -> FixedPoint:
    """General MAP/PH closed form pi_0 = theta gamma^(1/d), pi_k = r(k) gamma^(1/d) (x) alpha^(1/d)."""
    if params.m_a == 1 and params.m_b == 1:
        return _assemble(params, Variant.MM_REDUCTION, [1.0], K)
    pi0 = params.theta * linalg.hadamard_root(params.map.gamma, params.d)
    return _assemble(params, Variant.GENERAL, pi0, K)


def _require_poisson(params: ModelParams):
    if not params.is_poisson:
        raise PreconditionError(f"Poisson-PH solution needs a single-phase MAP, got order {params.m_a}")


def poisson_ph_first(params: ModelParams, K: int | None = None) -> FixedPoint:
    """pi_k = (omega rho)^((d^k-1)/(d-1)) alpha^(1/d) for Poisson arrivals."""
    _require_poisson(params)
    return _assemble(params, Variant.POISSON_PH_FIRST, [1.0], K)


def poisson_ph_second(params: ModelParams, K: int | None = None) -> FixedPoint:
    """pi_k = psi^((d^(k-1)-1)/(d-1)) rho^((d^k-1)/(d-1)) tau for Poisson arrivals."""
    _require_poisson(params)
    return _assemble(params, Variant.POISSON_PH_SECOND, [1.0], K)


def decomposition(params: ModelParams, k: int):
    """Split pi_k into an arrival factor (length m_A) and a service factor (length m_B).

    For lam > 1 the arrival factor grows like lam^{g(k)} while the service
    factor shrinks; past double range they saturate to inf and 0.
    """
    if k < 0:
        raise ValidationError(f"level must be >= 0, got {k}")
    d = params.d
    g_next = geometric_exponent(d, k + 1)
    g = geometric_exponent(d, k)
    # combined in log space so theta^g underflow cannot meet lam^g overflow
    log_scale = _log_pow(params.theta, g_next) + _log_pow(params.lam, g)
    if math.isnan(log_scale):
        # both exponents infinite; g(k+1) ~ d g(k) decides the limit
        log_scale = -math.inf if d * math.log(params.theta) + math.log(params.lam) < 0 else math.inf
    scale = math.inf if log_scale > 709.0 else math.exp(log_scale)
    arrival = scale * linalg.hadamard_root(params.map.gamma, d)
    service = _pow(params.omega / params.mu, g) * linalg.hadamard_root(params.ph.alpha, d)
    return arrival, service


# -- residuals ----------------------------------------------------------------

@dataclass
class ResidualReport:
    """Max-absolute residuals of the fixed-point equations.

    ``balance_*`` are the level-zero and level-one/level-k balance equations
    in their original form; ``transformed_*`` the same system after
    multiplication by ``-A^{-1}``; ``projected_*`` the balances multiplied by
    ``e`` (one scalar per level). ``by_level[k-1]`` is the max residual of the
    level-k balance.
    """

    normalization: float
    balance_level0: float
    balance_level1: float
    balance_upper: float
    by_level: np.ndarray
    transformed_level1: float
    transformed_upper: float
    projected_level1: float
    projected_upper: float
    projected_by_level: np.ndarray
    annihilation_W: float
    annihilation_R: float
    annihilation_pi0: float

    @property
    def balance_max(self) -> float:
        return max(self.normalization, self.balance_level0, self.balance_level1, self.balance_upper)

    @property
    def annihilation_max(self) -> float:
        return max(self.annihilation_W, self.annihilation_R, self.annihilation_pi0)


def block_operators(params: ModelParams) -> dict:
    """Kronecker blocks of the vector field and of the transformed system (R, V, W)."""
    C, D = params.map.C, params.map.D
    T, T0, alpha = params.ph.T, params.ph.T0, params.ph.alpha
    ia = np.eye(params.m_a)
    ib = np.eye(params.m_b)
    ninv = params.ph.neg_inv
    e_alpha_ninv = np.outer(np.ones(params.m_b), alpha) @ ninv
    return {
        "C_I": np.kron(C, ib),
        "D_I": np.kron(D, ib),
        "D_alpha": np.kron(D, alpha.reshape(1, -1)),
        "I_T": np.kron(ia, T),
        "I_T0": np.kron(ia, T0.reshape(-1, 1)),
        "I_T0alpha": np.kron(ia, np.outer(T0, alpha)),
        "V": np.kron(D, ninv),
        "W": np.kron(C + D, e_alpha_ninv),
        "R": np.kron(C, ninv) + np.kron(D, e_alpha_ninv),
        "D_alphaninv": np.kron(D, (alpha @ ninv).reshape(1, -1)),
    }


def balance_vectors(levels, params: ModelParams, ops: dict | None = None):
    """Left-hand sides of the fixed-point balance equations.

    ``levels`` is ``[pi_0, pi_1, ..., pi_{K+1}]``; returns the level-0 vector
    and one vector per level 1..K.
    """
    ops = ops or block_operators(params)
    d = params.d
    p = [np.asarray(x, dtype=float) for x in levels]
    out0 = p[0] ** d @ params.map.C + p[1] @ ops["I_T0"]
    rows = [p[0] ** d @ ops["D_alpha"] + p[1] ** d @ ops["C_I"] + p[1] @ ops["I_T"]
            + p[2] @ ops["I_T0alpha"]]
    for k in range(2, len(p) - 1):
        rows.append(p[k - 1] ** d @ ops["D_I"] + p[k] ** d @ ops["C_I"] + p[k] @ ops["I_T"]
                    + p[k + 1] @ ops["I_T0alpha"])
    return out0, rows


def residuals(fp: FixedPoint, params: ModelParams, K: int | None = None) -> ResidualReport:
    K = fp.K if K is None else K
    if K < 1:
        raise ValidationError("K must be >= 1")
    m_a, m = params.m_a, params.m_a * params.m_b
    if fp.pi0.size != m_a or any(fp.level(k).size != m for k in range(1, K + 1)):
        raise StructuralError(
            f"fixed point shapes do not match the model (m_A={m_a}, m_A*m_B={m})")
    d = params.d
    ops = block_operators(params)
    # level K+1 comes from the closed form, never from the truncation
    p = [fp.level(k) for k in range(0, K + 2)]
    out0, rows = balance_vectors(p, params, ops)
    by_level = np.array([np.abs(r).max() for r in rows])
    projected = np.array([abs(r.sum()) for r in rows])

    # transformed system; the infinite W-sums are truncated at level K+1
    powd = [x ** d for x in p]
    tail = [None] * (K + 3)
    tail[K + 2] = np.zeros(m)
    for j in range(K + 1, 0, -1):
        tail[j] = tail[j + 1] + powd[j] @ ops["W"]
    t1 = p[1] - (powd[0] @ ops["D_alphaninv"] + powd[1] @ ops["R"] + tail[2])
    t_upper = [p[k] - (powd[k - 1] @ ops["V"] + powd[k] @ ops["R"] + tail[k + 1])
               for k in range(2, K + 1)]

    ga = np.kron(params.map.gamma, params.ph.alpha)
    return ResidualReport(
        normalization=abs(p[0].sum() - 1.0),
        balance_level0=float(np.abs(out0).max()),
        balance_level1=float(by_level[0]),
        balance_upper=float(by_level[1:].max()) if K >= 2 else 0.0,
        by_level=by_level,
        transformed_level1=float(np.abs(t1).max()),
        transformed_upper=max((float(np.abs(t).max()) for t in t_upper), default=0.0),
        projected_level1=float(projected[0]),
        projected_upper=float(projected[1:].max()) if K >= 2 else 0.0,
        projected_by_level=projected,
        annihilation_W=float(np.abs(ga @ ops["W"]).max()),
        annihilation_R=float(np.abs(ga @ ops["R"]).max()),
        annihilation_pi0=float(np.abs(fp.pi0 ** d @ params.map.generator).max()),
    )


# -- sojourn time ---------------------------------------------------------------

def expected_sojourn(params: ModelParams, tol: float = 1e-15, max_terms: int = 100_000) -> float:
    """Mean sojourn time of a tagged arrival at the closed-form fixed point."""
    if not tol > 0:
        raise ValidationError("tol must be positive")
    d = params.d
    theta, x = params.theta, params.theta * params.omega * params.rho
    ph = params.ph
    correction = (_pow(theta, d * d) * _pow(x, d)
                  * float((ph.tau - ph.alpha) @ ph.neg_inv.sum(axis=1)))
    total = 0.0
    for k in range(max_terms):
        # exponent (d^(k+1) - d)/(d - 1) = d * (d^k - 1)/(d - 1)
        term = _pow(theta, power_exponent(d, k + 1)) * _pow(x, d * geometric_exponent(d, k))
        total += term
        if term < tol:
            break
    else:
        raise NumericError(f"sojourn series did not converge within {max_terms} terms")
    return correction + total / params.mu


def sojourn_from_levels(fp: FixedPoint, params: ModelParams) -> float:
    """Mean sojourn summed directly over the stored levels of any fixed point."""
    d = params.d
    ph = params.ph
    sums = [float((fp.pi0 ** d).sum())] + [float((lv ** d).sum()) for lv in fp.levels]
    return (ph.residual_mean - ph.mean) * sums[1] + ph.mean * sum(sums)


# -- the Erlang example ---------------------------------------------------------

@dataclass
class ErlangRow:
    k: int
    first_sum: float
    second_sum: float
    ratio: float
    log_ratio: float


def erlang_compare(m: int, d: int, lam: float, eta: float, K: int) -> list:
    """Level sums of both Poisson-PH solutions for Erlang(m, eta) service and their ratio.

    The ratio is checked against m^(d^(k-1) - 1) in log space, so it stays
    meaningful after both sums underflow.
    """
    params = build_params(poisson_map(lam), erlang_ph(m, eta), d)
    first = poisson_ph_first(params, K)
    second = poisson_ph_second(params, K)
    rows = []
    for k in range(1, K + 1):
        log_ratio = float(first.log_sums[k - 1] - second.log_sums[k - 1])
        expected = (power_exponent(d, k - 1) - 1) * math.log(m)
        if abs(log_ratio - expected) > 1e-10 * max(1.0, abs(expected)):
            raise NumericError(f"level {k}: log ratio {log_ratio} != {expected}")
        ratio = math.exp(log_ratio) if log_ratio < 709.0 else math.inf
        rows.append(ErlangRow(k, float(first.levels[k - 1].sum()),
                              float(second.levels[k - 1].sum()), ratio, log_ratio))
    return rows
