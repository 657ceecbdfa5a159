"""Truncated mean-field ODE for the MAP/PH supermarket model and convergence diagnostics.

State layout (flat): ``[S_0 (m_A), S_1 (m_A*m_B), ..., S_K (m_A*m_B)]`` with the
closure ``S_{K+1} = 0``. The vector field is a sum of two linear maps, one
applied to the state and one to its entrywise d-th power, so both are
assembled once as dense block matrices.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateStateError, FitError, IntegrationError, ValidationError
from .fixed_point import FixedPoint, block_operators
from .models import ModelParams

DEFAULT_STEP = 1e-3
CLAMP_TOL = 1e-9
DEGENERATE_TOL = 1e-12

LEVEL0_MODES = ("projected", "free")


@dataclass
class FractionVector:
    S0: np.ndarray
    levels: list
    t: float = 0.0

    @property
    def K(self) -> int:
        return len(self.levels)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.S0] + list(self.levels))

    @classmethod
    def from_flat(cls, x, m_a: int, K: int, t: float = 0.0) -> "FractionVector":
        x = np.asarray(x, dtype=float)
        m = (x.size - m_a) // K
        return cls(x[:m_a].copy(), [x[m_a + i * m: m_a + (i + 1) * m].copy() for i in range(K)], t)

    def level(self, k: int) -> np.ndarray:
        if k == 0:
            return self.S0
        return self.levels[k - 1] if k <= self.K else np.zeros_like(self.levels[0])


def empty_state(params: ModelParams, K: int) -> FractionVector:
    """All queues empty: S_0 = gamma, S_k = 0 for k >= 1."""
    m = params.m_a * params.m_b
    return FractionVector(params.map.gamma.copy(), [np.zeros(m) for _ in range(K)])


def state_from_fixed_point(fp: FixedPoint, K: int | None = None) -> FractionVector:
    K = fp.K if K is None else K
    return FractionVector(fp.pi0.copy(), [fp.level(k).copy() for k in range(1, K + 1)])


class VectorField:
    """Right-hand side of the mean-field system for a fixed truncation K.

    ``level0="free"`` integrates ``dS_0/dt = S_0^d C + S_1 (I (x) T0)`` as
    written, so ``S_0 e`` drifts off one whenever that expression has nonzero
    sum. ``level0="projected"`` removes the component of the level-0 rate
    along ``e`` so the constraint ``S_0 e = 1`` is kept (for a single-phase
    MAP this freezes ``S_0 = 1``).
    """

    def __init__(self, params: ModelParams, K: int, level0: str = "projected"):
        if K < 2:
            raise ValidationError(f"truncation K must be >= 2, got {K}")
        if level0 not in LEVEL0_MODES:
            raise ValidationError(f"level0 must be one of {LEVEL0_MODES}, got {level0!r}")
        self.params = params
        self.K = K
        self.level0 = level0
        self.m_a = m_a = params.m_a
        self.m = m = params.m_a * params.m_b
        self.size = n = m_a + K * m
        ops = block_operators(params)
        P = np.zeros((n, n))
        L = np.zeros((n, n))

        def blk(k):
            return slice(0, m_a) if k == 0 else slice(m_a + (k - 1) * m, m_a + k * m)

        P[blk(0), blk(0)] = params.map.C
        L[blk(1), blk(0)] = ops["I_T0"]
        P[blk(0), blk(1)] = ops["D_alpha"]
        for k in range(1, K + 1):
            if k >= 2:
                P[blk(k - 1), blk(k)] = ops["D_I"]
            P[blk(k), blk(k)] = ops["C_I"]
            L[blk(k), blk(k)] = ops["I_T"]
            if k + 1 <= K:
                L[blk(k + 1), blk(k)] = ops["I_T0alpha"]
        self.raw_power, self.raw_linear = P.copy(), L.copy()
        if level0 == "projected":
            proj = np.eye(m_a) - np.full((m_a, m_a), 1.0 / m_a)
            P[:, blk(0)] = P[:, blk(0)] @ proj
            L[:, blk(0)] = L[:, blk(0)] @ proj
        self.power_op = P
        self.linear_op = L
        self.d = params.d

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x ** self.d) @ self.power_op + x @ self.linear_op

    def raw(self, x: np.ndarray) -> np.ndarray:
        """The unprojected right-hand side, exactly as the balance equations read."""
        return (x ** self.d) @ self.raw_power + x @ self.raw_linear


def derivative(S: FractionVector, params: ModelParams) -> FractionVector:
    """Rate of change of every level, with S_{K+1} := 0 and level 0 unprojected."""
    field_ = VectorField(params, S.K, level0="free")
    return FractionVector.from_flat(field_.raw(S.flat()), params.m_a, S.K, S.t)


@dataclass
class Trajectory:
    """Snapshots of an RK4 run; ``states[i]`` is the flat state at ``times[i]``."""

    times: np.ndarray
    states: np.ndarray
    drift_log: np.ndarray
    step: float
    m_a: int
    K: int
    level0: str = "projected"
    params: ModelParams | None = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return (self.states.shape[1] - self.m_a) // self.K

    def __len__(self) -> int:
        return len(self.times)

    def snapshot(self, i: int) -> FractionVector:
        return FractionVector.from_flat(self.states[i], self.m_a, self.K, float(self.times[i]))

    @property
    def final(self) -> FractionVector:
        return self.snapshot(-1)

    def level_series(self, k: int) -> np.ndarray:
        """(n_snapshots, width) array of S_k(t)."""
        if k == 0:
            return self.states[:, :self.m_a]
        a = self.m_a + (k - 1) * self.m
        return self.states[:, a:a + self.m]

    def level_sums(self) -> np.ndarray:
        """(n_snapshots, K + 1) array of S_k(t) e for k = 0..K."""
        s0 = self.states[:, :self.m_a].sum(axis=1, keepdims=True)
        rest = self.states[:, self.m_a:].reshape(len(self.times), self.K, self.m).sum(axis=2)
        return np.hstack([s0, rest])

    def interpolate(self, t: float) -> np.ndarray:
        """Flat state at time t by linear interpolation between snapshots."""
        i = int(np.searchsorted(self.times, t))
        if i <= 0:
            return self.states[0]
        if i >= len(self.times):
            return self.states[-1]
        t0, t1 = self.times[i - 1], self.times[i]
        w = (t - t0) / (t1 - t0)
        return (1 - w) * self.states[i - 1] + w * self.states[i]


def integrate(S0: FractionVector, params: ModelParams, t_end: float, step: float = DEFAULT_STEP,
              record_every: int = 1, level0: str = "projected") -> Trajectory:
    """Classical fixed-step RK4 from ``S0`` up to ``t_end``.

    Entries that overshoot [0, 1] by less than CLAMP_TOL are clamped; a larger
    excursion raises IntegrationError carrying the offending time. The drift
    ``|S_0 e - 1|`` is logged at every snapshot and never corrected.
    """
    if not step > 0:
        raise ValidationError(f"step must be positive, got {step}")
    if t_end < 0:
        raise ValidationError(f"t_end must be >= 0, got {t_end}")
    if record_every < 1:
        raise ValidationError("record_every must be >= 1")
    f = VectorField(params, S0.K, level0=level0)
    x = S0.flat().astype(float)
    if x.size != f.size:
        raise ValidationError("initial state does not match the model dimensions")
    m_a = params.m_a
    n_steps = int(math.ceil(t_end / step - 1e-9)) if t_end > 0 else 0
    n_rec = n_steps // record_every + 1 + (1 if n_steps % record_every else 0)
    times = np.empty(n_rec)
    states = np.empty((n_rec, x.size))
    times[0] = S0.t
    states[0] = x
    rec = 1
    t = S0.t
    h = step
    for i in range(1, n_steps + 1):
        if i == n_steps:
            h = S0.t + t_end - t
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = S0.t + i * step if i < n_steps else S0.t + t_end
        lo, hi = x.min(), x.max()
        if lo < 0.0 or hi > 1.0 or not np.isfinite(lo + hi):
            if not (lo > -CLAMP_TOL and hi < 1.0 + CLAMP_TOL):
                raise IntegrationError(
                    f"state left [0, 1] at t={t:.6g} (min {lo:.3g}, max {hi:.3g})", t=t)
            np.clip(x, 0.0, 1.0, out=x)
        if i % record_every == 0 or i == n_steps:
            times[rec] = t
            states[rec] = x
            rec += 1
    times, states = times[:rec], states[:rec]
    drift = np.abs(states[:, :m_a].sum(axis=1) - 1.0)
    return Trajectory(times=times, states=states, drift_log=drift, step=step, m_a=m_a,
                      K=S0.K, level0=level0, params=params)


def check_upper_bound(traj: Trajectory, fp: FixedPoint) -> float:
    """Largest positive excess of S_k(t) over pi_k, over all snapshots and levels k >= 1."""
    worst = 0.0
    for k in range(1, traj.K + 1):
        excess = traj.level_series(k) - fp.level(k)
        worst = max(worst, float(excess.max()))
    return max(worst, 0.0)


# -- Lyapunov diagnostics -----------------------------------------------------

@dataclass
class LyapunovWeights:
    weights: np.ndarray
    delta: float
    c: np.ndarray
    d: np.ndarray


def ratio_functionals(S: FractionVector, fp: FixedPoint, params: ModelParams,
                      level0: str = "strict"):
    """Numerators and denominators behind c_k(t) and d_k(t), k = 0..K.

    Returns ``(arrival, service, gap)``: ``c_k = arrival[k] / gap[k]`` and
    ``d_k = service[k] / gap[k]``. At level 0, ``level0="entrywise"``
    replaces the gap ``(pi_0 - S_0) e``, which vanishes whenever both sum to
    one, by ``sum |pi_0 - S_0|``.
    """
    d = params.d
    De = params.map.D.sum(axis=1)
    De_e = np.kron(De, np.ones(params.m_b))
    e_T0 = np.kron(np.ones(params.m_a), params.ph.T0)
    arrival = [float(S.S0 ** d @ De)]
    service = [0.0]
    diff0 = fp.pi0 - S.S0
    gap = [float(np.abs(diff0).sum()) if level0 == "entrywise" else float(diff0.sum())]
    for k in range(1, S.K + 1):
        Sk = S.level(k)
        arrival.append(float(Sk ** d @ De_e))
        service.append(float(Sk @ e_T0))
        gap.append(float((fp.level(k) - Sk).sum()))
    return np.array(arrival), np.array(service), np.array(gap)


def lyapunov_weights(S: FractionVector, fp: FixedPoint, params: ModelParams,
                     delta: float | None = None, level0: str = "strict") -> LyapunovWeights:
    """Weights w_0..w_K of the Lyapunov function at state S.

    w_0 = 1, w_1 = 1 + delta / c_0 and
    w_{k+1} = w_k + delta w_k / c_k + (d_k / c_k)(w_k - w_{k-1}).
    """
    if level0 not in ("strict", "entrywise"):
        raise ValidationError(f"level0 must be 'strict' or 'entrywise', got {level0!r}")
    if delta is None:
        delta = 0.05 * params.mu * (1.0 - params.rho)
    if delta < 0:
        raise ValidationError("delta must be >= 0")
    arrival, service, gap = ratio_functionals(S, fp, params, level0)
    K = S.K
    c = np.full(K + 1, np.nan)
    dk = np.full(K + 1, np.nan)

    def ratios(k):
        if abs(gap[k]) < DEGENERATE_TOL:
            raise DegenerateStateError(
                f"level {k}: (pi_k - S_k) e = {gap[k]:.3g} vanishes; c_{k} and d_{k} are undefined")
        c[k] = arrival[k] / gap[k]
        dk[k] = service[k] / gap[k]
        if c[k] == 0.0:
            raise DegenerateStateError(f"level {k}: c_{k} = 0, weight recursion divides by zero")
        return c[k], dk[k]

    w = np.ones(K + 1)
    if K >= 1:
        w[1] = 1.0 + (delta / ratios(0)[0] if delta > 0 else 0.0)
    for k in range(1, K):
        jump = w[k] - w[k - 1]
        if delta == 0 and jump == 0:
            w[k + 1] = w[k]
            continue
        ck, dd = ratios(k)
        w[k + 1] = w[k] + delta * w[k] / ck + (dd / ck) * jump
    return LyapunovWeights(weights=w, delta=float(delta), c=c, d=dk)


def lyapunov_phi(S: FractionVector, fp: FixedPoint, weights=None) -> float:
    """Weighted distance sum_k w_k (pi_k - S_k) e over levels 0..K.

    Levels above K are not included; their contribution is at most
    sum_{k>K} w_k pi_k e, of the order of ``fp.tail_bound``.
    """
    K = S.K
    w = np.ones(K + 1) if weights is None else np.asarray(weights, dtype=float)
    if w.size < K + 1:
        raise ValidationError(f"need at least {K + 1} weights, got {w.size}")
    return float(sum(w[k] * (fp.level(k) - S.level(k)).sum() for k in range(K + 1)))


@dataclass
class LyapunovSeries:
    times: np.ndarray
    phi_values: np.ndarray
    weights: np.ndarray
    delta: float | None = None
    c_samples: np.ndarray | None = None
    d_samples: np.ndarray | None = None


def phi_series(traj: Trajectory, fp: FixedPoint, weights=None) -> LyapunovSeries:
    """Phi(t) at every snapshot for a fixed weight vector (unit weights by default)."""
    K = traj.K
    w = np.ones(K + 1) if weights is None else np.asarray(weights, dtype=float)
    pi_sums = np.array([fp.level(k).sum() for k in range(K + 1)])
    gaps = pi_sums[None, :] - traj.level_sums()
    return LyapunovSeries(times=traj.times.copy(), phi_values=gaps @ w[:K + 1], weights=w)


@dataclass
class DecayFit:
    rate: float
    slope: float
    intercept: float
    t_start: float
    t_stop: float
    points: int


def decay_rate(traj: Trajectory, fp: FixedPoint, weights=None) -> DecayFit:
    """Least-squares slope of log Phi(t) over the second half of the trajectory.

    The window stops at the first Phi value that is not clearly positive
    (below 1e-12 relative to the size of the fixed point).
    """
    series = phi_series(traj, fp, weights)
    phi = series.phi_values
    floor = 1e-12 * (1.0 + sum(fp.level(k).sum() for k in range(1, traj.K + 1)))
    start = len(phi) // 2
    window = phi[start:]
    bad = np.flatnonzero(~(window > floor))
    stop = start + (bad[0] if bad.size else len(window))
    if stop - start < 2:
        raise FitError("no window with positive Phi to fit a decay rate")
    t = series.times[start:stop]
    slope, intercept = np.polyfit(t, np.log(phi[start:stop]), 1)
    return DecayFit(rate=float(-slope), slope=float(slope), intercept=float(intercept),
                    t_start=float(t[0]), t_stop=float(t[-1]), points=int(stop - start))


def write_trajectory_csv(traj: Trajectory, path, every: int = 1) -> None:
    """Long-format dump: one row per (snapshot, level, block entry)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "k", "block_index", "value", "drift"])
        for i in range(0, len(traj.times), every):
            t = traj.times[i]
            drift = traj.drift_log[i]
            for k in range(traj.K + 1):
                for j, v in enumerate(traj.level_series(k)[i]):
                    w.writerow([repr(float(t)), k, j, repr(float(v)), repr(float(drift))])
