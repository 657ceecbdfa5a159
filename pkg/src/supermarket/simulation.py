"""Finite-n supermarket simulator: global MAP arrivals, per-server PH service, JSQ(d).

The whole system is a CTMC, so events are generated by a rate race: one
exponential holding time at the total rate, then a categorical pick of the
event class. All randomness comes from a Philox (counter-based) generator
seeded per replication, so a run is a pure function of its inputs.
"""

from __future__ import annotations

import bisect
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigError, StabilityError
from .models import ModelParams

BATCHES = 20
BLOCK = 1 << 15


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def _stream(draw):
    while True:
        yield from draw(BLOCK).tolist()


@dataclass
class SimResult:
    """Time averages collected over (warmup, horizon].

    ``empirical_tails[k, i, j]`` is the time average of 1{MAP phase = i} times
    the fraction of servers holding at least k customers with service in
    phase j (k = 0 is the bare phase indicator, j = 0). ``tail_sums[k]`` sums
    over (i, j): the fraction of servers with at least k customers.
    Sojourn statistics cover the customers departing in (warmup, horizon].
    """

    n: int
    d: int
    seed: int
    horizon: float
    warmup: float
    empirical_tails: np.ndarray
    tail_sums: np.ndarray
    tail_stderr: np.ndarray
    sojourn_mean: float
    sojourn_stderr: float
    sojourn_halfwidth: float
    customers: int
    event_count: int
    arrivals: int
    departures: int
    in_system: int
    samples: np.ndarray | None = field(default=None, repr=False)
    sample_times: np.ndarray | None = field(default=None, repr=False)

    def metadata(self) -> dict:
        return {"seed": self.seed, "n": self.n, "d": self.d, "horizon": self.horizon,
                "warmup": self.warmup, "event_count": self.event_count}


def simulate(params: ModelParams, n: int, horizon: float, warmup: float = 0.0, seed: int = 0,
             with_replacement: bool = True, sample_times=None, sample_levels: int = 0,
             batches: int = BATCHES) -> SimResult:
    """Run one replication of the n-server system started empty.

    ``sample_times`` (sorted) requests snapshots of the phase-marginal
    fractions ``x(k, j)`` for k = 1..sample_levels, returned in
    ``SimResult.samples`` with shape (len(sample_times), sample_levels, m_B).
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if not warmup >= 0 or not horizon > warmup:
        raise ConfigError(f"need horizon > warmup >= 0, got horizon={horizon}, warmup={warmup}")
    if not params.rho < 1:
        raise StabilityError(f"rho = {params.rho} >= 1")
    d = params.d
    if not with_replacement and d > n:
        raise ConfigError(f"cannot sample d={d} distinct servers out of n={n}")

    rng = make_rng(seed)
    nextu = _stream(rng.random).__next__
    nexte = _stream(rng.standard_exponential).__next__

    C, D = params.map.C, params.map.D
    m_a, m_b = params.m_a, params.m_b
    T, T0, alpha = params.ph.T, params.ph.T0, params.ph.alpha

    # MAP: per-phase cumulative rates over (target, is_arrival), scaled by n
    map_rate = []
    map_cum = []
    map_evt = []
    for a in range(m_a):
        cum, evt, acc = [], [], 0.0
        for b in range(m_a):
            if b != a and C[a, b] > 0:
                acc += n * C[a, b]
                cum.append(acc)
                evt.append((b, False))
        for b in range(m_a):
            if D[a, b] > 0:
                acc += n * D[a, b]
                cum.append(acc)
                evt.append((b, True))
        map_rate.append(acc)
        map_cum.append(cum)
        map_evt.append(evt)

    # PH: per-phase outflow and cumulative choice over next phase (m_b means exit)
    out = [-T[j, j] for j in range(m_b)]
    ph_cum, ph_evt = [], []
    for j in range(m_b):
        cum, evt, acc = [], [], 0.0
        for jj in range(m_b):
            if jj != j and T[j, jj] > 0:
                acc += T[j, jj]
                cum.append(acc)
                evt.append(jj)
        if T0[j] > 0:
            acc += T0[j]
            cum.append(acc)
            evt.append(m_b)
        ph_cum.append([x / acc for x in cum])
        ph_evt.append(evt)
    alpha_cum = list(np.cumsum(alpha))
    alpha_cum[-1] = 1.0
    gamma_cum = list(np.cumsum(params.map.gamma))
    gamma_cum[-1] = 1.0
    single_start = m_b == 1

    q = [0] * n
    ph = [-1] * n
    fifo = [deque() for _ in range(n)]
    busy = [[] for _ in range(m_b)]
    pos = [0] * n

    # cnt[c] = #servers with >= k customers in service phase j, c = (k-1)*m_b + j
    cnt: list = []
    last: list = []
    area = [[] for _ in range(m_a)]
    measuring = False
    t = 0.0
    a = bisect.bisect_right(gamma_cum, nextu())
    a = min(a, m_a - 1)

    def grow(k):
        while len(cnt) < k * m_b:
            cnt.append(0)
            last.append(t)
            for row in area:
                row.append(0.0)

    def bump(c, delta):
        if measuring:
            area[a][c] += cnt[c] * (t - last[c])
            last[c] = t
        cnt[c] += delta

    def flush_all(until):
        for c in range(len(cnt)):
            area[a][c] += cnt[c] * (until - last[c])
            last[c] = until

    span = horizon - warmup
    bounds = [warmup + span * (b + 1) / batches for b in range(batches)]
    bounds[-1] = horizon
    batch_area = []
    batch_phase_time = []
    phase_time = [0.0] * m_a
    phase_since = warmup
    bi = 0

    soj_sum = [0.0] * batches
    soj_cnt = [0] * batches
    arrivals = departures = events = 0

    if sample_times is not None:
        sample_times = np.asarray(sample_times, dtype=float)
        samples = np.zeros((len(sample_times), sample_levels, m_b))
        si = 0
        ns = len(sample_times)
    else:
        ns = si = 0
        samples = None

    width = sample_levels * m_b
    while True:
        svc = 0.0
        for j in range(m_b):
            svc += len(busy[j]) * out[j]
        total = map_rate[a] + svc
        t_next = t + nexte() / total
        while si < ns and sample_times[si] <= min(t_next, horizon):
            lim = min(len(cnt), width)
            row = samples[si].reshape(-1)
            row[:lim] = np.asarray(cnt[:lim], dtype=float) / n
            si += 1
        if not measuring and t_next > warmup:
            measuring = True
            for c in range(len(cnt)):
                last[c] = warmup
            phase_since = warmup
        while bi < batches and t_next > bounds[bi]:
            flush_all(bounds[bi])
            batch_area.append([row[:] for row in area])
            phase_time[a] += bounds[bi] - phase_since
            phase_since = bounds[bi]
            batch_phase_time.append(phase_time[:])
            bi += 1
        if t_next > horizon:
            break
        t = t_next
        events += 1
        u = nextu() * total
        if u < map_rate[a]:
            b, is_arrival = map_evt[a][bisect.bisect_right(map_cum[a], u)]
            if is_arrival:
                arrivals += 1
                if d == 1:
                    s = int(nextu() * n)
                else:
                    if with_replacement:
                        cand = [int(nextu() * n) for _ in range(d)]
                    else:
                        cand = []
                        while len(cand) < d:
                            x = int(nextu() * n)
                            if x not in cand:
                                cand.append(x)
                    best = min(q[x] for x in cand)
                    tied = sorted({x for x in cand if q[x] == best})
                    s = tied[0] if len(tied) == 1 else tied[int(nextu() * len(tied))]
                qs = q[s] + 1
                q[s] = qs
                fifo[s].append(t)
                if qs == 1:
                    j = 0 if single_start else bisect.bisect_right(alpha_cum, nextu())
                    ph[s] = j
                    pos[s] = len(busy[j])
                    busy[j].append(s)
                else:
                    j = ph[s]
                grow(qs)
                bump((qs - 1) * m_b + j, 1)
            if b != a:
                if measuring:
                    flush_all(t)
                    phase_time[a] += t - phase_since
                    phase_since = t
                a = b
        else:
            u -= map_rate[a]
            for j in range(m_b):
                w = len(busy[j]) * out[j]
                if u < w or j == m_b - 1:
                    break
                u -= w
            lst = busy[j]
            s = lst[int(nextu() * len(lst))]
            evt = ph_evt[j]
            nxt = evt[0] if len(evt) == 1 else evt[bisect.bisect_right(ph_cum[j], nextu())]
            qs = q[s]
            if nxt == m_b:
                departures += 1
                arr = fifo[s].popleft()
                # keyed by departure time: filtering on arrival time would drop
                # the long sojourns still in progress at the horizon
                if t > warmup:
                    k = min(int((t - warmup) / span * batches), batches - 1)
                    soj_sum[k] += t - arr
                    soj_cnt[k] += 1
                bump((qs - 1) * m_b + j, -1)
                q[s] = qs - 1
                # leave phase list j
                i = pos[s]
                tail = lst.pop()
                if tail != s:
                    lst[i] = tail
                    pos[tail] = i
                if qs > 1:
                    jj = 0 if single_start else bisect.bisect_right(alpha_cum, nextu())
                    ph[s] = jj
                    pos[s] = len(busy[jj])
                    busy[jj].append(s)
                    if jj != j:
                        for lvl in range(qs - 1):
                            bump(lvl * m_b + j, -1)
                            bump(lvl * m_b + jj, 1)
                else:
                    ph[s] = -1
            else:
                jj = nxt
                i = pos[s]
                tail = lst.pop()
                if tail != s:
                    lst[i] = tail
                    pos[tail] = i
                ph[s] = jj
                pos[s] = len(busy[jj])
                busy[jj].append(s)
                for lvl in range(qs):
                    bump(lvl * m_b + j, -1)
                    bump(lvl * m_b + jj, 1)

    # remaining samples beyond the last event keep the final state
    while si < ns:
        lim = min(len(cnt), width)
        samples[si].reshape(-1)[:lim] = np.asarray(cnt[:lim], dtype=float) / n
        si += 1

    levels = len(cnt) // m_b
    # cumulative snapshots at batch ends -> per-batch averages
    cum = np.zeros((batches + 1, m_a, levels, m_b))
    for b_, snap in enumerate(batch_area):
        for i in range(m_a):
            row = np.zeros(levels * m_b)
            row[:len(snap[i])] = snap[i]
            cum[b_ + 1, i] = row.reshape(levels, m_b)
    ptime = np.zeros((batches + 1, m_a))
    ptime[1:] = np.array(batch_phase_time)
    per_batch = np.diff(cum, axis=0) / (n * (span / batches))
    per_batch_phase = np.diff(ptime, axis=0) / (span / batches)
    level0 = per_batch_phase[:, :, None, None] * np.eye(1, m_b)[None, None, :, :]
    per_batch = np.concatenate([level0.reshape(batches, m_a, 1, m_b), per_batch], axis=2)
    tails = per_batch.mean(axis=0).transpose(1, 0, 2)  # (k, i, j)
    batch_sums = per_batch.sum(axis=(1, 3))  # (batch, k)
    tail_sums = batch_sums.mean(axis=0)
    tail_stderr = batch_sums.std(axis=0, ddof=1) / math.sqrt(batches)

    soj_cnt_a = np.array(soj_cnt)
    customers = int(soj_cnt_a.sum())
    if customers:
        soj_mean = float(sum(soj_sum) / customers)
        ok = soj_cnt_a > 0
        bm = np.array(soj_sum)[ok] / soj_cnt_a[ok]
        if bm.size > 1:
            se = float(bm.std(ddof=1) / math.sqrt(bm.size))
            hw = float(stats.t.ppf(0.975, bm.size - 1) * se)
        else:
            se = hw = math.inf
    else:
        soj_mean = se = hw = math.nan
    return SimResult(
        n=n, d=d, seed=int(seed), horizon=float(horizon), warmup=float(warmup),
        empirical_tails=tails, tail_sums=tail_sums, tail_stderr=tail_stderr,
        sojourn_mean=soj_mean, sojourn_stderr=se, sojourn_halfwidth=hw, customers=customers,
        event_count=events, arrivals=arrivals, departures=departures, in_system=sum(q),
        samples=samples, sample_times=sample_times,
    )


@dataclass
class ReplicationSummary:
    """Across-replication means and standard errors (replication r uses seed + r)."""

    results: list
    tail_mean: np.ndarray
    tail_stderr: np.ndarray
    sojourn_mean: float
    sojourn_stderr: float
    utilization_mean: float
    utilization_stderr: float


def _run_one(args):
    params, n, horizon, warmup, seed, kw = args
    return simulate(params, n, horizon, warmup, seed, **kw)


def _map_ordered(fn, jobs, workers):
    if workers and workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def replicate(params: ModelParams, n: int, horizon: float, warmup: float, seed: int, reps: int,
              workers: int = 1, **kw) -> ReplicationSummary:
    if reps < 1:
        raise ConfigError(f"reps must be >= 1, got {reps}")
    jobs = [(params, n, horizon, warmup, seed + r, kw) for r in range(reps)]
    results = _map_ordered(_run_one, jobs, workers)
    depth = max(len(r.tail_sums) for r in results)
    tails = np.zeros((reps, depth))
    for i, r in enumerate(results):
        tails[i, :len(r.tail_sums)] = r.tail_sums
    soj = np.array([r.sojourn_mean for r in results])
    se = (lambda x: float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else math.inf)
    return ReplicationSummary(
        results=results, tail_mean=tails.mean(axis=0),
        tail_stderr=tails.std(axis=0, ddof=1) / math.sqrt(reps) if reps > 1 else np.full(depth, np.inf),
        sojourn_mean=float(soj.mean()), sojourn_stderr=se(soj),
        utilization_mean=float(tails[:, 1].mean()), utilization_stderr=se(tails[:, 1]),
    )


@dataclass
class KurtzRow:
    n: int
    sup_distance: float
    stderr: float
    per_rep: list


def sup_distance(samples: np.ndarray, traj, sample_times, m_a: int, m_b: int) -> float:
    """Max over sample times, levels k >= 1 and service phases of |x_n(k, j) - X(k, j)|.

    Both sides are marginalized over the MAP phase; levels above the ODE
    truncation are compared against zero.
    """
    levels = samples.shape[1]
    worst = 0.0
    for i, u in enumerate(sample_times):
        x = traj.interpolate(u)[m_a:].reshape(traj.K, m_a, m_b).sum(axis=1)
        ode = np.zeros((levels, m_b))
        k = min(levels, traj.K)
        ode[:k] = x[:k]
        worst = max(worst, float(np.abs(samples[i] - ode).max()))
    return worst


def kurtz_convergence(params: ModelParams, n_list, t: float, reps: int, seed: int,
                      step: float = 1e-3, sample_dt: float = 0.1, K: int | None = None,
                      level0: str = "projected", workers: int = 1):
    """Mean sup-distance between the n-server system and the ODE on [0, t], per n.

    Returns ``(rows, trajectory)``. Both systems start empty.
    """
    from .fixed_point import closed_form, default_truncation
    from .ode import empty_state, integrate

    n_list = [int(n) for n in n_list]
    if reps < 1:
        raise ConfigError(f"reps must be >= 1, got {reps}")
    if not n_list or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ConfigError("n_list must be a non-empty increasing list")
    if not t > 0:
        raise ConfigError("t must be positive")
    if K is None:
        K = max(2, default_truncation(params, closed_form(params, 1).variant, 1e-12))
    every = max(1, int(round(sample_dt / step)))
    traj = integrate(empty_state(params, K), params, t, step, record_every=every, level0=level0)
    grid = np.arange(0.0, t + 1e-12, sample_dt)
    levels = K + 3
    rows = []
    for n in n_list:
        jobs = [(params, n, t, 0.0, seed + r,
                 {"sample_times": grid, "sample_levels": levels}) for r in range(reps)]
        results = _map_ordered(_run_one, jobs, workers)
        dists = [sup_distance(r.samples, traj, grid, params.m_a, params.m_b) for r in results]
        arr = np.array(dists)
        stderr = float(arr.std(ddof=1) / math.sqrt(reps)) if reps > 1 else math.inf
        rows.append(KurtzRow(n=n, sup_distance=float(arr.mean()), stderr=stderr, per_rep=dists))
    return rows, traj
