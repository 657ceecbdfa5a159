"""Acceptance gate: one PASS/FAIL line per criterion, at the stated tolerances.

Run ``pytest tests/test_acceptance.py -v -s`` to see the lines as they are
produced; they are also repeated in the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from supermarket import (build_params, cli, closed_form, empty_state, erlang_ph, expected_sojourn,
                         integrate, mm_params, poisson_map, poisson_ph_first, poisson_ph_second,
                         residuals)
from supermarket.fixed_point import erlang_compare
from supermarket.ode import check_upper_bound, decay_rate, phi_series

from conftest import random_model

LINES = []

MM = {"map": {"C": [[-0.5]], "D": [[0.5]]}, "ph": {"alpha": [1.0], "T": [[-1.0]]}, "d": 2}
SIM_SEED = 20240
KURTZ_SEED = 7


def report(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)
    assert ok, line


def mm_model(d):
    m = json.loads(json.dumps(MM))
    m["d"] = d
    return m


# -- shared runs ---------------------------------------------------------------

@pytest.fixture(scope="module")
def ode_run():
    p = mm_params(0.5, 2)
    t0 = time.perf_counter()
    traj = integrate(empty_state(p, 6), p, 50.0, 1e-3)
    return p, traj, time.perf_counter() - t0


def run_simulations(root):
    """Criterion-8 simulations and the criterion-9 Kurtz run, all through the CLI runner."""
    out = {}
    for d in (2, 1):
        cfg = {"experiment": "simulate", "model": mm_model(d), "n": 500, "warmup": 200.0,
               "horizon": 1200.0, "reps": 10, "seed": SIM_SEED}
        path = root / f"sim_d{d}.csv"
        out[f"sim_d{d}"] = (path, cli.run(cfg, str(path))[1])
    kurtz = {"experiment": "kurtz", "model": cli.EXAMPLE_MODEL, "n_list": [50, 100, 200, 400],
             "t": 10.0, "reps": 5, "seed": KURTZ_SEED}
    path = root / "kurtz.csv"
    out["kurtz"] = (path, cli.run(kurtz, str(path))[1])
    return out


@pytest.fixture(scope="module")
def sims(tmp_path_factory):
    t0 = time.perf_counter()
    out = run_simulations(tmp_path_factory.mktemp("first"))
    return out, time.perf_counter() - t0


def read_rows(path):
    lines = path.read_text().splitlines()
    return [line.split(",") for line in lines[1:]]


# -- criteria --------------------------------------------------------------------

def test_c01_mm_reduction():
    t0 = time.perf_counter()
    worst = 0.0
    for rho in (0.3, 0.5, 0.9):
        fp = closed_form(mm_params(rho, 2), K=10)
        for k in range(1, 11):
            # compare in log space: rho^(2^10 - 1) underflows for rho = 0.3
            log_exact = (2**k - 1) * math.log(rho)
            worst = max(worst, abs(math.expm1(fp.log_sums[k - 1] - log_exact)))
            exact = rho ** (2**k - 1)
            if exact > 0:
                worst = max(worst, abs(fp.level(k)[0] - exact) / exact)
    dt = time.perf_counter() - t0
    report(1, worst <= 1e-12 and dt < 1, f"max rel err {worst:.2e} (<= 1e-12), {dt:.2f}s")


def test_c02_annihilation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(20):
        p = random_model(rng, int(rng.integers(1, 5)), int(rng.integers(1, 5)),
                         int(rng.integers(1, 5)), float(rng.uniform(0.1, 0.9)))
        r = residuals(closed_form(p), p)
        worst = max(worst, r.annihilation_W, r.annihilation_R, r.annihilation_pi0)
    dt = time.perf_counter() - t0
    report(2, worst <= 1e-11 and dt < 5, f"max annihilation residual {worst:.2e} (<= 1e-11), {dt:.2f}s")


def test_c03_dual_solutions():
    t0 = time.perf_counter()
    worst = {"first": 0.0, "second": 0.0}
    ratio_err = 0.0
    for m in (2, 3):
        for d in (2, 3):
            # Erlang(m) with per-phase rate eta has load m * lam / eta = 0.5
            p = build_params(poisson_map(0.5), erlang_ph(m, float(m)), d)
            for name, build in (("first", poisson_ph_first), ("second", poisson_ph_second)):
                worst[name] = max(worst[name], residuals(build(p, K=8), p, K=8).balance_max)
            for row in erlang_compare(m, d, 0.5, float(m), 8):
                expected = (d ** (row.k - 1) - 1) * math.log(m)
                ratio_err = max(ratio_err, abs(row.log_ratio - expected) / max(1.0, abs(expected)))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-10 and ratio_err <= 1e-10 and dt < 5
    report(3, ok, f"balance residual first {worst['first']:.2e}, second {worst['second']:.2e} "
                  f"(<= 1e-10); log-ratio rel err {ratio_err:.1e} (<= 1e-10), {dt:.2f}s")


def test_c04_ode_convergence(ode_run):
    p, traj, dt = ode_run
    final = traj.final
    err = max(abs(final.level(k)[0] - 0.5 ** (2**k - 1)) for k in range(1, 6))
    report(4, err <= 1e-6 and dt < 10, f"max |S_k(50) - rho^(2^k-1)| = {err:.2e} (<= 1e-6), {dt:.2f}s")


def test_c05_upper_bound(ode_run):
    p, traj, _ = ode_run
    excess = check_upper_bound(traj, closed_form(p))
    report(5, excess <= 1e-8, f"max exceedance {excess:.2e} (<= 1e-8)")


def test_c06_lyapunov_decay(ode_run):
    p, traj, _ = ode_run
    t0 = time.perf_counter()
    fp = closed_form(p)
    series = phi_series(traj, fp)
    after = series.phi_values[series.times >= 1.0]
    decreasing = bool(np.all(np.diff(after) < 0))
    fit = decay_rate(traj, fp)
    dt = time.perf_counter() - t0
    ok = decreasing and fit.slope < 0 and dt < 1
    report(6, ok, f"strictly decreasing after t=1: {decreasing}; fitted slope {fit.slope:.3f}, {dt:.2f}s")


def test_c07_sojourn_oracle():
    t0 = time.perf_counter()
    mu, lam = 1.0, 0.5
    e1 = abs(expected_sojourn(mm_params(lam / mu, 1, mu)) - 1.0 / (mu - lam))
    partial = sum(0.5 ** (2 ** (k + 1) - 2) for k in range(7)) / mu
    e2 = abs(expected_sojourn(mm_params(0.5, 2, mu)) - partial)
    dt = time.perf_counter() - t0
    report(7, max(e1, e2) <= 1e-10 and dt < 1, f"d=1 err {e1:.1e}, d=2 err {e2:.1e} (<= 1e-10), {dt:.2f}s")


def test_c08_simulation_vs_theory(sims):
    runs, dt = sims
    path, _ = runs["sim_d2"]
    rows = read_rows(path)
    zs = []
    for k in (1, 2, 3):
        mean, se = float(rows[k][1]), float(rows[k][2])
        zs.append(abs(mean - 0.5 ** (2**k - 1)) / se)
    meta = runs["sim_d1"][1]["results"]
    z1 = abs(meta["sojourn_mean"] - 2.0) / meta["sojourn_stderr"]
    ok = max(zs) <= 3 and z1 <= 3 and dt < 120
    report(8, ok, f"tail z-scores {', '.join(f'{z:.2f}' for z in zs)}; d=1 sojourn "
                  f"{meta['sojourn_mean']:.4f} (z {z1:.2f}) (<= 3 SE); all simulations {dt:.1f}s")


def test_c09_kurtz_trend(sims):
    runs, _ = sims
    rows = read_rows(runs["kurtz"][0])
    dist = [float(r[1]) for r in rows]
    se = [float(r[2]) for r in rows]
    ok = all(dist[i + 1] - dist[i] <= math.hypot(se[i], se[i + 1]) for i in range(len(dist) - 1))
    report(9, ok, "mean sup-distance " + ", ".join(f"{a:.3f}+-{b:.3f}" for a, b in zip(dist, se)))


def test_c10_sojourn_curve(tmp_path):
    t0 = time.perf_counter()
    cfg = cli.build_config("sojourn_curve", paper_defaults=True)
    path = tmp_path / "curve.csv"
    cli.run(cfg, str(path))
    rows = read_rows(path)
    table = {}
    for d, mu, value, status in rows:
        assert status == "ok"
        table[(int(d), float(mu))] = float(value)
    ds, mus = sorted({k[0] for k in table}), sorted({k[1] for k in table})
    in_d = all(table[(a, mu)] > table[(b, mu)] for mu in mus for a, b in zip(ds, ds[1:]))
    in_mu = all(table[(d, a)] > table[(d, b)] for d in ds for a, b in zip(mus, mus[1:]))
    dt = time.perf_counter() - t0
    report(10, in_d and in_mu and dt < 5,
           f"decreasing in d: {in_d}; decreasing in mu: {in_mu}; mu={mus}, d={ds}, {dt:.2f}s")


def test_c11_determinism(sims, tmp_path):
    first, _ = sims
    second = run_simulations(tmp_path)
    same = {k: first[k][0].read_bytes() == second[k][0].read_bytes() for k in first}
    report(11, all(same.values()), "byte-identical CSVs: " + ", ".join(f"{k}={v}" for k, v in same.items()))
