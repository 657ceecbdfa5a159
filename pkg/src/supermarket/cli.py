"""Command-line front end: JSON config in, CSV (+ JSON sidecar) out.

Exit codes: 0 success, 2 configuration error, 3 unstable model, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
import tempfile

import numpy as np

from . import __version__
from .errors import (ConfigError, NumericError, PreconditionError, StabilityError,
                     StructuralError, SupermarketError, ValidationError)
from .fixed_point import (closed_form, erlang_compare, expected_sojourn, poisson_ph_first,
                          poisson_ph_second, residuals)
from .models import EXAMPLE_C, EXAMPLE_D, build_map, build_params, exponential_ph, params_from_dict
from .ode import check_upper_bound, decay_rate, empty_state, integrate
from .simulation import kurtz_convergence, replicate

EXIT_OK, EXIT_CONFIG, EXIT_STABILITY, EXIT_NUMERIC = 0, 2, 3, 4

EXPERIMENTS = ("fixed_point", "ode", "simulate", "sojourn_curve", "erlang", "kurtz")

EXAMPLE_MODEL = {"map": {"C": EXAMPLE_C, "D": EXAMPLE_D},
               "ph": {"alpha": [1.0], "T": [[-10.0]]}, "d": 2}

BUILTIN_DEFAULTS = {
    "fixed_point": {"model": EXAMPLE_MODEL},
    "ode": {"model": EXAMPLE_MODEL, "t_end": 20.0, "step": 1e-3, "record_every": 100},
    "simulate": {"model": EXAMPLE_MODEL, "n": 500, "horizon": 1200.0, "warmup": 200.0, "reps": 10},
    "sojourn_curve": {"model": EXAMPLE_MODEL, "d_range": [1, 2, 3, 4, 5], "mu_list": [5.0, 10.0, 20.0]},
    "erlang": {"m": 2, "d": 2, "lam": 0.5, "eta": 2.0, "K": 8},
    "kurtz": {"model": EXAMPLE_MODEL, "n_list": [50, 100, 200, 400], "t": 10.0, "reps": 5},
}


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _require(cfg, key, kind=float, positive=True):
    if key not in cfg:
        raise ConfigError(f"missing required field {key!r}")
    try:
        val = kind(cfg[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field {key!r} is not a valid {kind.__name__}") from exc
    if positive and not val > 0:
        raise ConfigError(f"field {key!r} must be positive, got {cfg[key]!r}")
    return val


def _model(cfg):
    if "model" not in cfg:
        raise ConfigError("missing required field 'model'")
    try:
        return params_from_dict(cfg["model"])
    except (ValidationError, StructuralError) as exc:
        raise ConfigError(f"invalid model: {exc}") from exc


# -- experiments: each returns (header, rows, metadata) ------------------------

def run_fixed_point(cfg):
    params = _model(cfg)
    K = int(cfg["K"]) if "K" in cfg else None
    variant = cfg.get("variant", "closed_form")
    builders = {"closed_form": closed_form, "first": poisson_ph_first, "second": poisson_ph_second}
    if variant not in builders:
        raise ConfigError(f"unknown fixed-point variant {variant!r}")
    fp = builders[variant](params, K)
    rep = residuals(fp, params)
    rows = [(0, float(fp.pi0.sum()), fp.variant.value)]
    rows += [(k, float(fp.levels[k - 1].sum()), fp.variant.value) for k in range(1, fp.K + 1)]
    meta = {"K": fp.K, "tail_bound": fp.tail_bound, "theta": params.theta, "omega": params.omega,
            "psi": params.psi, "rho": params.rho,
            "residuals": {"balance_max": rep.balance_max, "projected_level1": rep.projected_level1,
                          "projected_upper": rep.projected_upper,
                          "annihilation_max": rep.annihilation_max}}
    return ["k", "pi_sum", "variant"], rows, meta


def run_ode(cfg):
    params = _model(cfg)
    t_end = _require(cfg, "t_end")
    step = float(cfg.get("step", 1e-3))
    every = int(cfg.get("record_every", 1))
    fp = closed_form(params)
    K = int(cfg.get("K", max(2, fp.K)))
    traj = integrate(empty_state(params, K), params, t_end, step, record_every=every,
                     level0=cfg.get("level0", "projected"))
    rows = []
    for i, t in enumerate(traj.times):
        for k in range(K + 1):
            for j, v in enumerate(traj.level_series(k)[i]):
                rows.append((float(t), k, j, float(v), float(traj.drift_log[i])))
    meta = {"K": K, "upper_bound_exceedance": check_upper_bound(traj, fp),
            "max_drift": float(traj.drift_log.max())}
    try:
        fit = decay_rate(traj, fp)
        meta["decay_rate"] = fit.rate
    except NumericError as exc:
        meta["decay_rate"] = None
        meta["decay_note"] = str(exc)
    return ["t", "k", "block_index", "value", "drift"], rows, meta


def run_simulate(cfg):
    params = _model(cfg)
    n = _require(cfg, "n", int)
    horizon = _require(cfg, "horizon")
    warmup = float(cfg.get("warmup", 0.0))
    reps = _require(cfg, "reps", int) if "reps" in cfg else 1
    seed = int(cfg.get("seed", 0))
    summary = replicate(params, n, horizon, warmup, seed, reps,
                        with_replacement=bool(cfg.get("with_replacement", True)))
    if reps > 1:
        mean, se = summary.tail_mean, summary.tail_stderr
    else:
        mean, se = summary.results[0].tail_sums, summary.results[0].tail_stderr
    rows = [(k, float(mean[k]), float(se[k])) for k in range(len(mean))]
    meta = {"seed": seed, "n": n, "d": params.d, "horizon": horizon, "warmup": warmup,
            "reps": reps, "sojourn_mean": summary.sojourn_mean,
            "sojourn_stderr": summary.sojourn_stderr if reps > 1
            else summary.results[0].sojourn_stderr,
            "event_counts": [r.event_count for r in summary.results]}
    return ["k", "empirical_tail", "stderr"], rows, meta


def run_sojourn_curve(cfg):
    if "model" not in cfg or "map" not in cfg["model"]:
        raise ConfigError("sojourn_curve needs model.map")
    try:
        map_ = build_map(cfg["model"]["map"]["C"], cfg["model"]["map"]["D"])
    except (KeyError, TypeError, ValidationError, StructuralError) as exc:
        raise ConfigError(f"invalid MAP: {exc}") from exc
    d_range = [int(d) for d in cfg.get("d_range", [])]
    mu_list = [float(m) for m in cfg.get("mu_list", [])]
    if not d_range:
        raise ConfigError("d_range is empty")
    if not mu_list:
        raise ConfigError("mu_list is empty")
    if any(d < 1 for d in d_range) or any(not m > 0 for m in mu_list):
        raise ConfigError("d_range entries must be >= 1 and mu_list entries > 0")
    tol = float(cfg.get("tol", 1e-15))
    rows = []
    for mu in mu_list:
        for d in d_range:
            try:
                p = build_params(map_, exponential_ph(mu), d)
            except StabilityError:
                rows.append((d, mu, math.nan, "unstable"))
                continue
            rows.append((d, mu, expected_sojourn(p, tol), "ok"))
    return ["d", "mu", "expected_sojourn", "status"], rows, {"lambda": map_.lam}


def run_erlang(cfg):
    m = _require(cfg, "m", int)
    d = _require(cfg, "d", int)
    lam = _require(cfg, "lam")
    eta = _require(cfg, "eta")
    K = _require(cfg, "K", int)
    table = erlang_compare(m, d, lam, eta, K)
    rows = [(r.k, r.first_sum, r.second_sum, r.ratio) for r in table]
    meta = {"rho": m * lam / eta, "log_ratio": [r.log_ratio for r in table]}
    return ["k", "first_sum", "second_sum", "ratio"], rows, meta


def run_kurtz(cfg):
    params = _model(cfg)
    n_list = cfg.get("n_list")
    if not n_list:
        raise ConfigError("n_list is empty")
    t = _require(cfg, "t")
    reps = _require(cfg, "reps", int)
    seed = int(cfg.get("seed", 0))
    table, _ = kurtz_convergence(params, n_list, t, reps, seed,
                                 step=float(cfg.get("step", 1e-3)),
                                 sample_dt=float(cfg.get("sample_dt", 0.1)))
    rows = [(r.n, r.sup_distance, r.stderr) for r in table]
    return ["n", "sup_distance", "stderr"], rows, {"seed": seed, "reps": reps, "t": t}


RUNNERS = {"fixed_point": run_fixed_point, "ode": run_ode, "simulate": run_simulate,
           "sojourn_curve": run_sojourn_curve, "erlang": run_erlang, "kurtz": run_kurtz}


def render_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def _atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def run(config: dict, out: str | None = None) -> tuple:
    """Dispatch one experiment; returns (csv_text, metadata) after writing outputs."""
    experiment = config.get("experiment")
    if experiment not in RUNNERS:
        raise ConfigError(f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")
    header, rows, meta = RUNNERS[experiment](config)
    text = render_csv(header, rows)
    sidecar = {"experiment": experiment, "version": __version__, "config": config, "results": meta}
    out = out or config.get("output_path")
    if out:
        dirname = os.path.dirname(os.path.abspath(out))
        if not os.path.isdir(dirname) or not os.access(dirname, os.W_OK):
            raise ConfigError(f"output directory {dirname} is not writable")
        _atomic_write(out, text)
        _atomic_write(out + ".json", json.dumps(_jsonable(sidecar), indent=2, sort_keys=True) + "\n")
    return text, sidecar


def build_config(experiment, config_path=None, paper_defaults=False, seed=None) -> dict:
    cfg = copy.deepcopy(BUILTIN_DEFAULTS[experiment]) if paper_defaults else {}
    if config_path:
        try:
            with open(config_path) as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON in {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config must be a JSON object")
        cfg.update(loaded)
    if not cfg:
        raise ConfigError("no configuration: pass --config and/or --paper-defaults")
    cfg.setdefault("experiment", experiment)
    if cfg["experiment"] != experiment:
        raise ConfigError(f"config is for {cfg['experiment']!r}, not {experiment!r}")
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="supermarket", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name.replace("_", "-"))
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="CSV output path (a .json sidecar is written next to it)")
        sp.add_argument("--seed", type=int, help="base seed (replication r uses seed + r)")
        sp.add_argument("--paper-defaults", action="store_true",
                        help="start from the built-in two-phase MAP example")
    args = parser.parse_args(argv)
    experiment = args.command.replace("-", "_")
    try:
        cfg = build_config(experiment, args.config, args.paper_defaults, args.seed)
        text, _ = run(cfg, args.out)
    except StabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STABILITY
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValidationError, StructuralError, PreconditionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SupermarketError as exc:  # pragma: no cover - every subclass is mapped above
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if not args.out and not cfg.get("output_path"):
        sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
