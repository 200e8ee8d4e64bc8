"""Declarative experiment runner.

Parses a TOML experiment description, executes the named experiment
kind, and writes plot-ready artifacts: results.csv, summary.json, the
fully resolved configuration (re-runnable), a column schema, and a
textual plotting script.  Exit status: 0 when every enabled check
passes, 2 on configuration errors, 3 on numerical failures or failed
checks.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:         # Python 3.10
    import tomli as tomllib

from . import bvp, cell, coefficients, rates, regularity, reiterate, scales

SCHEMA_VERSION = 1

KINDS = ("rate_sweep", "tau_sweep", "lipschitz_probe", "cell_convergence",
         "recursion_check", "stability_probe", "mm_series", "dini")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration schema
# ---------------------------------------------------------------------------

_DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "kind": None,
    "seed": 0,
    "schedule": {
        "kind": "geometric",
        "eps1": 0.5,
        "values": [],
        "tail_ratio": 0.5,
        "increments": [],
        "tail_increment": 1.0,
        "horizon": 64,
    },
    "hierarchy": {
        "kind": "weierstrass",
        "tau": 0.25,
        "ratio": 0.25,
        "levels": 6,
        "base_constant": 2.0,
        "base_slow_amplitude": 0.0,
    },
    "solver": {
        "N": 64,
        "rtol": 1e-10,
        "tol": 1e-6,
        "C0": 1.0,
        "ppw": 32,
        "max_panels": 1 << 19,
        "budget": 4,
        "cache_resolution": 16,
    },
    "experiment": {
        "eps1_values": [0.25, 0.125, 0.0625, 0.03125, 0.015625],
        "tau_values": [0.0625, 0.125, 0.25],
        "f": "sinpi",
        "g": [0.0, 0.3],
        "slope_min": 0.9,
        "slope_range": [0.8, 1.2],
        "dimension": 1,
        "grid_sizes": [8, 16, 32, 64],
        "n": 8,
        "c0_values": [0.0, 1.0, 10.0],
        "delta0": 1.0,
        "delta_ratio": 0.5,
        "perturbations": [0.01, 0.05, 0.1],
        "points": 100,
        "alpha": 0.5,
        "T": 64.0,
        "mmax": 32,
        "rho": 1.0,
        "r_min_exp": -12,
        "r_max_exp": -1,
        "r_count": 23,
        "center": 0.5,
        "r_base": 0.4,
        "spread_limit": 2.0,
    },
}


def _validate(config):
    if not isinstance(config, dict):
        raise ConfigError("top-level configuration must be a table")
    resolved = {}
    for key, default in _DEFAULTS.items():
        if isinstance(default, dict):
            sub = config.get(key, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"[{key}] must be a table")
            for k in sub:
                if k not in default:
                    raise ConfigError(f"unknown key '{key}.{k}'")
            resolved[key] = {**default, **sub}
        else:
            resolved[key] = config.get(key, default)
    for k in config:
        if k not in _DEFAULTS:
            raise ConfigError(f"unknown key '{k}'")
    if resolved["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {resolved['schema_version']}")
    if resolved["kind"] not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {resolved['kind']!r}")
    return resolved


def _emit_toml(d, out):
    def scalar(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, float)):
            return repr(v)
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(scalar(x) for x in v) + "]"
        raise ConfigError(f"cannot serialize {type(v)}")

    for k, v in d.items():
        if not isinstance(v, dict) and v is not None:
            out.write(f"{k} = {scalar(v)}\n")
    for k, v in d.items():
        if isinstance(v, dict):
            out.write(f"\n[{k}]\n")
            for kk, vv in v.items():
                out.write(f"{kk} = {scalar(vv)}\n")


# ---------------------------------------------------------------------------
# shared builders
# ---------------------------------------------------------------------------

def _data_functions(exp):
    name = exp["f"]
    if name == "sinpi":
        f = lambda x: np.pi ** 2 * np.sin(np.pi * x)
    elif name == "one":
        f = lambda x: np.ones_like(x)
    elif name == "zero":
        f = 0.0
    else:
        raise ConfigError(f"unknown source function '{name}'")
    g = tuple(float(v) for v in exp["g"])
    return f, g


def _base_layer(hcfg):
    entries = [(hcfg["base_constant"], [0], [0.0])]
    if hcfg["base_slow_amplitude"]:
        entries.append((hcfg["base_slow_amplitude"], [1], [0.0]))
    return coefficients.scalar_trig_layer(0, 1, entries)


def _schedule(scfg):
    kind = scfg["kind"]
    if kind == "geometric":
        return scales.ScaleSchedule.geometric(scfg["eps1"], scfg["horizon"])
    if kind == "explicit":
        return scales.ScaleSchedule.explicit(scfg["values"], scfg["tail_ratio"],
                                             scfg["horizon"])
    if kind == "power":
        return scales.ScaleSchedule.power_rule(scfg["eps1"], scfg["increments"],
                                               scfg["tail_increment"], scfg["horizon"])
    raise ConfigError(f"unknown schedule kind '{kind}'")


def _policy(solver):
    return rates.ResolutionPolicy(ppw=solver["ppw"], max_panels=solver["max_panels"],
                                  budget=solver["budget"])


def _mapper(threads):
    if threads <= 1:
        return None
    pool = ThreadPoolExecutor(max_workers=threads)
    return lambda fn, items: pool.map(fn, items)


# ---------------------------------------------------------------------------
# experiment implementations: each returns (columns, rows, summary, passed)
# ---------------------------------------------------------------------------

def _run_rate_sweep(cfg, threads, rng):
    exp, hcfg = cfg["experiment"], cfg["hierarchy"]
    data = _data_functions(exp)
    rep = rates.weierstrass_rate_sweep(
        hcfg["tau"], exp["eps1_values"], data, base=_base_layer(hcfg),
        levels=hcfg["levels"], policy=_policy(cfg["solver"]),
        c0=cfg["solver"]["C0"], mapper=_mapper(threads))
    verdict = rates.predictor_compare(rep)
    summary = rep.summary(slope_min=exp["slope_min"])
    summary["predictor_spread"] = verdict.spread
    cols = ["parameter", "error", "predictor", "empirical_C"]
    return cols, [list(r.values()) for r in rep.rows()], summary, summary["pass"]


def _run_tau_sweep(cfg, threads, rng):
    exp, hcfg = cfg["experiment"], cfg["hierarchy"]
    data = _data_functions(exp)
    rep = rates.weierstrass_tau_sweep(
        hcfg["ratio"], exp["tau_values"], data, base=_base_layer(hcfg),
        levels=hcfg["levels"], policy=_policy(cfg["solver"]),
        c0=cfg["solver"]["C0"], mapper=_mapper(threads))
    summary = rep.summary(slope_range=tuple(exp["slope_range"]))
    cols = ["parameter", "error", "predictor", "empirical_C"]
    return cols, [list(r.values()) for r in rep.rows()], summary, summary["pass"]


def _run_lipschitz(cfg, threads, rng):
    exp, hcfg = cfg["experiment"], cfg["hierarchy"]
    data = _data_functions(exp)
    fam = lambda e1: coefficients.weierstrass_builder(
        hcfg["tau"], e1, levels=hcfg["levels"], base=_base_layer(hcfg))
    rep = regularity.lipschitz_probe(fam, exp["eps1_values"], data,
                                     center=exp["center"], r_base=exp["r_base"],
                                     policy=_policy(cfg["solver"]),
                                     spread_limit=exp["spread_limit"])
    rows = [[float(p), float(s)] for p, s in zip(rep.params, rep.sup_ratios)]
    summary = {"kind": "lipschitz_probe", "spread": rep.spread,
               "bounded": rep.bounded, "pass": rep.bounded}
    return ["parameter", "sup_ratio"], rows, summary, rep.bounded


def _run_cell_convergence(cfg, threads, rng):
    exp = cfg["experiment"]
    d = exp["dimension"]
    rows = []
    errors = []
    for N in exp["grid_sizes"]:
        pts = cell.torus_grid(N, d)
        a = 2.0 + np.sin(2.0 * np.pi * pts[..., 0])
        A = cell.TorusField(np.einsum("...,ij->...ij", a, np.eye(d)), d)
        sol = cell.solve_cell(A, mu=1.0, rtol=cfg["solver"]["rtol"])
        if d == 1:
            oracle = np.array([[1.0 / np.mean(1.0 / (2.0 + np.sin(
                2.0 * np.pi * np.arange(1 << 14) / (1 << 14))))]])
        else:
            oracle = np.diag([math.sqrt(3.0), 2.0])
        err = float(np.max(np.abs(sol.effective - oracle)))
        errors.append(err)
        rows.append([N, err])
    monotone = all(b <= a * (1 + 1e-9) for a, b in zip(errors, errors[1:]))
    passed = monotone and errors[-1] <= 1e-10
    summary = {"kind": "cell_convergence", "errors": errors,
               "monotone": monotone, "final_error": errors[-1], "pass": passed}
    return ["N", "error"], rows, summary, passed


def _run_recursion_check(cfg, threads, rng):
    exp = cfg["experiment"]
    delta = coefficients.DeltaModel(
        (exp["delta0"],), coefficients.GeometricTail(exp["delta0"], exp["delta_ratio"]))
    rows = []
    ok = True
    for c0 in exp["c0_values"]:
        state = reiterate.delta_recursion(delta, exp["n"], c0)
        ok = ok and state.ok
        for k in range(exp["n"] + 1):
            rows.append([c0, k, float(state.values[k]), float(state.bounds[k]),
                         float(state.margins[k])])
    summary = {"kind": "recursion_check", "pass": ok,
               "min_margin": min(r[4] for r in rows)}
    return ["C0", "k", "value", "bound", "margin"], rows, summary, ok


def _run_stability(cfg, threads, rng):
    exp, hcfg, solver = cfg["experiment"], cfg["hierarchy"], cfg["solver"]
    sched = scales.ScaleSchedule.geometric(hcfg["ratio"])
    base = _base_layer(hcfg)
    fast = coefficients.scalar_trig_layer(1, 1, [(1.0, [0, 1], [0.0, -math.pi / 2])])
    h1 = coefficients.CoefficientHierarchy(1, [base, fast], sched)
    rows = []
    ok = True
    cache_path = os.environ.get("HOMOGLAB_CACHE")
    for tau in exp["perturbations"]:
        shifted = coefficients.scalar_trig_layer(
            0, 1, [(hcfg["base_constant"] + tau, [0], [0.0])]
            + ([(hcfg["base_slow_amplitude"], [1], [0.0])]
               if hcfg["base_slow_amplitude"] else []))
        h2 = coefficients.CoefficientHierarchy(1, [shifted, fast], sched)
        rep = reiterate.stability_probe(h1, h2, tau=tau, points=exp["points"],
                                        N=solver["N"], rtol=solver["rtol"],
                                        cache_resolution=solver["cache_resolution"])
        ok = ok and rep.passed
        rows.append([tau, rep.max_difference, rep.bound, rep.measured_ratio])
    if cache_path:
        ev = reiterate.IntermediateEvaluator(h1, 1, solver["N"], solver["rtol"],
                                             solver["cache_resolution"])
        ev.ahat(np.array([0.5]))
        ev.save_cache(cache_path)
    summary = {"kind": "stability_probe", "pass": ok}
    return ["tau", "max_difference", "bound", "measured_ratio"], rows, summary, ok


def _run_mm_series(cfg, threads, rng):
    exp = cfg["experiment"]
    sched = _schedule(cfg["schedule"])
    delta = coefficients.DeltaModel(
        (exp["delta0"],), coefficients.GeometricTail(exp["delta0"], exp["delta_ratio"]))
    ser = regularity.mm_series(sched, delta, alpha=exp["alpha"], T=exp["T"],
                               mmax=exp["mmax"])
    rows = [[m, float(ser.values[m]), float(ser.tails[m])]
            for m in range(len(ser.values))]
    monotone = bool(np.all(np.diff(ser.tails) <= 1e-15))
    passed = monotone and ser.m0 is not None and ser.route_gap <= 1e-10
    summary = {"kind": "mm_series", "m0": ser.m0, "route_gap": ser.route_gap,
               "monotone": monotone, "sum_condition_ok": ser.sum_condition_ok,
               "pass": passed}
    return ["m", "M_m", "tail"], rows, summary, passed


def _run_dini(cfg, threads, rng):
    exp, hcfg = cfg["experiment"], cfg["hierarchy"]
    h = coefficients.weierstrass_builder(hcfg["tau"], hcfg["ratio"],
                                         levels=hcfg["levels"], base=_base_layer(hcfg))
    radii = np.logspace(exp["r_min_exp"] * math.log10(2.0),
                        exp["r_max_exp"] * math.log10(2.0), exp["r_count"])
    rep = regularity.dini_modulus(h, radii, rho=exp["rho"], rng=rng)
    rows = [[float(r), float(o), float(v)]
            for r, o, v in zip(rep.radii, rep.omega, rep.overlay)]
    passed = bool(rep.below_overlay and rep.integral < 3.0 * rep.fitted_c)
    summary = {"kind": "dini", "fitted_C": rep.fitted_c, "integral": rep.integral,
               "theta": rep.theta, "level": rep.level, "pass": passed}
    return ["r", "omega", "overlay"], rows, summary, passed


_RUNNERS = {
    "rate_sweep": _run_rate_sweep,
    "tau_sweep": _run_tau_sweep,
    "lipschitz_probe": _run_lipschitz,
    "cell_convergence": _run_cell_convergence,
    "recursion_check": _run_recursion_check,
    "stability_probe": _run_stability,
    "mm_series": _run_mm_series,
    "dini": _run_dini,
}

_SCHEMA_NOTES = {
    "rate_sweep": "parameter: leading scale; error: L2 difference of matched "
                  "solves; predictor: Lambda [delta]_1 sup ratio; empirical_C: "
                  "error/predictor",
    "tau_sweep": "parameter: amplitude tau at fixed leading scale; other "
                 "columns as in rate_sweep",
    "lipschitz_probe": "parameter: leading scale; sup_ratio: sup_r (H+h)(r) "
                       "normalized at the base radius",
    "cell_convergence": "N: grid nodes per axis; error: effective matrix vs "
                        "the laminate closed form",
    "recursion_check": "value: recursion run as equality; bound: closed "
                       "product bound; margin: bound - value",
    "stability_probe": "max_difference: sup over samples of |Ahat1 - Ahat2|; "
                       "bound: tau/mu^4",
    "mm_series": "M_m: scale series value; tail: sum of M_l for l >= m",
    "dini": "omega: sampled continuity modulus; overlay: fitted "
            "sqrt(r) + |log r|^(-1-rho) envelope",
}


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------

def load_config(path):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    return _validate(raw)


def run(config_path, out_dir, threads=1, seed=None):
    cfg = load_config(config_path)
    if seed is not None:
        cfg["seed"] = int(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    kind = cfg["kind"]
    try:
        cols, rows, summary, passed = _RUNNERS[kind](cfg, threads, rng)
    except ConfigError:
        raise
    except Exception as exc:
        raise RuntimeError(f"experiment '{kind}' failed: {exc}") from exc

    with open(out / "results.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        writer.writerows(rows)
    summary = {**summary, "seed": cfg["seed"], "threads": threads}
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    with open(out / "resolved_config", "w") as fh:
        _emit_toml(cfg, fh)
    with open(out / "schema.txt", "w") as fh:
        fh.write(f"results.csv columns for kind '{kind}':\n")
        fh.write("  " + ", ".join(cols) + "\n")
        fh.write(_SCHEMA_NOTES[kind] + "\n")
    with open(out / "plot_commands.txt", "w") as fh:
        fh.write(f"# plot-ready data for '{kind}'\n")
        fh.write("load results.csv with header row\n")
        if kind in ("rate_sweep", "tau_sweep"):
            fh.write("plot error against parameter, log-log axes\n")
            fh.write("overlay predictor against parameter, log-log axes\n")
        elif kind == "dini":
            fh.write("plot omega and overlay against r, log-log axes\n")
        else:
            fh.write(f"plot {cols[1]} against {cols[0]}\n")
    return summary, passed


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="homoglab", description="multiscale homogenization experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute an experiment configuration")
    p_run.add_argument("config")
    p_run.add_argument("--out", default="homoglab_out")
    p_run.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p_run.add_argument("--seed", type=int, default=None)
    p_val = sub.add_parser("validate", help="check a configuration and exit")
    p_val.add_argument("config")
    args = parser.parse_args(argv)

    if args.command == "validate":
        try:
            load_config(args.config)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print("configuration ok")
        return 0

    try:
        summary, passed = run(args.config, args.out, args.threads, args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(summary, indent=2, sort_keys=True, default=float))
    if not passed:
        print(f"error: checks failed for experiment '{summary['kind']}'",
              file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
