"""Command-line interface.

Subcommands: ``simulate`` (synthetic benchmark data), ``fit`` (posterior
chain -> JSON-lines + summary), ``quantile`` (conditional quantile CSV from
a fitted chain), ``baseline`` (frequentist fits), ``bp-demo`` (embedded
blood-pressure case study) and ``bench`` (the full benchmark grid).

Exit codes: 0 success, 2 usage/validation error, 1 runtime failure; failures
print a single machine-parseable ``error: ...`` line on stderr.  Every
seeded command is deterministic given its flags.  Console numbers are shown
with 6 significant digits; files carry full precision.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import bpdata
from .baselines import cv_bandwidth, kernel_spatial_median, linear_spatial_median_fit
from .geoquant import SolverSettings
from .gibbs import McmcSettings, run_chain
from .model import Dataset, Hyperparams, default_hyperparams
from .pipeline import (PosteriorDraws, QuantileQuery, conditional_quantile,
                       default_delta, delta_smoothed_quantile,
                       error_quantile_per_draw, kde_fit)
from .simbench import SimConfig, run_table1, simulate_dataset

__all__ = ["main"]


class UsageError(Exception):
    """Bad flags or invalid input files; maps to exit code 2."""


def _fmt(v) -> str:
    return repr(float(v))


def _write_lines(path: str, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        for line in lines:
            fp.write(line + "\n")


def _parse_vector(text: str, name: str) -> np.ndarray:
    try:
        return np.array([float(t) for t in text.split(",")], dtype=float)
    except ValueError as exc:
        raise UsageError(f"cannot parse {name} {text!r}") from exc


def _parse_x_values(args) -> list[float]:
    if args.x is not None and args.x_grid is not None:
        raise UsageError("give either --x or --x-grid, not both")
    if args.x is not None:
        return [float(args.x)]
    if args.x_grid is not None:
        spec = args.x_grid
        if ":" in spec:
            parts = spec.split(":")
            if len(parts) != 3:
                raise UsageError("--x-grid expects lo:hi:count or a comma list")
            lo, hi, num = float(parts[0]), float(parts[1]), int(parts[2])
            return [float(v) for v in np.linspace(lo, hi, num)]
        return [float(t) for t in spec.split(",")]
    raise UsageError("one of --x or --x-grid is required")


# ---------------------------------------------------------------------------
# Data CSV
# ---------------------------------------------------------------------------

def _write_data_csv(path: str, xs, ys):
    ys = np.atleast_2d(ys)
    k = ys.shape[1]
    header = "x," + ",".join(f"y{c + 1}" for c in range(k))
    rows = [header]
    for x, y in zip(xs, ys):
        rows.append(",".join([_fmt(x)] + [_fmt(v) for v in y]))
    _write_lines(path, rows)


def _read_data_csv(path: str) -> Dataset:
    try:
        with open(path, "r", encoding="utf-8") as fp:
            lines = fp.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read data file {path}: {exc}") from exc
    if not lines:
        raise UsageError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[0] != "x" or any(h != f"y{c + 1}" for c, h in enumerate(header[1:])):
        raise UsageError(f"{path}: line 1: expected header x,y1,...,yk")
    k = len(header) - 1
    if k < 1:
        raise UsageError(f"{path}: line 1: no response columns")
    xs, ys = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != k + 1:
            raise UsageError(f"{path}: line {lineno}: expected {k + 1} fields")
        try:
            vals = [float(v) for v in parts]
        except ValueError as exc:
            raise UsageError(f"{path}: line {lineno}: non-numeric field") from exc
        if not all(np.isfinite(v) for v in vals):
            raise UsageError(f"{path}: line {lineno}: non-finite value")
        xs.append(vals[0])
        ys.append(vals[1:])
    if not xs:
        raise UsageError(f"{path}: no data rows")
    return Dataset.from_pairs(np.array(xs), np.array(ys))


# ---------------------------------------------------------------------------
# Chain files
# ---------------------------------------------------------------------------

def _meta_path(chain_path: str) -> str:
    return chain_path + ".meta.json"


def _save_chain(draws: PosteriorDraws, mcmc: McmcSettings, path: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        draws.to_jsonl(fp)
    x, y = draws.data.to_pairs()
    meta = {
        "hyper": draws.hyper.to_json_dict(),
        "dataset": {"x": x.tolist(), "y": y.tolist()},
        "mcmc": {"n_draws": mcmc.n_draws, "burn_in": mcmc.burn_in,
                 "thin": mcmc.thin, "seed": mcmc.seed},
        "diagnostics": {
            "n_draws": int(draws.B),
            "mean_loglik": float(draws.loglik.mean()),
            "loglik_trace": draws.loglik.tolist(),
        },
    }
    with open(_meta_path(path), "w", encoding="utf-8", newline="\n") as fp:
        json.dump(meta, fp)
        fp.write("\n")


def _load_chain(path: str) -> PosteriorDraws:
    try:
        with open(_meta_path(path), "r", encoding="utf-8") as fp:
            meta = json.load(fp)
    except OSError as exc:
        raise UsageError(f"cannot read chain metadata {_meta_path(path)}: {exc}") from exc
    hyper = Hyperparams.from_json_dict(meta["hyper"])
    data = Dataset.from_pairs(np.array(meta["dataset"]["x"]),
                              np.array(meta["dataset"]["y"]))
    try:
        with open(path, "r", encoding="utf-8") as fp:
            return PosteriorDraws.from_jsonl(fp, data, hyper)
    except OSError as exc:
        raise UsageError(f"cannot read chain file {path}: {exc}") from exc


def _quantile_csv_rows(k: int, results) -> list[str]:
    cols = (["x"] + [f"u{c + 1}" for c in range(k)]
            + [f"point{c + 1}" for c in range(k)]
            + [f"lo{c + 1}" for c in range(k)]
            + [f"hi{c + 1}" for c in range(k)])
    rows = [",".join(cols)]
    for x, u, est in results:
        vals = ([_fmt(x)] + [_fmt(v) for v in u] + [_fmt(v) for v in est.point]
                + [_fmt(v) for v in est.ci_lower] + [_fmt(v) for v in est.ci_upper])
        rows.append(",".join(vals))
    return rows


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.n < 2:
        raise UsageError("--n must be >= 2")
    xs, ys = simulate_dataset(SimConfig(n=args.n, dist=args.dist, seed=args.seed))
    _write_data_csv(args.out, xs, ys)
    print(f"wrote {args.n} rows to {args.out}")
    return 0


def _hyper_from_args(args, k: int) -> Hyperparams:
    if args.config is not None:
        try:
            with open(args.config, "r", encoding="utf-8") as fp:
                return Hyperparams.from_json_dict(json.load(fp))
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"bad config {args.config}: {exc}") from exc
    return default_hyperparams(k)


def cmd_fit(args) -> int:
    data = _read_data_csv(args.data)
    hyper = _hyper_from_args(args, data.k)
    if hyper.k != data.k:
        raise UsageError(f"config k={hyper.k} does not match data k={data.k}")
    mcmc = McmcSettings(n_draws=args.draws, burn_in=args.burnin,
                        thin=args.thin, seed=args.seed)
    draws = run_chain(data, hyper, mcmc)
    _save_chain(draws, mcmc, args.out)
    print(f"stored {draws.B} draws to {args.out} "
          f"(mean log-likelihood {draws.loglik.mean():.6g})")
    return 0


def cmd_quantile(args) -> int:
    draws = _load_chain(args.chain)
    k = draws.hyper.k
    u = _parse_vector(args.u, "--u")
    if u.shape[0] != k:
        raise UsageError(f"--u must have {k} components")
    if np.linalg.norm(u) >= 1.0:
        raise UsageError("--u must satisfy ||u||_2 < 1")
    xs = _parse_x_values(args)
    if args.delta == "auto":
        delta = default_delta(draws.data.n)
    else:
        try:
            delta = float(args.delta)
        except ValueError as exc:
            raise UsageError("--delta expects a number or 'auto'") from exc
        if delta < 0:
            raise UsageError("--delta must be nonnegative")
    if not 0.0 < args.level < 1.0:
        raise UsageError("--level must lie in (0, 1)")
    settings = SolverSettings(mc_samples=args.mc_samples)
    err = error_quantile_per_draw(draws, u, settings=settings,
                                  seed=args.seed, method=args.method)
    density = None
    if delta > 0:
        flat_x, _ = draws.data.to_pairs()
        density = kde_fit(flat_x)
    results = []
    for x in xs:
        query = QuantileQuery(u=u, x=x, delta=delta, level=args.level)
        if delta > 0:
            est = delta_smoothed_quantile(draws, query, density,
                                          seed=args.seed, error_draws=err)
        else:
            est = conditional_quantile(draws, query, seed=args.seed,
                                       error_draws=err)
        results.append((x, u, est))
        pt = ", ".join(f"{v:.6g}" for v in est.point)
        print(f"x={x:.6g}: point=({pt})")
    _write_lines(args.out, _quantile_csv_rows(k, results))
    return 0


def cmd_baseline(args) -> int:
    data = _read_data_csv(args.data)
    xs, ys = data.to_pairs()
    if args.method == "linear":
        fit = linear_spatial_median_fit(xs, ys)
        est = fit.predict(xs)
        a = ", ".join(f"{v:.6g}" for v in fit.alpha_hat)
        b = ", ".join(f"{v:.6g}" for v in fit.beta_hat)
        print(f"alpha=({a}) beta=({b}) objective={fit.objective:.6g}")
    elif args.method == "kernel":
        if args.h is not None:
            h = args.h
            if h <= 0:
                raise UsageError("--h must be positive")
        else:
            h = cv_bandwidth(xs, ys, np.linspace(0.1, 2.0, 20))
            print(f"cross-validated bandwidth h={h:.6g} "
                  "(leave-one-out squared-norm risk)")
        est = np.stack([kernel_spatial_median(xs, ys, float(x), h) for x in xs])
    else:
        raise UsageError("--method must be linear or kernel")
    header = "x," + ",".join(f"est{c + 1}" for c in range(est.shape[1]))
    rows = [header] + [",".join([_fmt(x)] + [_fmt(v) for v in row])
                       for x, row in zip(xs, est)]
    _write_lines(args.out, rows)
    print(f"wrote {len(rows) - 1} rows to {args.out}")
    return 0


def cmd_bp_demo(args) -> int:
    ages, pressures = bpdata.bp_arrays()
    data = Dataset.from_pairs(ages, pressures)
    hyper = default_hyperparams(
        2, c0=np.array([100.0, 73.0]), c1=np.array([0.8, 0.35]))
    mcmc = McmcSettings(n_draws=args.draws, burn_in=args.burnin, seed=args.seed)
    draws = run_chain(data, hyper, mcmc)
    delta = default_delta(data.n) if args.delta is None else args.delta
    density = kde_fit(ages)
    u = np.zeros(2)
    err = error_quantile_per_draw(draws, u, seed=args.seed)
    results = []
    for age in bpdata.BP_AGE_GRID:
        query = QuantileQuery(u=u, x=float(age), delta=delta, level=0.95)
        est = delta_smoothed_quantile(draws, query, density, seed=args.seed,
                                      error_draws=err)
        results.append((float(age), u, est))
        print(f"age {age}: systolic {est.point[0]:.6g} "
              f"({est.ci_lower[0]:.6g}, {est.ci_upper[0]:.6g})  "
              f"diastolic {est.point[1]:.6g} "
              f"({est.ci_lower[1]:.6g}, {est.ci_upper[1]:.6g})")
    _write_lines(args.out, _quantile_csv_rows(2, results))
    return 0


def cmd_bench(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")]
    dists = (args.dist,) if args.dist else ("t1", "gamma")
    mcmc = McmcSettings(n_draws=args.draws, burn_in=args.burnin)
    t0 = time.perf_counter()
    rows = run_table1(seeds, mcmc=mcmc, n=args.n, dists=dists,
                      paper_truth=args.paper_truth)
    wall = time.perf_counter() - t0
    out_rows = ["seed,error_law,method,mse,runtime_s"]
    for r in rows:
        out_rows.append(f"{r['seed']},{r['error_law']},{r['method']},"
                        f"{_fmt(r['mse'])},{r['runtime_s']:.3f}")
        print(f"{r['error_law']:>6} seed {r['seed']} {r['method']:>15}: "
              f"MSE {r['mse']:.6g}")
    _write_lines(args.out, out_rows)
    meta = {
        "seeds": seeds, "n": args.n, "dists": list(dists),
        "draws": args.draws, "burn_in": args.burnin,
        "paper_truth": bool(args.paper_truth),
        "cv": "leave-one-out squared-norm risk over h in [0.1, 2.0]",
        "wall_time_s": round(wall, 3),
    }
    with open(_meta_path(args.out), "w", encoding="utf-8", newline="\n") as fp:
        json.dump(meta, fp)
        fp.write("\n")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddpquant",
        description="Bayesian multivariate quantile regression")
    sub = parser.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="generate benchmark data CSV")
    ps.add_argument("--dist", choices=("t1", "gamma"), required=True)
    ps.add_argument("--n", type=int, required=True)
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_simulate)

    pf = sub.add_parser("fit", help="fit the posterior chain")
    pf.add_argument("--data", required=True)
    pf.add_argument("--config", default=None,
                    help="hyperparameter JSON (defaults to the standard block)")
    pf.add_argument("--draws", type=int, default=5000)
    pf.add_argument("--burnin", type=int, default=500)
    pf.add_argument("--thin", type=int, default=1)
    pf.add_argument("--seed", type=int, default=0)
    pf.add_argument("--out", required=True)
    pf.set_defaults(func=cmd_fit)

    pq = sub.add_parser("quantile", help="conditional quantiles from a chain")
    pq.add_argument("--chain", required=True)
    pq.add_argument("--u", required=True, help="direction, e.g. 0,0")
    pq.add_argument("--x", default=None)
    pq.add_argument("--x-grid", dest="x_grid", default=None,
                    help="comma list or lo:hi:count")
    pq.add_argument("--delta", default="0", help="smoothing radius or 'auto'")
    pq.add_argument("--level", type=float, default=0.95)
    pq.add_argument("--method", choices=("mc", "polar"), default="mc")
    pq.add_argument("--mc-samples", dest="mc_samples", type=int, default=10000)
    pq.add_argument("--seed", type=int, default=0)
    pq.add_argument("--out", required=True)
    pq.set_defaults(func=cmd_quantile)

    pb = sub.add_parser("baseline", help="frequentist spatial-median fits")
    pb.add_argument("--data", required=True)
    pb.add_argument("--method", choices=("linear", "kernel"), required=True)
    pb.add_argument("--h", type=float, default=None)
    pb.add_argument("--out", required=True)
    pb.set_defaults(func=cmd_baseline)

    pd = sub.add_parser("bp-demo", help="blood-pressure case study")
    pd.add_argument("--draws", type=int, default=20000)
    pd.add_argument("--burnin", type=int, default=1000)
    pd.add_argument("--seed", type=int, default=0)
    pd.add_argument("--delta", type=float, default=None)
    pd.add_argument("--out", required=True)
    pd.set_defaults(func=cmd_bp_demo)

    pn = sub.add_parser("bench", help="benchmark grid (MSE table)")
    pn.add_argument("--seeds", default="0", help="comma list of seeds")
    pn.add_argument("--n", type=int, default=100)
    pn.add_argument("--draws", type=int, default=5000)
    pn.add_argument("--burnin", type=int, default=500)
    pn.add_argument("--dist", choices=("t1", "gamma"), default=None)
    pn.add_argument("--paper-truth", dest="paper_truth", action="store_true")
    pn.add_argument("--out", required=True)
    pn.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single CLI failure funnel
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
