"""Experiment runner.

Subcommands: ``kernels`` (dump the transformation kernels), ``simulate``
(one closed-loop path), ``stabilize`` / ``lq`` (Monte Carlo ensembles under
pole-placement / optimal feedback), ``montecarlo`` (ensemble per the config's
controller), ``check`` (the full identity suite).

Exit codes: 0 success, 1 check failure, 2 configuration or I/O errors.
CSV output uses '.' decimals, ',' delimiters, a header row and 17 significant
digits, so identical command lines reproduce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import RunSpec, fit_exponential_rate, mean_and_se, monte_carlo
from .checks import run_check_suite
from .config import (ConfigError, PRESETS, ScenarioConfig, build_controller_factory,
                     build_lq_weights, build_params, parse_config)
from .control import LqWeights
from .core import make_grid, sample_brownian
from .kernels import solve_kernels
from .sim import apply_transform, simulate_coupled

__all__ = ["main"]

_FMT = "%.17g"


def _write_csv(path: Path, header: list[str], columns: list[np.ndarray]) -> None:
    rows = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_FMT % v for v in row) + "\n")


def _load_config(args) -> ScenarioConfig:
    if args.config:
        cfg = parse_config(Path(args.config).read_text())
    else:
        cfg = PRESETS[args.preset]()
    d = cfg.to_dict()
    if getattr(args, "grid_nx", None):
        d["grid"]["nx"] = args.grid_nx
    if getattr(args, "paths", None):
        d["montecarlo"]["n_paths"] = args.paths
    if getattr(args, "seed", None) is not None:
        d["montecarlo"]["base_seed"] = args.seed
    if getattr(args, "horizon", None):
        d["params"]["T"] = args.horizon
    if getattr(args, "poles", None):
        d["controller"] = {"kind": "stabilizing_feedback", "poles": list(args.poles)}
    if getattr(args, "controller", None):
        kind = args.controller
        if kind == "open_loop":
            d["controller"] = {"kind": "open_loop"}
        elif kind == "stabilizing_feedback":
            poles = list(args.poles) if getattr(args, "poles", None) else [-1.0]
            d["controller"] = {"kind": "stabilizing_feedback", "poles": poles}
        elif kind == "lq_optimal":
            d["controller"] = {"kind": "lq_optimal",
                               "qweight": args.qweight or 1.0,
                               "rweight": args.rweight or 0.1}
        else:
            raise ConfigError(f"unsupported controller override {kind!r}")
    if getattr(args, "qweight", None) and d["controller"]["kind"] == "lq_optimal":
        d["controller"]["qweight"] = args.qweight
    if getattr(args, "rweight", None) and d["controller"]["kind"] == "lq_optimal":
        d["controller"]["rweight"] = args.rweight
    return parse_config(d)


def _outdir(args) -> Path:
    base = args.output or os.environ.get("SDEPDE_OUTDIR", ".")
    path = Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cmd_kernels(args) -> int:
    cfg = _load_config(args)
    params = build_params(cfg)
    nx = cfg.grid["nx"]
    ks = solve_kernels(params, nx)
    out = _outdir(args)
    xs = ks.xs
    ii, jj = np.meshgrid(np.arange(nx + 1), np.arange(nx + 1), indexing="ij")
    mask = jj <= ii
    ii, jj = ii[mask], jj[mask]
    _write_csv(out / "kernels.csv",
               ["x", "y", "K_uu", "K_uv", "K_vu", "K_vv"],
               [xs[ii], xs[jj], ks.K_uu[ii, jj], ks.K_uv[ii, jj],
                ks.K_vu[ii, jj], ks.K_vv[ii, jj]])
    n = params.n
    header = ["x"] + [f"gamma_alpha_{c + 1}" for c in range(n)] \
        + [f"gamma_beta_{c + 1}" for c in range(n)]
    cols = [xs] + [ks.gamma_alpha[:, c] for c in range(n)] \
        + [ks.gamma_beta[:, c] for c in range(n)]
    _write_csv(out / "gains.csv", header, cols)
    print(f"wrote {out / 'kernels.csv'} and {out / 'gains.csv'} "
          f"(residual sup {ks.residual_norm:.3e})")
    return 0


def _cmd_simulate(args) -> int:
    cfg = _load_config(args)
    params = build_params(cfg)
    nx = cfg.grid["nx"]
    ks = solve_kernels(params, nx)
    grid = make_grid(params, nx, time_refine=cfg.grid.get("time_refine", 1))
    factory = build_controller_factory(cfg, params, ks, grid)
    path = sample_brownian(cfg.montecarlo["base_seed"], grid.nt, grid.dt)
    traj = simulate_coupled(params, ks, factory(), path, grid, record_fields=True)
    traj = apply_transform(traj, ks, grid)
    out = _outdir(args)
    n = params.n
    header = ["t"] + [f"X_{c + 1}" for c in range(n)] + ["v_in", "v_bs", "v_eff", "beta0"]
    cols = [traj.times] + [traj.X[:, c] for c in range(n)] \
        + [traj.v_in, traj.v_bs, traj.v_eff, traj.beta0]
    _write_csv(out / "trajectory.csv", header, cols)
    written = [out / "trajectory.csv"]
    if args.fields:
        nt1, nx1 = traj.u_field.shape
        tt = np.repeat(traj.times, nx1)
        xx = np.tile(grid.xs(), nt1)
        _write_csv(out / "fields.csv", ["t", "x", "u", "v", "alpha", "beta"],
                   [tt, xx, traj.u_field.ravel(), traj.v_field.ravel(),
                    traj.alpha_field.ravel(), traj.beta_field.ravel()])
        written.append(out / "fields.csv")
    print("wrote " + ", ".join(str(w) for w in written))
    return 0


def _run_ensemble(cfg: ScenarioConfig, parallelism: int):
    params = build_params(cfg)
    nx = cfg.grid["nx"]
    ks = solve_kernels(params, nx)
    grid = make_grid(params, nx, time_refine=cfg.grid.get("time_refine", 1))
    factory = build_controller_factory(cfg, params, ks, grid)
    weights = build_lq_weights(cfg, params.n) or LqWeights.constant(1.0, 0.1, params.n)
    spec = RunSpec(params=params, ks=ks, grid=grid, controller_factory=factory,
                   plant="coupled", lq_weights=weights, keep_increments=False)
    report = monte_carlo(spec, cfg.montecarlo["n_paths"], cfg.montecarlo["base_seed"],
                         parallelism=parallelism)
    return params, grid, report


def _summary(params, grid, report) -> dict:
    k_h = grid.steps_per_delay
    mean_norm = np.linalg.norm(report.mean_X, axis=1)
    decay = fit_exponential_rate(report.times[k_h:], mean_norm[k_h:])
    viol = int(np.sum(report.var_X[k_h:] < report.v_min[k_h:]
                      - 5 * report.stderr_var[k_h:]))
    cost_mean, cost_se = mean_and_se(report.cost_per_path)
    return {
        "n_paths": report.n_paths,
        "cost_mean": float(cost_mean),
        "cost_se": float(cost_se),
        "decay_rate_fit": decay,
        "floor_violation_count": viol,
        "var_final": float(report.var_X[-1]),
        "var_max": float(np.max(report.var_X)),
    }


def _write_report(out: Path, params, grid, report, name="report.csv") -> None:
    n = params.n
    header = ["t"] + [f"mean_X_{c + 1}" for c in range(n)] \
        + ["var_X", "stderr_var", "v_min"]
    cols = [report.times] + [report.mean_X[:, c] for c in range(n)] \
        + [report.var_X, report.stderr_var, report.v_min]
    _write_csv(out / name, header, cols)


def _write_ensemble(out: Path, params, grid, report) -> None:
    n = params.n
    header = ["t"] + [f"mean_X_{c + 1}" for c in range(n)] \
        + ["var_X", "v_min", "cost_running"]
    cols = [report.times] + [report.mean_X[:, c] for c in range(n)] \
        + [report.var_X, report.v_min, report.cost_running]
    _write_csv(out / "ensemble.csv", header, cols)


def _cmd_montecarlo(args) -> int:
    cfg = _load_config(args)
    params, grid, report = _run_ensemble(cfg, args.parallelism)
    out = _outdir(args)
    _write_report(out, params, grid, report)
    summary = _summary(params, grid, report)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"wrote {out / 'report.csv'} and {out / 'summary.json'}")
    return 0


def _cmd_stabilize(args) -> int:
    args.controller = "stabilizing_feedback"
    cfg = _load_config(args)
    params, grid, report = _run_ensemble(cfg, args.parallelism)
    out = _outdir(args)
    _write_ensemble(out, params, grid, report)
    summary = _summary(params, grid, report)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"wrote {out / 'ensemble.csv'} and {out / 'summary.json'}")
    return 0


def _cmd_lq(args) -> int:
    args.controller = "lq_optimal"
    cfg = _load_config(args)
    params, grid, report = _run_ensemble(cfg, args.parallelism)
    out = _outdir(args)
    _write_ensemble(out, params, grid, report)
    summary = _summary(params, grid, report)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"wrote {out / 'ensemble.csv'} and {out / 'summary.json'}")
    return 0


def _cmd_check(args) -> int:
    cfg = _load_config(args)
    ok = run_check_suite(cfg, quick=args.quick)
    return 0 if ok else 1


def _add_common(sub, mc_flags=True):
    sub.add_argument("--preset", choices=sorted(PRESETS), default="fig1")
    sub.add_argument("--config", help="path to a scenario JSON file")
    sub.add_argument("--grid-nx", "--nx", type=int, dest="grid_nx")
    sub.add_argument("-o", "--output", help="output directory "
                     "(default $SDEPDE_OUTDIR or '.')")
    if mc_flags:
        sub.add_argument("--paths", type=int)
        sub.add_argument("--seed", type=int)
        sub.add_argument("--parallelism", type=int, default=1)
        sub.add_argument("--horizon", type=float)
        sub.add_argument("--qweight", type=float)
        sub.add_argument("--rweight", type=float)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sdepde",
        description="Simulation and boundary control of an SDE driven "
                    "through a transport pair")
    subs = parser.add_subparsers(dest="command", required=True)

    s = subs.add_parser("kernels", help="solve and dump the transformation kernels")
    _add_common(s, mc_flags=False)

    s = subs.add_parser("simulate", help="one closed-loop sample path")
    _add_common(s, mc_flags=False)
    s.add_argument("--seed", type=int)
    s.add_argument("--controller",
                   choices=["open_loop", "stabilizing_feedback", "lq_optimal"])
    s.add_argument("--poles", type=float, nargs="+")
    s.add_argument("--qweight", type=float)
    s.add_argument("--rweight", type=float)
    s.add_argument("--fields", action="store_true",
                   help="also write the space-time field snapshots")

    s = subs.add_parser("stabilize", help="Monte Carlo under pole-placement feedback")
    _add_common(s)
    s.add_argument("--poles", type=float, nargs="+", default=[-1.0])

    s = subs.add_parser("lq", help="Monte Carlo under the optimal feedback")
    _add_common(s)

    s = subs.add_parser("montecarlo", help="Monte Carlo per the configured controller")
    _add_common(s)
    s.add_argument("--poles", type=float, nargs="+")

    s = subs.add_parser("check", help="run the full identity suite")
    _add_common(s, mc_flags=False)
    s.add_argument("--quick", action="store_true")

    args = parser.parse_args(argv)
    handlers = {
        "kernels": _cmd_kernels,
        "simulate": _cmd_simulate,
        "stabilize": _cmd_stabilize,
        "lq": _cmd_lq,
        "montecarlo": _cmd_montecarlo,
        "check": _cmd_check,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
