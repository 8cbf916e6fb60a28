"""Identity suite behind the ``check`` subcommand: every analytic relation
the toolkit relies on, verified numerically on a configured scenario with one
machine-readable line per check."""

from __future__ import annotations

import sys

import numpy as np

from . import analysis
from .analysis import CheckOutcome, RunSpec, monte_carlo
from .config import ScenarioConfig, build_controller_factory, build_params
from .control import LqWeights
from .core import (ito_isometry_check, make_grid, sample_brownian,
                   sample_increment_matrix)
from .kernels import kernel_residuals, solve_kernels
from .sim import make_delayed_model, simulate_coupled_batch, simulate_delayed_sde_batch

__all__ = ["run_check_suite"]

_KERNEL_PDE_BOUND = 1e-2
_KERNEL_BOUNDARY_BOUND = 1e-8
_REDUCTION_REL_BOUND = 0.05


def _emit(outcome: CheckOutcome, stream) -> None:
    status = "PASS" if outcome.passed else "FAIL"
    print(f"CHECK {outcome.name} {status} value={outcome.value:.6e} "
          f"bound={outcome.bound:.6e}", file=stream)


def _kernel_checks(params, nx: int) -> list[CheckOutcome]:
    ks_f = solve_kernels(params, nx)
    ks_c = solve_kernels(params, nx // 2)
    rep_f = kernel_residuals(ks_f, params)
    rep_c = kernel_residuals(ks_c, params)
    sup_f = max(max(rep_f.pde_max.values()), max(rep_f.gamma_max.values()))
    sup_c = max(max(rep_c.pde_max.values()), max(rep_c.gamma_max.values()))
    bnd = max(rep_f.boundary_alpha_max, rep_f.boundary_beta_max)
    ratio = sup_c / sup_f if sup_f > 0 else np.inf
    return [
        CheckOutcome("kernel_residual_sup", sup_f <= _KERNEL_PDE_BOUND,
                     sup_f, _KERNEL_PDE_BOUND),
        CheckOutcome("kernel_boundary_identity", bnd <= _KERNEL_BOUNDARY_BOUND,
                     bnd, _KERNEL_BOUNDARY_BOUND),
        CheckOutcome("kernel_residual_refinement", ratio >= 1.5, ratio, 1.5,
                     detail="coarse/fine sup residual ratio"),
    ]


def _reduction_check(params, cfg, n_seeds: int, nx_levels) -> CheckOutcome:
    rels = []
    for nx in nx_levels:
        ks = solve_kernels(params, nx)
        grid = make_grid(params, nx)
        factory = build_controller_factory(cfg, params, ks, grid)
        inc = sample_increment_matrix(424243, n_seeds, grid.nt, grid.dt)
        res_c = simulate_coupled_batch(params, ks, factory(), inc, grid,
                                       record_fields=False, record_controls=False)
        model = make_delayed_model(params, ks, grid)
        res_d = simulate_delayed_sde_batch(model, factory(), inc, grid)
        k_h = grid.steps_per_delay
        diff = res_c.X[:, k_h:, :] - res_d.X[:, k_h:, :]
        rms = float(np.sqrt(np.mean(np.sum(diff ** 2, axis=-1))))
        mag = float(np.sqrt(np.mean(np.sum(res_c.X[:, k_h:, :] ** 2, axis=-1))))
        rels.append(rms / mag)
    monotone = all(rels[i + 1] < rels[i] or rels[i + 1] < 1e-10
                   for i in range(len(rels) - 1))
    final_ok = rels[-1] <= _REDUCTION_REL_BOUND
    return CheckOutcome("reduction_equivalence", monotone and final_ok,
                        rels[-1], _REDUCTION_REL_BOUND,
                        detail="relative RMS per level: "
                               + ", ".join(f"{r:.4f}" for r in rels))


def _ito_checks(n_paths: int) -> list[CheckOutcome]:
    out = []
    cases = [
        (lambda s: 1.0, lambda s: 1.0, 1.0, "unit"),
        (lambda s: 1.0, lambda s: s, 1.0, "linear"),
        (lambda s: np.exp(s), lambda s: np.exp(-s), 2.0, "exp_pair"),
    ]
    for f1, f2, t, label in cases:
        nt = 400
        dt = t / nt
        paths = [sample_brownian(90000 + i, nt, dt) for i in range(n_paths)]
        est, ref = ito_isometry_check(f1, f2, paths, t)
        prods = []
        k_t = nt
        ts = np.arange(k_t) * dt
        w1 = np.array([f1(s) for s in ts])
        w2 = np.array([f2(s) for s in ts])
        for p in paths:
            prods.append(float(w1 @ p.increments) * float(w2 @ p.increments))
        se = float(np.std(prods, ddof=1) / np.sqrt(n_paths))
        out.append(CheckOutcome(f"ito_isometry_{label}", abs(est - ref) <= 5 * se,
                                abs(est - ref), 5 * se))
    return out


def _statistical_checks(params, ks, grid, factory, n_paths: int) -> list[CheckOutcome]:
    spec_c = RunSpec(params=params, ks=ks, grid=grid, controller_factory=factory,
                     plant="delayed")
    grid_f = make_grid(params, grid.nx, time_refine=2)
    spec_f = RunSpec(params=params, ks=ks, grid=grid_f, controller_factory=factory,
                     plant="delayed")
    rep_c = monte_carlo(spec_c, n_paths, base_seed=510)
    rep_f = monte_carlo(spec_f, n_paths, base_seed=511)
    h, T = params.h, params.T
    t_link = [h, round((T + h) / 2 / grid.dt) * grid.dt, T]
    t_steps = [T / 4, T / 2, 3 * T / 4]
    out = []
    for fn, order in ((analysis.link_formula_stats, 1),
                      (analysis.predictor_residual_stats, 2),
                      (analysis.shifted_predictor_residual_stats, 2)):
        tc = t_link if order == 1 else t_steps
        for sc, sf in zip(fn(rep_c, tc), fn(rep_f, tc)):
            out.append(analysis.richardson_stat(sc, sf, order).outcome(5.0))
    out.extend(analysis.variance_decomposition_check(rep_c, [h, T / 2, T]))
    out.extend(analysis.independence_split_check(rep_c, [T / 2]))
    viol = int(np.sum(rep_c.var_X[grid.steps_per_delay:]
                      < rep_c.v_min[grid.steps_per_delay:]
                      - 5 * rep_c.stderr_var[grid.steps_per_delay:]))
    out.append(CheckOutcome("variance_floor_lower_bound", viol == 0, float(viol), 0.0,
                            detail="count of floor violations beyond 5 se"))
    weights = LqWeights.constant(1.0, 0.1, params.n)
    lhs, rhs, se = analysis.cost_decomposition_check(rep_c, weights)
    out.append(CheckOutcome("cost_rewrite_balance", abs(lhs - rhs) <= 5 * se,
                            abs(lhs - rhs), 5 * se,
                            detail=f"lhs={lhs:.5f} rhs={rhs:.5f}"))
    return out


def run_check_suite(cfg: ScenarioConfig, quick: bool = False, stream=None) -> bool:
    """Run every identity check for the configured scenario; print one
    machine-readable line per check and return overall success."""
    stream = stream or sys.stdout
    params = build_params(cfg)
    nx = cfg.grid["nx"] if not quick else min(cfg.grid["nx"], 100)
    n_paths = 1500 if quick else 10000
    n_seeds = 8 if quick else 32
    nx_levels = (max(nx // 2, 25), nx) if quick else (50, 100, 200)

    outcomes: list[CheckOutcome] = []
    outcomes.extend(_kernel_checks(params, nx))

    ks = solve_kernels(params, nx)
    grid = make_grid(params, nx)
    factory = build_controller_factory(cfg, params, ks, grid)
    outcomes.append(_reduction_check(params, cfg, n_seeds, nx_levels))
    outcomes.extend(_ito_checks(800 if quick else 4000))
    outcomes.extend(_statistical_checks(params, ks, grid, factory,
                                        n_paths=n_paths))
    ok = True
    for o in outcomes:
        _emit(o, stream)
        ok = ok and o.passed
    print(f"CHECK suite {'PASS' if ok else 'FAIL'} "
          f"({sum(o.passed for o in outcomes)}/{len(outcomes)})", file=stream)
    return ok
