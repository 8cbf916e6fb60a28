import numpy as np
import pytest
from scipy.linalg import expm

from sdepde.control import FeedbackController, OpenLoopController, stabilizing_gain
from sdepde.core import constant_profile, make_grid, sample_brownian, sample_increment_matrix
from sdepde.kernels import solve_kernels
from sdepde.sim import (SimulationBlowUp, apply_transform, beta_explicit,
                        initial_beta_profile, invert_transform,
                        make_delayed_model, simulate_coupled,
                        simulate_coupled_batch, simulate_delayed_sde,
                        simulate_delayed_sde_batch, transform_matrices)

from conftest import fig1_params
from test_kernels import _zero_kernel_set


# ---------------------------------------------------------------------------
# coupled simulator

def test_decoupled_deterministic_matches_matrix_exponential():
    p = fig1_params(sigma=0.0, M=[[0.0]])
    errs = []
    for nx in (40, 80):
        ks = solve_kernels(p, nx)
        grid = make_grid(p, nx)
        path = sample_brownian(1, grid.nt, grid.dt)
        traj = simulate_coupled(p, ks, OpenLoopController(), path, grid,
                                record_fields=False)
        ref = np.array([expm(p.A * t)[0, 0] * p.X0[0] for t in grid.times()])
        errs.append(np.max(np.abs(traj.X[:, 0] - ref)))
    assert errs[0] / errs[1] > 1.7  # first order in dt
    assert errs[1] < 0.15


def test_open_loop_reference_is_unstable(fig1, fig1_ks64, fig1_grid64):
    p = fig1_params(sigma=0.0)
    path = sample_brownian(1, fig1_grid64.nt, fig1_grid64.dt)
    traj = simulate_coupled(p, fig1_ks64, OpenLoopController(), path, fig1_grid64,
                            record_fields=False)
    assert abs(traj.X[-1, 0]) > abs(p.X0[0])


def test_ensemble_mean_matches_noiseless_run(fig1, fig1_ks64):
    grid = make_grid(fig1, 64)
    script = lambda t: 0.5 * np.sin(t)
    inc = sample_increment_matrix(41, 400, grid.nt, grid.dt)
    from sdepde.control import ScriptedController
    res = simulate_coupled_batch(fig1, fig1_ks64, ScriptedController(script), inc,
                                 grid, record_controls=False)
    p0 = fig1_params(sigma=0.0)
    path = sample_brownian(1, grid.nt, grid.dt)
    ref = simulate_coupled(p0, fig1_ks64, ScriptedController(script), path, grid,
                           record_fields=False)
    mean = res.X[:, :, 0].mean(axis=0)
    se = res.X[:, :, 0].std(axis=0, ddof=1) / np.sqrt(res.X.shape[0])
    assert np.all(np.abs(mean - ref.X[:, 0]) <= 5.0 * np.maximum(se, 1e-12))


def test_recorded_controls_are_consistent(fig1, fig1_ks64, fig1_grid64):
    K = stabilizing_gain(fig1.A, fig1.B, fig1.h, [-1.0])
    path = sample_brownian(9, fig1_grid64.nt, fig1_grid64.dt)
    traj = simulate_coupled(fig1, fig1_ks64, FeedbackController(K), path, fig1_grid64)
    assert np.allclose(traj.v_in, traj.v_bs + traj.v_eff, atol=1e-15)
    # recorded SDE input: beta(t,0) = v(t,0) + gamma_beta(0) X = v(t,0) here
    assert np.array_equal(traj.beta0, traj.v_field[:, 0])


def test_blowup_guard_raises():
    p = fig1_params(A=[[50.0]], sigma=0.0, T=4.0)
    ks = solve_kernels(p, 16)
    grid = make_grid(p, 16)
    path = sample_brownian(1, grid.nt, grid.dt)
    with pytest.raises(SimulationBlowUp):
        simulate_coupled(p, ks, OpenLoopController(), path, grid, record_fields=False)


# ---------------------------------------------------------------------------
# transforms

def test_transform_identity_for_zero_kernels(fig1, fig1_grid64):
    ks = _zero_kernel_set(64)
    path = sample_brownian(2, fig1_grid64.nt, fig1_grid64.dt)
    traj = simulate_coupled(fig1, ks, OpenLoopController(), path, fig1_grid64)
    out = apply_transform(traj, ks, fig1_grid64)
    assert np.array_equal(out.alpha_field, traj.u_field)
    assert np.array_equal(out.beta_field, traj.v_field)
    u, v = invert_transform(out.alpha_field, out.beta_field, traj.X, ks, fig1_grid64)
    assert np.array_equal(u, traj.u_field)
    assert np.array_equal(v, traj.v_field)


@pytest.fixture(scope="module")
def closed_loop_run(fig1, fig1_ks64, fig1_grid64):
    K = stabilizing_gain(fig1.A, fig1.B, fig1.h, [-1.0])
    path = sample_brownian(7, fig1_grid64.nt, fig1_grid64.dt)
    traj = simulate_coupled(fig1, fig1_ks64, FeedbackController(K), path, fig1_grid64)
    return apply_transform(traj, fig1_ks64, fig1_grid64), path


def test_target_boundary_identities(fig1, fig1_ks64, fig1_grid64, closed_loop_run):
    traj, _ = closed_loop_run
    # distal boundary of the transformed field is exactly the effective input
    assert np.max(np.abs(traj.beta_field[:, -1] - traj.v_eff)) < 1e-8
    # proximal boundary: alpha(t,0) = q beta(t,0)
    assert np.max(np.abs(traj.alpha_field[:, 0] - fig1.q * traj.beta_field[:, 0])) < 1e-12


def test_transform_round_trip(fig1, fig1_ks64, fig1_grid64, closed_loop_run):
    traj, _ = closed_loop_run
    u, v = invert_transform(traj.alpha_field, traj.beta_field, traj.X,
                            fig1_ks64, fig1_grid64)
    assert np.max(np.abs(u - traj.u_field)) < 1e-8
    assert np.max(np.abs(v - traj.v_field)) < 1e-8


def test_single_neumann_step_matches_hand_quadrature(fig1_grid64):
    # one fixed-point iteration from the base term: u1 = b_u - TK_uu b_u - TK_uv b_v
    nx = 64
    ks = _zero_kernel_set(nx)
    rng = np.random.default_rng(3)
    small = 0.01 * rng.normal(size=(nx + 1, nx + 1))
    object.__setattr__(ks, "K_uu", np.tril(small))
    object.__setattr__(ks, "K_uv", np.tril(0.5 * small))
    TKuu, TKuv, TKvu, TKvv = transform_matrices(ks, fig1_grid64)
    alpha = rng.normal(size=nx + 1)
    beta = rng.normal(size=nx + 1)
    X = np.array([0.7])
    bu = alpha - X @ ks.gamma_alpha.T
    bv = beta - X @ ks.gamma_beta.T
    u1_hand = bu - bu @ TKuu.T - bv @ TKuv.T
    u_fix, v_fix = invert_transform(alpha, beta, X, ks, fig1_grid64)
    # kernels are O(1e-2): the converged solution differs from the one-step
    # Neumann correction at second order in the kernel size
    assert np.max(np.abs(u_fix - u1_hand)) < 5e-4
    assert np.max(np.abs(u_fix - bu)) > 1e-3  # the correction itself is visible


def test_invert_transform_single_profile(fig1_ks64, fig1_grid64):
    rng = np.random.default_rng(5)
    u = rng.normal(size=65)
    v = rng.normal(size=65)
    X = np.array([1.2])
    TKuu, TKuv, TKvu, TKvv = transform_matrices(fig1_ks64, fig1_grid64)
    alpha = u + u @ TKuu.T + v @ TKuv.T + X @ fig1_ks64.gamma_alpha.T
    beta = v + u @ TKvu.T + v @ TKvv.T + X @ fig1_ks64.gamma_beta.T
    u2, v2 = invert_transform(alpha, beta, X, fig1_ks64, fig1_grid64)
    assert u2.shape == (65,)
    assert np.max(np.abs(u2 - u)) < 1e-9
    assert np.max(np.abs(v2 - v)) < 1e-9


# ---------------------------------------------------------------------------
# explicit transport solution

def test_beta_explicit_at_actuated_boundary(fig1, fig1_ks64, fig1_grid64):
    path = sample_brownian(3, fig1_grid64.nt, fig1_grid64.dt)
    v_hist = lambda s: 0.3 * np.cos(2 * s)
    t = 1.5
    val = beta_explicit(fig1, fig1_ks64, v_hist, path, t, 1.0)
    assert val == pytest.approx(v_hist(t))  # empty window at x = 1


def test_beta_explicit_pure_delay_for_zero_gain(quiet_params, quiet_ks32):
    grid = make_grid(quiet_params, 32)
    path = sample_brownian(3, grid.nt, grid.dt)
    v_hist = lambda s: np.sin(s)
    t, x = 1.0, 0.25
    val = beta_explicit(quiet_params, quiet_ks32, v_hist, path, t, x)
    assert val == pytest.approx(v_hist(t - (1 - x) / quiet_params.mu))


def test_beta_explicit_cross_validates_transform(fig1):
    errs = []
    for nx in (32, 128):
        ks = solve_kernels(fig1, nx)
        grid = make_grid(fig1, nx)
        K = stabilizing_gain(fig1.A, fig1.B, fig1.h, [-1.0])
        path = sample_brownian(12, grid.nt, grid.dt)
        traj = apply_transform(
            simulate_coupled(fig1, ks, FeedbackController(K), path, grid), ks, grid)
        hist_prof = initial_beta_profile(fig1, ks, grid)
        xs = grid.xs()

        def v_hist(s, _traj=traj, _xs=xs, _prof=hist_prof):
            if s < 0:
                return float(np.interp(1.0 + fig1.mu * s, _xs, _prof))
            return float(_traj.v_eff[grid.index_of_time(round(s / grid.dt) * grid.dt)])

        worst = 0.0
        for (t, x) in [(1.0, 0.0), (2.0, 0.5), (3.0, 0.25)]:
            k = grid.index_of_time(t)
            i = int(round(x / grid.dx))
            val = beta_explicit(fig1, ks, v_hist, path, t, x)
            worst = max(worst, abs(val - traj.beta_field[k, i]))
        errs.append(worst)
    scale = 0.6  # typical |beta| on the reference run
    assert errs[1] < 0.05 * scale or errs[1] < 0.6 * errs[0]
    assert errs[1] < errs[0]


# ---------------------------------------------------------------------------
# delayed SDE

def test_delayed_sde_deterministic_limit(quiet_params, quiet_ks32):
    p = fig1_params(eta_plus=constant_profile(0.0), eta_minus=constant_profile(0.0),
                    M=[[0.0]], sigma=0.0)
    ks = solve_kernels(p, 32)
    errs = []
    for refine in (1, 2):
        grid = make_grid(p, 32, time_refine=refine)
        model = make_delayed_model(p, ks, grid)
        path = sample_brownian(1, grid.nt, grid.dt)
        traj = simulate_delayed_sde(model, OpenLoopController(), path, grid)
        ref = np.array([expm(p.A * t)[0, 0] * p.X0[0] for t in grid.times()])
        errs.append(np.max(np.abs(traj.X[:, 0] - ref)))
    assert errs[0] / errs[1] > 1.7
    assert errs[1] < 0.01 * abs(p.X0[0]) * float(expm(p.A * p.T)[0, 0])


def test_reduction_equivalence_under_refinement(fig1):
    # joint refinement, nx doubled and dt quartered; the first level starts
    # at cfl_mu = 1/2 so no level enjoys exact lattice transport
    K = stabilizing_gain(fig1.A, fig1.B, fig1.h, [-1.0])
    rels = []
    for lvl, nx in enumerate((32, 64, 128)):
        ks = solve_kernels(fig1, nx)
        grid = make_grid(fig1, nx, time_refine=2 ** (lvl + 1))
        inc = sample_increment_matrix(88, 4, grid.nt, grid.dt)
        res_c = simulate_coupled_batch(fig1, ks, FeedbackController(K), inc, grid,
                                       record_controls=False)
        model = make_delayed_model(fig1, ks, grid)
        res_d = simulate_delayed_sde_batch(model, FeedbackController(K), inc, grid)
        k_h = grid.steps_per_delay
        diff = res_c.X[:, k_h:, 0] - res_d.X[:, k_h:, 0]
        rels.append(float(np.sqrt(np.mean(diff ** 2))
                          / np.sqrt(np.mean(res_c.X[:, k_h:, 0] ** 2))))
    assert rels[0] > rels[1] > rels[2]
    assert rels[2] < 0.05


def test_random_drift_window_is_mean_zero(fig1, fig1_ks64):
    grid = make_grid(fig1, 64)
    model = make_delayed_model(fig1, fig1_ks64, grid)
    inc = sample_increment_matrix(55, 1500, grid.nt, grid.dt)
    res = simulate_delayed_sde_batch(model, OpenLoopController(), inc, grid)
    # beta0 - V_eff(t-h) is the window Ito sum feeding r(t): a martingale term
    m = grid.steps_per_delay
    hist = model.initial_control_history
    for k in (m // 2, m, grid.nt // 2, grid.nt):
        v_del = res.v_eff[:, k - m] if k >= m else np.full(inc.shape[0], hist((k - m) * grid.dt))
        window = res.beta0[:, k] - v_del
        mean = window.mean()
        se = window.std(ddof=1) / np.sqrt(len(window))
        assert abs(mean) <= 5 * se + 1e-12


def test_adaptedness_by_splicing(fig1, fig1_ks64):
    grid = make_grid(fig1, 32)
    K = stabilizing_gain(fig1.A, fig1.B, fig1.h, [-1.0])
    inc_a = sample_increment_matrix(66, 2, grid.nt, grid.dt)
    inc_b = inc_a.copy()
    k_cut = grid.nt // 2
    inc_b[:, k_cut:] = 123.456  # absurd future increments
    ks = solve_kernels(fig1, 32)
    for runner in ("coupled", "delayed"):
        if runner == "coupled":
            ra = simulate_coupled_batch(fig1, ks, FeedbackController(K), inc_a, grid)
            rb = simulate_coupled_batch(fig1, ks, FeedbackController(K), inc_b, grid)
        else:
            model = make_delayed_model(fig1, ks, grid)
            ra = simulate_delayed_sde_batch(model, FeedbackController(K), inc_a, grid)
            rb = simulate_delayed_sde_batch(model, FeedbackController(K), inc_b, grid)
        # every recorded quantity is bit-identical through the cut
        assert np.array_equal(ra.X[:, :k_cut + 1], rb.X[:, :k_cut + 1])
        assert np.array_equal(ra.v_eff[:, :k_cut + 1], rb.v_eff[:, :k_cut + 1])


def test_lq_adaptedness_by_splicing(fig1, fig1_ks64):
    from scipy.linalg import expm as _expm
    from sdepde.control import LqController, LqWeights, solve_riccati
    from sdepde.gains import g_matrix, gamma_matrix
    grid = make_grid(fig1, 32)
    w = LqWeights.constant(1.0, 0.1, 1)
    ks = solve_kernels(fig1, 32)
    Bbar = _expm(-fig1.A * fig1.h) @ fig1.B
    lq = solve_riccati(w, fig1.A, Bbar, fig1.T - fig1.h, grid.dt,
                       g_fn=lambda u: g_matrix(fig1, ks, u),
                       gamma_fn=lambda u: gamma_matrix(fig1, ks, u), h=fig1.h)
    inc_a = sample_increment_matrix(67, 2, grid.nt, grid.dt)
    inc_b = inc_a.copy()
    k_cut = grid.nt // 2
    inc_b[:, k_cut:] *= -3.7
    model = make_delayed_model(fig1, ks, grid)
    ra = simulate_delayed_sde_batch(model, LqController(lq, fig1, ks), inc_a, grid)
    rb = simulate_delayed_sde_batch(model, LqController(lq, fig1, ks), inc_b, grid)
    assert np.array_equal(ra.v_eff[:, :k_cut + 1], rb.v_eff[:, :k_cut + 1])
    assert np.array_equal(ra.X[:, :k_cut + 1], rb.X[:, :k_cut + 1])


def test_target_dynamics_residual_contracts(fig1):
    """Transformed fields satisfy the discrete target transport
    d beta - mu beta_x dt = gamma_beta sigma dW at first order."""
    K = stabilizing_gain(fig1.A, fig1.B, fig1.h, [-1.0])
    resids = []
    for nx in (32, 64, 128):
        ks = solve_kernels(fig1, nx)
        grid = make_grid(fig1, nx)
        path = sample_brownian(21, grid.nt, grid.dt)
        traj = apply_transform(
            simulate_coupled(fig1, ks, FeedbackController(K), path, grid), ks, grid)
        beta = traj.beta_field
        gb = ks.gamma_beta[:, 0]
        sig = 0.6
        r = (beta[1:, 1:-1] - beta[:-1, 1:-1]
             - grid.cfl_mu * (beta[:-1, 2:] - beta[:-1, 1:-1])
             - np.outer(path.increments, gb[1:-1]) * sig)
        resids.append(np.mean(np.abs(r)))
    assert resids[0] / resids[1] > 2.0
    assert resids[1] / resids[2] > 2.0


def test_delayed_rejects_short_increments(fig1, fig1_ks64, fig1_grid64):
    model = make_delayed_model(fig1, fig1_ks64, fig1_grid64)
    with pytest.raises(ValueError):
        simulate_delayed_sde_batch(model, OpenLoopController(),
                                   np.zeros((2, 10)), fig1_grid64)
