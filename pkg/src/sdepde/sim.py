"""Path-wise simulation of the coupled transport/SDE system, its delayed-SDE
reduction, and the forward/inverse Volterra transforms connecting them.

The coupled stepper is first-order upwind transport with explicit source
coupling plus Euler-Maruyama for the SDE.  The distal boundary value
v(t, 1) = rho u(t, 1) + V_BS(t) + V_eff(t) is closed implicitly in the single
unknown v(t, 1) (it appears inside the trapezoid integral of V_BS), so the
transformed boundary identity beta(t, 1) = V_eff(t) holds to rounding on the
discrete lattice.

Both simulators advance whole batches of paths at once; a single path is the
batch-of-one special case.  All stochastic window sums are causal (left-point
Ito) so recorded values never depend on later increments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .control import Controller, ScriptedController, SimContext, _causal_window_sum
from .core import BrownianPath, SpaceTimeGrid, SystemParams, Trajectory
from .kernels import KernelSet

__all__ = [
    "SimulationBlowUp",
    "DelayedSdeModel",
    "make_delayed_model",
    "simulate_coupled",
    "simulate_coupled_batch",
    "simulate_delayed_sde",
    "simulate_delayed_sde_batch",
    "apply_transform",
    "invert_transform",
    "beta_explicit",
    "transform_matrices",
    "initial_beta_profile",
    "BatchResult",
]

_BLOWUP_LIMIT = 1e12
_BLOWUP_CHECK_EVERY = 16


class SimulationBlowUp(RuntimeError):
    """A state norm exceeded the blow-up guard during time stepping."""

    def __init__(self, step: int, norm: float):
        super().__init__(f"state norm {norm:.3e} exceeded {_BLOWUP_LIMIT:.0e} at step {step}")
        self.step = step
        self.norm = norm


@dataclass(frozen=True)
class DelayedSdeModel:
    """Input-delayed SDE equivalent to the coupled system:

    dX = (A X + B V_eff(t-h) + r(t)) dt + sigma(t) dW,
    r(t) = B * window Ito sum of gamma_beta(mu (t-s)) sigma(s) dW_s,

    with the pre-zero control history V_eff(s) = beta(0, 1 + mu s) derived
    from the transformed initial data, never user-supplied.
    """

    params: SystemParams
    ks: KernelSet
    initial_control_history: Callable[[float], float]

    @property
    def h(self) -> float:
        return self.params.h


def _trap_weights(nx: int, dx: float) -> np.ndarray:
    w = np.full(nx + 1, dx)
    w[0] = w[-1] = dx / 2.0
    return w


def transform_matrices(ks: KernelSet, grid: SpaceTimeGrid):
    """Lower-triangular trapezoid operators T*K for the Volterra integrals.

    Row i integrates over [0, x_i]: weights dx with halved endpoints (empty
    for i = 0).  Returns the four kernel-weighted matrices.
    """
    if ks.grid_nx != grid.nx:
        raise ValueError("kernel grid and simulation grid sizes differ")
    nx, dx = grid.nx, grid.dx
    T = np.zeros((nx + 1, nx + 1))
    for i in range(1, nx + 1):
        T[i, : i + 1] = dx
        T[i, 0] = dx / 2.0
        T[i, i] = dx / 2.0
    return (T * ks.K_uu, T * ks.K_uv, T * ks.K_vu, T * ks.K_vv)


def initial_beta_profile(params: SystemParams, ks: KernelSet, grid: SpaceTimeGrid) -> np.ndarray:
    """beta(0, x) on the grid nodes from the initial data (proximal boundary
    of u enforced), used as the pre-zero control history."""
    xs = grid.xs()
    u0 = np.array([params.u0(x) for x in xs])
    v0 = np.array([params.v0(x) for x in xs])
    u0[0] = params.q * v0[0] + float(params.M[0] @ params.X0)
    _, _, TKvu, TKvv = transform_matrices(ks, grid)
    return v0 + TKvu @ u0 + TKvv @ v0 + ks.gamma_beta @ params.X0


def make_delayed_model(params: SystemParams, ks: KernelSet, grid: SpaceTimeGrid) -> DelayedSdeModel:
    beta0 = initial_beta_profile(params, ks, grid)
    xs = grid.xs()
    mu = params.mu

    def history(s: float) -> float:
        return float(np.interp(1.0 + mu * s, xs, beta0))

    return DelayedSdeModel(params=params, ks=ks, initial_control_history=history)


@dataclass
class BatchResult:
    """Ensemble records from one batch simulation; leading axis is the path."""

    times: np.ndarray
    X: np.ndarray                      # (batch, nt+1, n)
    v_eff: np.ndarray                  # (batch, nt+1)
    v_bs: np.ndarray | None = None
    v_in: np.ndarray | None = None
    beta0: np.ndarray | None = None
    u_field: np.ndarray | None = None  # (batch, nt+1, nx+1)
    v_field: np.ndarray | None = None

    def trajectory(self, i: int = 0) -> Trajectory:
        pick = lambda a: None if a is None else a[i]
        return Trajectory(
            times=self.times, X=self.X[i],
            u_field=pick(self.u_field), v_field=pick(self.v_field),
            v_in=pick(self.v_in), v_bs=pick(self.v_bs), v_eff=self.v_eff[i],
            beta0=pick(self.beta0),
        )


def _check_blowup(step: int, *arrays: np.ndarray) -> None:
    worst = max(float(np.max(np.abs(a))) for a in arrays)
    if not np.isfinite(worst) or worst > _BLOWUP_LIMIT:
        raise SimulationBlowUp(step, worst)


def simulate_coupled_batch(
    params: SystemParams,
    ks: KernelSet,
    controller: Controller,
    increments: np.ndarray,
    grid: SpaceTimeGrid,
    record_fields: bool = False,
    record_controls: bool = True,
) -> BatchResult:
    """Advance a batch of coupled-system paths under a shared controller.

    ``increments`` is (batch, nt).  The controller is bound to this batch and
    must be a fresh instance (its predictor buffer is stateful).
    """
    batch, nt = increments.shape
    if nt < grid.nt:
        raise ValueError("increment array shorter than the grid")
    nt = grid.nt
    n = params.n
    xs = grid.xs()
    dt, dx = grid.dt, grid.dx
    cl, cm = grid.cfl_lambda, grid.cfl_mu
    eta_p = np.array([params.eta_plus(x) for x in xs])
    eta_m = np.array([params.eta_minus(x) for x in xs])
    sigma_t = np.stack([params.sigma_at(k * dt) for k in range(nt + 1)])
    A, Bcol, Mrow = params.A, params.B[:, 0], params.M[0]
    q, rho = params.q, params.rho

    # fields are stored transposed, (nx+1, batch): the interior updates then
    # run on contiguous blocks, which is several times faster than slicing
    # along the path axis
    u = np.tile(np.array([params.u0(x) for x in xs])[:, None], (1, batch))
    v = np.tile(np.array([params.v0(x) for x in xs])[:, None], (1, batch))
    X = np.tile(params.X0, (batch, 1))
    u[0] = q * v[0] + X @ Mrow

    beta0_prof = initial_beta_profile(params, ks, grid)
    history = lambda s: float(np.interp(1.0 + params.mu * s, xs, beta0_prof))
    ctx = SimContext(params, grid, increments[:, :nt], history, sigma_t)
    controller.bind(ctx, batch)

    # boundary closure weights: v(t,1) appears in the K_vv trapezoid term
    wq = _trap_weights(grid.nx, dx)
    wu = wq * ks.K_vu[-1]
    wv = wq * ks.K_vv[-1]
    wv_last = wv[-1]
    gb1 = ks.gamma_beta[-1]

    times = grid.times()
    Xrec = np.empty((batch, nt + 1, n))
    veff_rec = np.empty((batch, nt + 1))
    vbs_rec = np.empty((batch, nt + 1)) if record_controls else None
    vin_rec = np.empty((batch, nt + 1)) if record_controls else None
    beta0_rec = np.empty((batch, nt + 1)) if record_controls else None
    ufield = np.empty((batch, nt + 1, grid.nx + 1)) if record_fields else None
    vfield = np.empty((batch, nt + 1, grid.nx + 1)) if record_fields else None

    gb0 = ks.gamma_beta[0]
    # preallocated scratch; the updates run as out= passes because chained
    # temporaries of this size thrash the allocator
    un = np.empty_like(u)
    vn = np.empty_like(v)
    scr = np.empty((grid.nx, batch))
    dt_eta_p = dt * eta_p[:, None]
    dt_eta_m = dt * eta_m[:, None]
    one_minus_cl = 1.0 - cl
    one_minus_cm = 1.0 - cm
    for k in range(nt + 1):
        veff = controller.v_eff(k, X)
        rhs = veff - X @ gb1 - wu @ u - wv[:-1] @ v[:-1]
        v[-1] = rhs / (1.0 + wv_last)
        Xrec[:, k, :] = X
        veff_rec[:, k] = veff
        if record_controls:
            vbs = v[-1] - rho * u[-1] - veff
            vbs_rec[:, k] = vbs
            vin_rec[:, k] = vbs + veff
            beta0_rec[:, k] = v[0] + X @ gb0
        if record_fields:
            ufield[:, k, :] = u.T
            vfield[:, k, :] = v.T
        if k == nt:
            break
        Xn = X + dt * (X @ A.T + np.outer(v[0], Bcol)) \
            + sigma_t[k] * increments[:, k, None]
        # un[1:] = (1-cl) u[1:] + cl u[:-1] + dt eta+ v[1:]
        np.multiply(u[1:], one_minus_cl, out=un[1:])
        np.multiply(u[:-1], cl, out=scr)
        un[1:] += scr
        np.multiply(v[1:], dt_eta_p[1:], out=scr)
        un[1:] += scr
        # vn[:-1] = (1-cm) v[:-1] + cm v[1:] + dt eta- u[:-1]
        np.multiply(v[:-1], one_minus_cm, out=vn[:-1])
        np.multiply(v[1:], cm, out=scr)
        vn[:-1] += scr
        np.multiply(u[:-1], dt_eta_m[:-1], out=scr)
        vn[:-1] += scr
        vn[-1] = 0.0  # closed at the next step
        un[0] = q * vn[0] + Xn @ Mrow
        u, un = un, u
        v, vn = vn, v
        X = Xn
        if (k + 1) % _BLOWUP_CHECK_EVERY == 0:
            _check_blowup(k + 1, X, u, v)

    return BatchResult(times=times, X=Xrec, v_eff=veff_rec, v_bs=vbs_rec,
                       v_in=vin_rec, beta0=beta0_rec, u_field=ufield, v_field=vfield)


def simulate_coupled(
    params: SystemParams,
    ks: KernelSet,
    ctrl: Controller,
    path: BrownianPath,
    grid: SpaceTimeGrid,
    record_fields: bool = True,
) -> Trajectory:
    """Single-path coupled simulation (batch of one)."""
    if abs(path.dt - grid.dt) > 1e-12 * grid.dt:
        raise ValueError("path and grid time steps differ")
    res = simulate_coupled_batch(params, ks, ctrl, path.increments[None, :], grid,
                                 record_fields=record_fields)
    return res.trajectory(0)


def simulate_delayed_sde_batch(
    model: DelayedSdeModel,
    v_eff: Union[Controller, np.ndarray, Callable[[float], float]],
    increments: np.ndarray,
    grid: SpaceTimeGrid,
) -> BatchResult:
    """Euler-Maruyama for the reduced delayed SDE on a batch of paths.

    ``v_eff`` may be a controller (closed loop through the predictor) or a
    deterministic signal.  The random drift r(t) is a causal window sum over
    the same increments that drive the state, truncated at time zero.
    """
    params, ks = model.params, model.ks
    batch, nt_inc = increments.shape
    nt = grid.nt
    if nt_inc < nt:
        raise ValueError("increment array shorter than the grid")
    m = grid.steps_per_delay
    if abs(m * grid.dt - model.h) > 1e-9 * model.h:
        raise ValueError("the delay h must be an integer number of grid steps")
    n = params.n
    dt = grid.dt
    sigma_t = np.stack([params.sigma_at(k * dt) for k in range(nt + 1)])
    A, Bcol = params.A, params.B[:, 0]

    controller = v_eff if isinstance(v_eff, Controller) else ScriptedController(v_eff)
    ctx = SimContext(params, grid, increments[:, :nt], model.initial_control_history, sigma_t)
    controller.bind(ctx, batch)

    # scalar window sum gamma_beta(mu l dt) sigma(t_{k-l}) dW_{k-l}
    lag_rows = np.stack([
        ks.gamma_beta_at(min(params.mu * l * dt, 1.0))[None, :] for l in range(m + 1)
    ])  # (m+1, 1, n)
    noise_in = _causal_window_sum(lag_rows, sigma_t, increments[:, :nt], m)[:, :, 0]

    times = grid.times()
    Xrec = np.empty((batch, nt + 1, n))
    veff_rec = np.empty((batch, nt + 1))
    beta0_rec = np.empty((batch, nt + 1))
    X = np.tile(params.X0, (batch, 1))
    hist = model.initial_control_history
    for k in range(nt + 1):
        veff_rec[:, k] = controller.v_eff(k, X)
        Xrec[:, k, :] = X
        if k >= m:
            v_del = veff_rec[:, k - m]
        else:
            v_del = np.full(batch, hist((k - m) * dt))
        beta0_rec[:, k] = v_del + noise_in[:, k]
        if k == nt:
            break
        drift = X @ A.T + np.outer(beta0_rec[:, k], Bcol)
        X = X + dt * drift + sigma_t[k] * increments[:, k, None]
        if (k + 1) % _BLOWUP_CHECK_EVERY == 0:
            _check_blowup(k + 1, X)

    return BatchResult(times=times, X=Xrec, v_eff=veff_rec, beta0=beta0_rec)


def simulate_delayed_sde(
    model: DelayedSdeModel,
    v_eff: Union[Controller, np.ndarray, Callable[[float], float]],
    path: BrownianPath,
    grid: SpaceTimeGrid,
) -> Trajectory:
    """Single-path delayed-SDE simulation (X, V_eff and the SDE input only)."""
    res = simulate_delayed_sde_batch(model, v_eff, path.increments[None, :], grid)
    return res.trajectory(0)


def apply_transform(traj: Trajectory, ks: KernelSet, grid: SpaceTimeGrid) -> Trajectory:
    """Fill alpha/beta fields: node-wise trapezoid of the Volterra integral
    plus the gain term gamma(x) X(t)."""
    if traj.u_field is None or traj.v_field is None:
        raise ValueError("trajectory must carry u and v fields")
    TKuu, TKuv, TKvu, TKvv = transform_matrices(ks, grid)
    U = np.atleast_2d(traj.u_field)
    V = np.atleast_2d(traj.v_field)
    X = np.atleast_2d(traj.X)
    alpha = U + U @ TKuu.T + V @ TKuv.T + X @ ks.gamma_alpha.T
    beta = V + U @ TKvu.T + V @ TKvv.T + X @ ks.gamma_beta.T
    return Trajectory(
        times=traj.times, X=traj.X, u_field=traj.u_field, v_field=traj.v_field,
        v_in=traj.v_in, v_bs=traj.v_bs, v_eff=traj.v_eff,
        alpha_field=alpha, beta_field=beta, beta0=traj.beta0,
    )


def invert_transform(
    alpha_field: np.ndarray,
    beta_field: np.ndarray,
    X: np.ndarray,
    ks: KernelSet,
    grid: SpaceTimeGrid,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> tuple[np.ndarray, np.ndarray]:
    """Recover (u, v) from (alpha, beta, X) by Neumann fixed point.

    The Volterra structure guarantees unconditional convergence; hitting
    ``max_iter`` signals a grid inconsistency and raises.
    """
    TKuu, TKuv, TKvu, TKvv = transform_matrices(ks, grid)
    alpha2 = np.atleast_2d(alpha_field)
    beta2 = np.atleast_2d(beta_field)
    X2 = np.atleast_2d(X)
    base_u = alpha2 - X2 @ ks.gamma_alpha.T
    base_v = beta2 - X2 @ ks.gamma_beta.T
    u, v = base_u.copy(), base_v.copy()
    for _ in range(max_iter):
        un = base_u - u @ TKuu.T - v @ TKuv.T
        vn = base_v - u @ TKvu.T - v @ TKvv.T
        change = max(float(np.max(np.abs(un - u))), float(np.max(np.abs(vn - v))))
        u, v = un, vn
        if change < tol:
            break
    else:
        raise RuntimeError("inverse transform fixed point did not converge "
                           "(grids of the kernel set and the fields disagree?)")
    if np.asarray(alpha_field).ndim == 1:
        return u[0], v[0]
    return u, v


def beta_explicit(
    params: SystemParams,
    ks: KernelSet,
    v_eff_history: Callable[[float], float],
    path: BrownianPath,
    t: float,
    x: float,
) -> float:
    """Characteristic solution of the transformed v-equation:

    beta(t, x) = V_eff(t - (1-x)/mu)
                 + int_{t-(1-x)/mu}^{t} gamma_beta(x + mu (t-s)) sigma(s) dW_s

    with a left-point Ito sum on the path grid.  ``v_eff_history`` must cover
    [-h, t] (negative arguments = initial history).
    """
    mu = params.mu
    lag = (1.0 - x) / mu
    if t < lag - 1e-12:
        raise ValueError("beta_explicit needs t >= (1-x)/mu")
    dt = path.dt
    k_t = int(round(t / dt))
    k_0 = max(int(round((t - lag) / dt)), 0)
    val = float(v_eff_history(t - lag))
    for j in range(k_0, k_t):
        s = j * dt
        gb = ks.gamma_beta_at(min(x + mu * (t - s), 1.0))
        val += float(gb @ params.sigma_at(s)) * path.increments[j]
    return val
