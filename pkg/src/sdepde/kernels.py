"""Transformation kernels on the triangle and the boundary gain functions.

The change of variables that decouples the transport pair from the SDE is a
Volterra transform with a 2x2 kernel matrix (K_uu, K_uv, K_vu, K_vv) on the
triangle T = {0 <= y <= x <= 1} plus two 1xn gain rows gamma_alpha,
gamma_beta on [0, 1].  They satisfy a Goursat problem:

    lam (K_uu)_x + lam (K_uu)_y + eta-(y) K_uv = 0
    lam (K_uv)_x - mu  (K_uv)_y + eta+(y) K_uu = 0
    -mu (K_vu)_x + lam (K_vu)_y + eta-(y) K_vv = 0
    -mu (K_vv)_x - mu  (K_vv)_y + eta+(y) K_vu = 0

with diagonal data

    K_uv(x,x) = -eta+(x)/(lam+mu),      K_vu(x,x) = eta-(x)/(lam+mu),

gain ODEs along x

    lam gamma_alpha' + gamma_alpha A + lam K_uu(x,0) M = 0,  gamma_alpha(0) = -M
    -mu gamma_beta'  + gamma_beta  A + lam K_vu(x,0) M = 0,  gamma_beta(0)  = gb0

and the algebraic edge identities (q != 0)

    lam q K_uu(x,0) - mu K_uv(x,0) + gamma_alpha(x) B = 0
    lam q K_vu(x,0) - mu K_vv(x,0) + gamma_beta(x)  B = 0.

Characteristic data flow: K_uv and K_vu carry data from the diagonal along
slopes dy/dx = -mu/lam and -lam/mu respectively; K_uu and K_vv carry data
from the y = 0 edge along slope dy/dx = +1 (lattice-aligned); the gains
integrate as ODEs in x from 0.  Each Picard sweep integrates all six
components along their characteristics, with every product of an unknown and
a coupling datum taken from the previous sweep, so one sweep from the zero
state is linear in (eta+, eta-, M).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SystemParams

__all__ = [
    "KernelSet",
    "KernelResidualReport",
    "NonConvergence",
    "solve_kernels",
    "eval_kernel",
    "kernel_residuals",
]


class NonConvergence(RuntimeError):
    """Picard iteration hit max_iter with the sweep change above tolerance."""

    def __init__(self, message: str, last_change: float):
        super().__init__(message)
        self.last_change = last_change


@dataclass(frozen=True)
class KernelSet:
    """Grid-sampled kernels on the triangle lattice and gains on [0, 1].

    Kernel arrays are (nx+1, nx+1) with entry [i, j] at (x_i, y_j); entries
    above the diagonal (y > x) are unused and left at zero.  Gains are
    (nx+1, n) rows.  ``residual_norm`` is the max finite-difference residual
    over all kernel equations after convergence.
    """

    K_uu: np.ndarray
    K_uv: np.ndarray
    K_vu: np.ndarray
    K_vv: np.ndarray
    gamma_alpha: np.ndarray
    gamma_beta: np.ndarray
    residual_norm: float
    grid_nx: int

    @property
    def xs(self) -> np.ndarray:
        return np.arange(self.grid_nx + 1) / self.grid_nx

    def gamma_alpha_at(self, x) -> np.ndarray:
        return _interp_rows(self.gamma_alpha, self.xs, x)

    def gamma_beta_at(self, x) -> np.ndarray:
        return _interp_rows(self.gamma_beta, self.xs, x)

    def gamma_beta_prime_at(self, params: SystemParams, x) -> np.ndarray:
        """d/dx gamma_beta from its ODE (exact for the converged solution)."""
        gb = _interp_rows(self.gamma_beta, self.xs, x)
        kvu0 = np.interp(x, self.xs, self.K_vu[:, 0])
        return (gb @ params.A + params.lam * np.multiply.outer(kvu0, params.M[0])) / params.mu


def _interp_rows(rows: np.ndarray, xs: np.ndarray, x) -> np.ndarray:
    """Linear interpolation of an (npts, n) row-valued table at x (scalar or array)."""
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty((x_arr.size, rows.shape[1]))
    for c in range(rows.shape[1]):
        out[:, c] = np.interp(x_arr, xs, rows[:, c])
    if np.isscalar(x) or np.asarray(x).ndim == 0:
        return out[0]
    return out


def _stencil_interp(values: np.ndarray, lo: int, hi: int, p: np.ndarray, order: int) -> np.ndarray:
    """Lagrange interpolation of ``values`` (valid on columns lo..hi) at
    fractional column positions ``p``, with an ``order``+1 point stencil."""
    npts = hi - lo + 1
    order = min(order, npts - 1)
    if order <= 0:
        return np.full_like(p, values[lo], dtype=float)
    base = np.clip(np.floor(p).astype(int) - (order - 1) // 2, lo, hi - order)
    t = p - base
    out = np.zeros_like(p, dtype=float)
    for k in range(order + 1):
        w = np.ones_like(p, dtype=float)
        for m in range(order + 1):
            if m != k:
                w *= (t - m) / (k - m)
        out += w * values[base + k]
    return out


def _cubic_midpoints(samples: np.ndarray) -> np.ndarray:
    """Midpoint values of a uniformly sampled function, cubic-interpolated."""
    npts = samples.shape[0]
    idx = np.arange(npts - 1)
    p = idx + 0.5
    return _stencil_interp(samples, 0, npts - 1, p, order=3)


class _Workspace:
    """Precomputed grid data shared by all sweeps of one solve."""

    def __init__(self, params: SystemParams, nx: int, gamma_beta_0: np.ndarray):
        self.params = params
        self.nx = nx
        self.dx = 1.0 / nx
        self.xs = np.arange(nx + 1) * self.dx
        self.eta_p = np.array([params.eta_plus(x) for x in self.xs])
        self.eta_m = np.array([params.eta_minus(x) for x in self.xs])
        self.diag_uv = -self.eta_p / (params.lam + params.mu)
        self.diag_vu = self.eta_m / (params.lam + params.mu)
        self.gb0 = gamma_beta_0
        n = params.n
        self.ga0 = -params.M.reshape(1, n)[0]
        # per-row upstream foot offsets (in fractional column units)
        self.shift_uv = params.lam / params.mu
        self.shift_vu = params.mu / params.lam

    def zero_state(self):
        nx, n = self.nx, self.params.n
        z = lambda: np.zeros((nx + 1, nx + 1))
        gam = lambda: np.zeros((nx + 1, n))
        return {"K_uu": z(), "K_uv": z(), "K_vu": z(), "K_vv": z(),
                "ga": gam(), "gb": gam()}


def _march_from_diagonal(ws: _Workspace, which: str, source_field: np.ndarray) -> np.ndarray:
    """Integrate K_uv or K_vu from its diagonal data down to the y=0 edge.

    ``source_field`` is the previous-sweep partner kernel entering the source
    term.  Marches row by row (y descending); the upstream foot one row above
    is evaluated by quadratic interpolation, second order overall.
    """
    nx, dx, xs = ws.nx, ws.dx, ws.xs
    lam, mu = ws.params.lam, ws.params.mu
    K = np.zeros((nx + 1, nx + 1))
    if which == "K_uv":
        diag, shift = ws.diag_uv, ws.shift_uv
        eta_src, denom, sgn = ws.eta_p, mu, -1.0
        eta_of = ws.params.eta_plus
    else:
        diag, shift = ws.diag_vu, ws.shift_vu
        eta_src, denom, sgn = ws.eta_m, lam, +1.0
        eta_of = ws.params.eta_minus
    idx = np.arange(nx + 1)
    K[idx, idx] = diag
    src_diag = np.diagonal(source_field).copy()
    for j in range(nx - 1, -1, -1):
        i = np.arange(j + 1, nx + 1)
        x_i = xs[i]
        y_j = xs[j]
        y_up = xs[j + 1]
        foot = x_i - shift * dx
        p = np.clip(foot / dx, j + 1, nx)
        crossing = foot < y_up - 1e-12
        # generic step: upstream foot on row j+1
        val_up = _stencil_interp(K[:, j + 1], j + 1, nx, p, order=2)
        src_node = eta_src[j] * source_field[i, j] / denom
        src_up = eta_src[j + 1] * _stencil_interp(source_field[:, j + 1], j + 1, nx,
                                                  p, order=1) / denom
        vals = val_up + sgn * 0.5 * dx * (src_node + src_up)
        if np.any(crossing):
            # characteristic meets the diagonal inside this step: integrate
            # the fractional segment from the exact diagonal point instead
            ic = i[crossing]
            if which == "K_uv":
                x0 = (mu * ic * dx + lam * y_j) / (lam + mu)
            else:
                x0 = (lam * ic * dx + mu * y_j) / (lam + mu)
            eta_x0 = np.array([eta_of(x) for x in x0])
            dval = eta_x0 / (lam + mu) * (-1.0 if which == "K_uv" else 1.0)
            src_d = eta_x0 * np.interp(x0, xs, src_diag) / denom
            seg = x0 - y_j
            vals[crossing] = dval + sgn * 0.5 * seg * (
                eta_src[j] * source_field[ic, j] / denom + src_d)
        K[i, j] = vals
    return K


def _march_from_edge(ws: _Workspace, anchors: np.ndarray, source_field: np.ndarray,
                     which: str) -> np.ndarray:
    """Integrate K_uu or K_vv along the lattice-aligned slope-1 characteristics
    from its y = 0 anchors, by cumulative trapezoid of the source term."""
    nx, dx = ws.nx, ws.dx
    lam, mu = ws.params.lam, ws.params.mu
    K = np.zeros((nx + 1, nx + 1))
    if which == "K_uu":
        coef = -1.0 / lam
        eta = ws.eta_m
    else:
        coef = 1.0 / mu
        eta = ws.eta_p
    for d in range(nx + 1):
        ll = np.arange(nx + 1 - d)
        rows = ll + d
        src = eta[ll] * source_field[rows, ll]
        if ll.size > 1:
            pair = src[:-1] + src[1:]
            cum = np.concatenate(([0.0], np.cumsum(pair)))
        else:
            cum = np.zeros(1)
        K[rows, ll] = anchors[d] + coef * 0.5 * dx * cum
    return K


def _integrate_gain(ws: _Workspace, gamma0: np.ndarray, edge_forcing: np.ndarray,
                    which: str) -> np.ndarray:
    """RK4 for the gain ODE along x with cubic-interpolated midpoint forcing.

    gamma_alpha' = -(gamma A)/lam - E_uu(x) M
    gamma_beta'  =  (gamma A + lam E_vu(x) M)/mu
    """
    params = ws.params
    nx, dx = ws.nx, ws.dx
    n = params.n
    A, M = params.A, params.M[0]
    lam, mu = params.lam, params.mu
    mid = _cubic_midpoints(edge_forcing)
    gam = np.zeros((nx + 1, n))
    gam[0] = gamma0

    if which == "alpha":
        def rhs(g, e):
            return -(g @ A) / lam - e * M
    else:
        def rhs(g, e):
            return (g @ A + lam * e * M) / mu

    for i in range(nx):
        g = gam[i]
        e0, em, e1 = edge_forcing[i], mid[i], edge_forcing[i + 1]
        k1 = rhs(g, e0)
        k2 = rhs(g + 0.5 * dx * k1, em)
        k3 = rhs(g + 0.5 * dx * k2, em)
        k4 = rhs(g + dx * k3, e1)
        gam[i + 1] = g + dx / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return gam


def _picard_sweep(ws: _Workspace, state: dict) -> dict:
    """One successive-approximation sweep.

    All bilinear couplings (kernel x coupling-datum products) read the
    previous state; the edge anchors and the along-characteristic integration
    use values of the current sweep, which are themselves linear in the data.
    """
    params = ws.params
    lam, mu, q = params.lam, params.mu, params.q
    B = params.B[:, 0]

    K_uv = _march_from_diagonal(ws, "K_uv", state["K_uu"])
    K_vu = _march_from_diagonal(ws, "K_vu", state["K_vv"])
    ga = _integrate_gain(ws, ws.ga0, state["K_uu"][:, 0], "alpha")
    gb = _integrate_gain(ws, ws.gb0, state["K_vu"][:, 0], "beta")
    # edge identities define the y = 0 anchors of K_uu and K_vv
    anchors_uu = (mu * K_uv[:, 0] - ga @ B) / (lam * q)
    anchors_vv = (lam * q * K_vu[:, 0] + gb @ B) / mu
    K_uu = _march_from_edge(ws, anchors_uu, state["K_uv"], "K_uu")
    K_vv = _march_from_edge(ws, anchors_vv, state["K_vu"], "K_vv")
    return {"K_uu": K_uu, "K_uv": K_uv, "K_vu": K_vu, "K_vv": K_vv, "ga": ga, "gb": gb}


def solve_kernels(
    params: SystemParams,
    nx: int,
    gamma_beta_0: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> KernelSet:
    """Solve the kernel Goursat problem by successive approximations.

    ``gamma_beta_0`` is the initial row of gamma_beta (default zero; a
    feedback row K may be supplied instead, which folds a -BKX term into the
    transformed SDE drift).  Raises :class:`NonConvergence` if the sup-norm
    change between sweeps stays >= tol after ``max_iter`` sweeps and
    ``FloatingPointError`` on non-finite intermediates.
    """
    if nx < 8:
        raise ValueError("kernel grid needs nx >= 8")
    if not tol > 0:
        raise ValueError("tol must be positive")
    n = params.n
    if gamma_beta_0 is None:
        gb0 = np.zeros(n)
    else:
        gb0 = np.asarray(gamma_beta_0, dtype=float).reshape(n)
    ws = _Workspace(params, nx, gb0)
    state = ws.zero_state()
    change = np.inf
    for sweep in range(max_iter):
        new = _picard_sweep(ws, state)
        for name, arr in new.items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(
                    f"non-finite values in {name} at sweep {sweep + 1}")
        change = max(float(np.max(np.abs(new[k] - state[k]))) for k in new)
        state = new
        if change < tol:
            break
    else:
        raise NonConvergence(
            f"kernel iteration did not converge in {max_iter} sweeps "
            f"(last change {change:.3e} >= tol {tol:.3e})", change)

    ks = KernelSet(
        K_uu=_frozen(state["K_uu"]),
        K_uv=_frozen(state["K_uv"]),
        K_vu=_frozen(state["K_vu"]),
        K_vv=_frozen(state["K_vv"]),
        gamma_alpha=_frozen(state["ga"]),
        gamma_beta=_frozen(state["gb"]),
        residual_norm=0.0,
        grid_nx=nx,
    )
    report = kernel_residuals(ks, params)
    object.__setattr__(ks, "residual_norm", report.overall_max)
    return ks


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


_KERNEL_NAMES = ("K_uu", "K_uv", "K_vu", "K_vv")


def eval_kernel(ks: KernelSet, which: str, x: float, y: float) -> float:
    """Bilinear interpolation of one kernel on the triangle; exact at nodes.

    Cells cut by the diagonal use linear interpolation on the lower triangle
    of the cell.  Raises ``ValueError`` outside 0 <= y <= x <= 1.
    """
    if which not in _KERNEL_NAMES:
        raise ValueError(f"unknown kernel {which!r}")
    tol = 1e-12
    if not (-tol <= y <= x + tol and x <= 1.0 + tol):
        raise ValueError(f"point ({x}, {y}) outside the triangle domain")
    K = getattr(ks, which)
    nx = ks.grid_nx
    dx = 1.0 / nx
    y = min(max(y, 0.0), x)
    x = min(max(x, 0.0), 1.0)
    i = min(int(x / dx), nx - 1)
    j = min(int(y / dx), nx - 1)
    if j > i:
        j = i
    xi = x / dx - i
    yj = y / dx - j
    if j == i:
        # diagonal cell: vertices (i,j), (i+1,j), (i+1,j+1)
        return float(K[i, j] + xi * (K[i + 1, j] - K[i, j])
                     + yj * (K[i + 1, j + 1] - K[i + 1, j]))
    f00, f10 = K[i, j], K[i + 1, j]
    f01, f11 = K[i, j + 1], K[i + 1, j + 1]
    return float((1 - xi) * (1 - yj) * f00 + xi * (1 - yj) * f10
                 + (1 - xi) * yj * f01 + xi * yj * f11)


@dataclass(frozen=True)
class KernelResidualReport:
    """Finite-difference residuals of every kernel equation.

    ``pde_max``/``pde_mean`` use centered differences on strictly interior
    lattice nodes; ``gamma_max``/``gamma_mean`` are the gain-ODE residuals;
    the boundary and diagonal identities are algebraic."""

    pde_max: dict
    pde_mean: dict
    gamma_max: dict
    gamma_mean: dict
    boundary_alpha_max: float
    boundary_beta_max: float
    diagonal_uv_max: float
    diagonal_vu_max: float
    overall_max: float


def kernel_residuals(ks: KernelSet, params: SystemParams) -> KernelResidualReport:
    """Re-substitute the kernel set into finite-difference forms of all
    equations and report max/mean absolute residuals."""
    nx = ks.grid_nx
    dx = 1.0 / nx
    xs = ks.xs
    lam, mu, q = params.lam, params.mu, params.q
    eta_p = np.array([params.eta_plus(x) for x in xs])
    eta_m = np.array([params.eta_minus(x) for x in xs])
    B = params.B[:, 0]
    A, M = params.A, params.M[0]

    ii, jj = np.meshgrid(np.arange(1, nx), np.arange(1, nx), indexing="ij")
    mask = jj <= ii - 1
    ii, jj = ii[mask], jj[mask]

    def dxc(K):
        return (K[ii + 1, jj] - K[ii - 1, jj]) / (2 * dx)

    def dyc(K):
        return (K[ii, jj + 1] - K[ii, jj - 1]) / (2 * dx)

    res = {
        "K_uu": lam * dxc(ks.K_uu) + lam * dyc(ks.K_uu) + eta_m[jj] * ks.K_uv[ii, jj],
        "K_uv": lam * dxc(ks.K_uv) - mu * dyc(ks.K_uv) + eta_p[jj] * ks.K_uu[ii, jj],
        "K_vu": -mu * dxc(ks.K_vu) + lam * dyc(ks.K_vu) + eta_m[jj] * ks.K_vv[ii, jj],
        "K_vv": -mu * dxc(ks.K_vv) - mu * dyc(ks.K_vv) + eta_p[jj] * ks.K_vu[ii, jj],
    }
    pde_max = {k: float(np.max(np.abs(v))) if v.size else 0.0 for k, v in res.items()}
    pde_mean = {k: float(np.mean(np.abs(v))) if v.size else 0.0 for k, v in res.items()}

    ga, gb = ks.gamma_alpha, ks.gamma_beta
    dga = (ga[2:] - ga[:-2]) / (2 * dx)
    dgb = (gb[2:] - gb[:-2]) / (2 * dx)
    mid = slice(1, nx)
    r_ga = lam * dga + ga[mid] @ A + lam * np.multiply.outer(ks.K_uu[mid, 0], M)
    r_gb = -mu * dgb + gb[mid] @ A + lam * np.multiply.outer(ks.K_vu[mid, 0], M)
    gamma_max = {"gamma_alpha": float(np.max(np.abs(r_ga))),
                 "gamma_beta": float(np.max(np.abs(r_gb)))}
    gamma_mean = {"gamma_alpha": float(np.mean(np.abs(r_ga))),
                  "gamma_beta": float(np.mean(np.abs(r_gb)))}

    b_alpha = lam * q * ks.K_uu[:, 0] - mu * ks.K_uv[:, 0] + ga @ B
    b_beta = lam * q * ks.K_vu[:, 0] - mu * ks.K_vv[:, 0] + gb @ B
    idx = np.arange(nx + 1)
    d_uv = (lam + mu) * ks.K_uv[idx, idx] + eta_p
    d_vu = -(lam + mu) * ks.K_vu[idx, idx] + eta_m

    all_max = [*pde_max.values(), *gamma_max.values(),
               float(np.max(np.abs(b_alpha))), float(np.max(np.abs(b_beta))),
               float(np.max(np.abs(d_uv))), float(np.max(np.abs(d_vu)))]
    return KernelResidualReport(
        pde_max=pde_max,
        pde_mean=pde_mean,
        gamma_max=gamma_max,
        gamma_mean=gamma_mean,
        boundary_alpha_max=float(np.max(np.abs(b_alpha))),
        boundary_beta_max=float(np.max(np.abs(b_beta))),
        diagonal_uv_max=float(np.max(np.abs(d_uv))),
        diagonal_vu_max=float(np.max(np.abs(d_vu))),
        overall_max=float(max(all_max)),
    )
