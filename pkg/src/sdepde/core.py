"""Core types: system parameters, space-time grids, Brownian paths and the
Ito-isometry statistical checker shared by the other modules.

Everything here is immutable after construction and deterministic: the same
arguments always produce bit-identical results, which the Monte Carlo layer
relies on for common-random-number comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.special import ndtri

Profile = Callable[[float], float]

__all__ = [
    "SystemParams",
    "SpaceTimeGrid",
    "BrownianPath",
    "Trajectory",
    "make_grid",
    "sample_brownian",
    "sample_increment_matrix",
    "ito_isometry_check",
    "constant_profile",
    "table_profile",
]


def constant_profile(c: float) -> Profile:
    """Profile that evaluates to ``c`` everywhere."""
    c = float(c)

    def f(x: float) -> float:
        return c

    f.constant_value = c  # type: ignore[attr-defined]
    return f


def table_profile(points: Sequence[Sequence[float]]) -> Profile:
    """Piecewise-linear profile through ``[[x0, v0], [x1, v1], ...]``."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError("table profile needs at least two [x, value] pairs")
    xs, vs = pts[:, 0], pts[:, 1]
    if np.any(np.diff(xs) <= 0):
        raise ValueError("table profile abscissae must be strictly increasing")

    def f(x: float) -> float:
        return float(np.interp(x, xs, vs))

    return f


def _as_matrix(a, rows: int | None, cols: int | None, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(a, dtype=float))
    if rows is not None and arr.shape[0] != rows:
        raise ValueError(f"{name} must have {rows} rows, got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise ValueError(f"{name} must have {cols} columns, got shape {arr.shape}")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SystemParams:
    """Constants and profile functions of the coupled transport/SDE model.

    The PDE pair transports ``u`` rightward at speed ``lam`` and ``v``
    leftward at speed ``mu`` on [0, 1], with couplings ``eta_plus``/
    ``eta_minus``, boundary reflection ``rho`` and proximal coupling ``q``.
    The SDE state is n-dimensional with drift ``A``, input map ``B``, output
    coupling row ``M`` and deterministic diffusion ``sigma(t)``.
    """

    lam: float
    mu: float
    eta_plus: Profile
    eta_minus: Profile
    q: float
    rho: float
    A: np.ndarray
    B: np.ndarray
    M: np.ndarray
    sigma: Callable[[float], np.ndarray]
    X0: np.ndarray
    T: float
    u0: Profile = None  # type: ignore[assignment]
    v0: Profile = None  # type: ignore[assignment]

    def __post_init__(self):
        if not (self.lam > 0 and self.mu > 0):
            raise ValueError("transport speeds lam and mu must be positive")
        if self.q == 0:
            raise ValueError("proximal boundary coupling q must be nonzero")
        if abs(self.rho * self.q) >= 1:
            raise ValueError("|rho*q| < 1 is required")
        A = _as_matrix(self.A, None, None, "A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError("A must be square")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", _as_matrix(self.B, n, 1, "B"))
        object.__setattr__(self, "M", _as_matrix(self.M, 1, n, "M"))
        X0 = np.asarray(self.X0, dtype=float).reshape(n).copy()
        X0.setflags(write=False)
        object.__setattr__(self, "X0", X0)
        if not self.T > self.h:
            raise ValueError("horizon T must exceed the boundary delay h = 1/mu")
        sig = self.sigma
        if not callable(sig):
            sig_val = np.asarray(sig, dtype=float).reshape(-1)
            if sig_val.size == 1:
                sig_val = np.full(n, sig_val[0])
            object.__setattr__(self, "sigma", lambda t, _v=sig_val: _v)
        if self.u0 is None:
            object.__setattr__(self, "u0", constant_profile(0.0))
        if self.v0 is None:
            object.__setattr__(self, "v0", constant_profile(0.0))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def h(self) -> float:
        """Input delay induced by the v-transport from the boundary to the SDE."""
        return 1.0 / self.mu

    def sigma_at(self, t: float) -> np.ndarray:
        """Diffusion at time ``t`` as an (n,) vector."""
        s = np.asarray(self.sigma(t), dtype=float).reshape(-1)
        if s.size == 1 and self.n > 1:
            s = np.full(self.n, s[0])
        if s.size != self.n:
            raise ValueError("sigma(t) must produce an n-vector")
        return s


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform grid on [0, 1] x [0, T] with the delay h = 1/mu step-aligned."""

    nx: int
    dx: float
    dt: float
    nt: int
    cfl_lambda: float
    cfl_mu: float
    steps_per_delay: int

    def __post_init__(self):
        if max(self.cfl_lambda, self.cfl_mu) > 1.0 + 1e-12:
            raise ValueError("CFL numbers must not exceed 1")

    def times(self) -> np.ndarray:
        return np.arange(self.nt + 1) * self.dt

    def xs(self) -> np.ndarray:
        return np.arange(self.nx + 1) * self.dx

    def index_of_time(self, t: float) -> int:
        k = int(round(t / self.dt))
        if abs(k * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not a grid time (dt={self.dt})")
        return k


def make_grid(params: SystemParams, nx: int, time_refine: int = 1) -> SpaceTimeGrid:
    """Build a grid with dt <= dx/max(lam, mu), nt*dt = T, and h an exact
    integer number of steps so the delayed boundary tap needs no interpolation.

    ``time_refine`` shrinks dt by an integer factor at fixed nx (used by the
    joint-refinement studies; CFL only improves).
    """
    if nx < 2:
        raise ValueError("nx must be at least 2")
    if time_refine < 1:
        raise ValueError("time_refine must be a positive integer")
    lam, mu, h, T = params.lam, params.mu, params.h, params.T
    dx = 1.0 / nx
    dt_max = dx / max(lam, mu)
    m = int(math.ceil(h / dt_max - 1e-12)) * int(time_refine)
    dt = h / m
    ratio = T / dt
    nt = int(round(ratio))
    if abs(nt * dt - T) > 1e-9 * max(1.0, T):
        nt = int(math.ceil(ratio - 1e-12))
    return SpaceTimeGrid(
        nx=nx,
        dx=dx,
        dt=dt,
        nt=nt,
        cfl_lambda=lam * dt / dx,
        cfl_mu=mu * dt / dx,
        steps_per_delay=m,
    )


@dataclass(frozen=True)
class BrownianPath:
    """Increments of a scalar Wiener process on a uniform time grid.

    ``cumulative[k+1] - cumulative[k] == increments[k]`` holds exactly
    because increments are stored as differences of the running sum.
    """

    seed: int
    dt: float
    increments: np.ndarray
    cumulative: np.ndarray

    @property
    def nt(self) -> int:
        return self.increments.shape[0]


def _philox_normals(seed: int, count: int) -> np.ndarray:
    """Standard normals from a counter-based generator via inverse CDF."""
    gen = np.random.Generator(np.random.Philox(key=seed & ((1 << 64) - 1)))
    raw = gen.integers(0, 1 << 53, size=count, dtype=np.int64)
    u = (raw.astype(np.float64) + 0.5) * 2.0 ** -53  # strictly inside (0, 1)
    return ndtri(u)


def sample_brownian(seed: int, nt: int, dt: float) -> BrownianPath:
    """Deterministically sample a Brownian path keyed by ``seed``."""
    if nt < 1:
        raise ValueError("nt must be at least 1")
    if not dt > 0:
        raise ValueError("dt must be positive")
    z = _philox_normals(seed, nt) * math.sqrt(dt)
    cumulative = np.concatenate(([0.0], np.cumsum(z)))
    increments = np.diff(cumulative)
    increments.setflags(write=False)
    cumulative.setflags(write=False)
    return BrownianPath(seed=int(seed), dt=float(dt), increments=increments, cumulative=cumulative)


def sample_increment_matrix(base_seed: int, n_paths: int, nt: int, dt: float) -> np.ndarray:
    """Increments for paths seeded ``base_seed ^ index``, stacked (n_paths, nt).

    Row ``i`` is bit-identical to ``sample_brownian(base_seed ^ i, nt, dt)``.
    """
    out = np.empty((n_paths, nt))
    for i in range(n_paths):
        out[i] = sample_brownian(base_seed ^ i, nt, dt).increments
    return out


@dataclass
class Trajectory:
    """Time-indexed record of one sample path.

    All present arrays share the leading length nt+1; optional fields are
    either fully populated or ``None``. ``v_in = v_bs + v_eff`` holds whenever
    both components are recorded.
    """

    times: np.ndarray
    X: np.ndarray
    u_field: np.ndarray | None = None
    v_field: np.ndarray | None = None
    v_in: np.ndarray | None = None
    v_bs: np.ndarray | None = None
    v_eff: np.ndarray | None = None
    alpha_field: np.ndarray | None = None
    beta_field: np.ndarray | None = None
    beta0: np.ndarray | None = None

    def __post_init__(self):
        nt1 = self.times.shape[0]
        for name in ("X", "u_field", "v_field", "v_in", "v_bs", "v_eff",
                     "alpha_field", "beta_field", "beta0"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[0] != nt1:
                raise ValueError(f"trajectory field {name} has mismatched length")


def ito_isometry_check(
    f1: Callable[[float], float],
    f2: Callable[[float], float],
    path_ensemble: Sequence[BrownianPath],
    t: float,
) -> tuple[float, float]:
    """Monte Carlo product of two Ito integrals vs. the deterministic overlap.

    Returns ``(estimate, reference)`` where the estimate is the ensemble mean
    of the product of left-point Riemann-Ito sums up to ``t`` and the
    reference is the quadrature of ``f1*f2`` on [0, t]. The caller asserts.
    """
    if len(path_ensemble) == 0:
        raise ValueError("path ensemble must be nonempty")
    dt = path_ensemble[0].dt
    k_t = int(round(t / dt))
    ts = np.arange(k_t) * dt
    w1 = np.array([f1(s) for s in ts])
    w2 = np.array([f2(s) for s in ts])
    prods = np.empty(len(path_ensemble))
    for i, path in enumerate(path_ensemble):
        inc = path.increments[:k_t]
        prods[i] = float(w1 @ inc) * float(w2 @ inc)
    estimate = float(np.mean(prods))
    reference, _ = quad(lambda s: f1(s) * f2(s), 0.0, t, limit=200)
    return estimate, float(reference)
