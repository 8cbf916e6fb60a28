"""Delay-window gain functions built from gamma_beta.

These matrix-valued functions quantify how noise entering during one
transport delay h = 1/mu re-enters the SDE:

    N(u) = int_{-u}^{0} e^{-A tau} B gamma_beta(mu (tau + u)) dtau
    g(u) = int_{0}^{h-u} e^{-A tau} B gamma_beta(mu (tau + u)) dtau
    Gamma(u) = B gamma_beta(mu u) + g'(u) - A g(u)

with g' obtained by differentiating the integral bound and the integrand
analytically (gamma_beta' comes from its own transport ODE, never from
numerical differencing).  The ``B gamma_beta`` outer product fixes all
shapes: N, g, Gamma are n x n.

Substituting w = tau + u gives N(u) = e^{Au} int_0^u e^{-Aw} B gb(mu w) dw
and g(u) = e^{Au} int_u^h e^{-Aw} B gb(mu w) dw, hence the identity
N(u) = e^{Au} g(0) - g(u) and the exact cancellation Gamma(u) = 0.  The
quadratures below do not assume the cancellation; they verify it.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import expm

from .core import SystemParams
from .kernels import KernelSet

__all__ = [
    "simpson_matrix",
    "n_matrix",
    "g_matrix",
    "g_prime_matrix",
    "gamma_matrix",
    "v_min_value",
    "VMinEvaluator",
    "lag_grid_g",
    "lag_grid_gamma",
]

_MIN_PANELS = 64  # panels per delay window for deterministic quadratures


def simpson_matrix(f, a: float, b: float, panels: int) -> np.ndarray:
    """Composite Simpson rule for a matrix-valued integrand ``f``."""
    if b <= a:
        return np.zeros_like(np.asarray(f(a), dtype=float))
    if panels % 2:
        panels += 1
    ts = np.linspace(a, b, panels + 1)
    vals = np.stack([np.asarray(f(t), dtype=float) for t in ts])
    w = np.ones(panels + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return np.tensordot(w, vals, axes=(0, 0)) * (b - a) / (3.0 * panels)


def _bgb(params: SystemParams, ks: KernelSet, x: float) -> np.ndarray:
    """Outer product B gamma_beta(x), an n x n matrix."""
    return params.B @ ks.gamma_beta_at(x)[None, :]


def _bgb_prime(params: SystemParams, ks: KernelSet, x: float) -> np.ndarray:
    return params.B @ ks.gamma_beta_prime_at(params, x)[None, :]


def n_matrix(params: SystemParams, ks: KernelSet, u: float,
             panels: int = _MIN_PANELS) -> np.ndarray:
    """N(u) for u in [0, h]; N(0) is the empty integral."""
    h = params.h
    if not 0.0 <= u <= h + 1e-12:
        raise ValueError("n_matrix requires 0 <= u <= h")
    A = params.A

    def integrand(tau):
        return expm(-A * tau) @ _bgb(params, ks, params.mu * (tau + u))

    return simpson_matrix(integrand, -u, 0.0, panels)


def g_matrix(params: SystemParams, ks: KernelSet, u: float,
             panels: int = _MIN_PANELS) -> np.ndarray:
    """g(u) for u in [0, h]; g(h) is the empty integral."""
    h = params.h
    if not 0.0 <= u <= h + 1e-12:
        raise ValueError("g_matrix requires 0 <= u <= h")
    A = params.A

    def integrand(tau):
        return expm(-A * tau) @ _bgb(params, ks, params.mu * (tau + u))

    return simpson_matrix(integrand, 0.0, min(h - u, h), panels)


def g_prime_matrix(params: SystemParams, ks: KernelSet, u: float,
                   panels: int = _MIN_PANELS) -> np.ndarray:
    """dg/du by the fundamental theorem: moving bound plus integrand derivative."""
    h = params.h
    if not 0.0 <= u <= h + 1e-12:
        raise ValueError("g_prime_matrix requires 0 <= u <= h")
    A, mu = params.A, params.mu
    boundary = -expm(-A * (h - u)) @ _bgb(params, ks, mu * h)

    def integrand(tau):
        return expm(-A * tau) @ _bgb_prime(params, ks, mu * (tau + u)) * mu

    return boundary + simpson_matrix(integrand, 0.0, min(h - u, h), panels)


def gamma_matrix(params: SystemParams, ks: KernelSet, u: float,
                 panels: int = _MIN_PANELS) -> np.ndarray:
    """Gamma(u) = B gamma_beta(mu u) + g'(u) - A g(u); analytically zero."""
    return (_bgb(params, ks, params.mu * u)
            + g_prime_matrix(params, ks, u, panels)
            - params.A @ g_matrix(params, ks, u, panels))


class VMinEvaluator:
    """Variance floor evaluator with the time-independent part precomputed.

    The floor at t >= h integrates
    sigma(s)^T [e^{A(t-s)} + N(t-s)]^T W [e^{A(t-s)} + N(t-s)] sigma(s)
    over the trailing delay window; substituting u = t - s, the factor
    Phi(u) = e^{Au} + N(u) does not depend on t and is sampled once at the
    Simpson nodes.
    """

    def __init__(self, params: SystemParams, ks: KernelSet,
                 weight: np.ndarray | None = None, panels: int = 2 * _MIN_PANELS):
        if panels % 2:
            panels += 1
        self.params = params
        self.h = params.h
        self.us = np.linspace(0.0, self.h, panels + 1)
        W = np.eye(params.n) if weight is None else np.asarray(weight, dtype=float)
        self.phis = np.stack([
            expm(params.A * u) + n_matrix(params, ks, u) for u in self.us])
        self.kernels = np.einsum("kji,jl,klm->kim", self.phis, W, self.phis)
        w = np.ones(panels + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        self.weights = w * self.h / (3.0 * panels)

    def __call__(self, t: float) -> float:
        if t < self.h - 1e-12:
            raise ValueError("the variance floor is defined for t >= h")
        sig = np.stack([self.params.sigma_at(t - u) for u in self.us])
        vals = np.einsum("ki,kij,kj->k", sig, self.kernels, sig)
        return float(self.weights @ vals)


def v_min_value(params: SystemParams, ks: KernelSet, t: float,
                weight: np.ndarray | None = None,
                panels: int = 2 * _MIN_PANELS) -> float:
    """Variance floor at time t >= h (identity weight or a state weight W)."""
    return VMinEvaluator(params, ks, weight=weight, panels=panels)(t)


def _expm_chain(A: np.ndarray, step: float, count: int) -> np.ndarray:
    """e^{A * step * k} for k = 0..count, by repeated multiplication."""
    n = A.shape[0]
    out = np.empty((count + 1, n, n))
    out[0] = np.eye(n)
    if count:
        E = expm(A * step)
        for k in range(1, count + 1):
            out[k] = out[k - 1] @ E
    return out


def lag_grid_g(params: SystemParams, ks: KernelSet, m: int,
               refine: int = 4) -> np.ndarray:
    """g at the lag values u = l*h/m, l = 0..m, as an (m+1, n, n) stack.

    Uses the substituted form g(u) = e^{Au} int_u^h e^{-Aw} B gb(mu w) dw with
    a cumulative Simpson on a ``refine``-times finer w-grid; row m is zero.
    """
    if refine % 2:
        refine += 1
    h = params.h
    n = params.n
    fine = m * refine
    dw = h / fine
    ws = np.arange(fine + 1) * dw
    Eneg = _expm_chain(-params.A, dw, fine)
    F = np.einsum("kij,kjl->kil", Eneg,
                  np.stack([_bgb(params, ks, params.mu * w) for w in ws]))
    # integral from each even node to h, marching composite Simpson pairs
    tail = np.zeros((fine + 1, n, n))
    for k in range(fine - 2, -1, -2):
        tail[k] = tail[k + 2] + dw / 3.0 * (F[k] + 4.0 * F[k + 1] + F[k + 2])
    Epos = _expm_chain(params.A, h / m, m)
    idx = np.arange(m + 1) * refine
    return np.einsum("kij,kjl->kil", Epos, tail[idx])


def lag_grid_gamma(params: SystemParams, ks: KernelSet, m: int,
                   refine: int = 4) -> np.ndarray:
    """Gamma at the lag values u = l*h/m, as an (m+1, n, n) stack."""
    h = params.h
    out = np.empty((m + 1, params.n, params.n))
    for l in range(m + 1):
        out[l] = gamma_matrix(params, ks, l * h / m, panels=_MIN_PANELS)
    return out
