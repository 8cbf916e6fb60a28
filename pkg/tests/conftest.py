import pytest

from sdepde.core import SystemParams, constant_profile, make_grid
from sdepde.kernels import solve_kernels

FIG1 = dict(
    lam=1.0, mu=2.0,
    eta_plus=constant_profile(0.3), eta_minus=constant_profile(0.3),
    q=0.25, rho=1.0,
    A=[[0.6]], B=[[1.0]], M=[[1.0]],
    sigma=0.6, X0=[2.0], T=4.0,
)


def fig1_params(**overrides) -> SystemParams:
    return SystemParams(**{**FIG1, **overrides})


@pytest.fixture(scope="session")
def fig1():
    return fig1_params()


@pytest.fixture(scope="session")
def fig1_ks64(fig1):
    return solve_kernels(fig1, 64)


@pytest.fixture(scope="session")
def fig1_grid64(fig1):
    return make_grid(fig1, 64)


@pytest.fixture(scope="session")
def quiet_params():
    """eta = 0, M = 0: transformation is trivial, gains vanish."""
    return fig1_params(eta_plus=constant_profile(0.0),
                       eta_minus=constant_profile(0.0), M=[[0.0]])


@pytest.fixture(scope="session")
def quiet_ks32(quiet_params):
    return solve_kernels(quiet_params, 32)
