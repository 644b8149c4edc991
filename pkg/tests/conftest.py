import numpy as np
import pytest

from ppdelab.paths import DiscretePath, make_grid
from ppdelab.sde import SdeProblem
from ppdelab.spectral import SpectralModel


def ou_model(lam=-1.0, T=1.0, lip_b=1.0):
    return SpectralModel(1, 1, np.array([lam]), 0.0, lip_b, 1.0, T)


def diag(scale, dim_h=1, dim_k=1):
    m = np.zeros((dim_h, dim_k))
    r = min(dim_h, dim_k)
    m[np.arange(r), np.arange(r)] = scale
    return lambda t, view: m


def ou_problem(lam=-1.0, sigma=0.5, z=1.0, T=1.0, drift=None):
    return SdeProblem(ou_model(lam, T), drift, diag(sigma) if sigma else None, 0.0, z)


def const_path(n_steps, value, T=1.0):
    return DiscretePath.constant(make_grid(T, n_steps), value)


@pytest.fixture
def ou():
    return ou_problem()
