import numpy as np
import pytest

from otmetric.grid import GridSpec, MetricField, ScalarField

TWO_PI = 2.0 * np.pi


def torus_grid(n, length=TWO_PI):
    return GridSpec(n, n, length, length)


def coords(grid):
    return grid.node_coords()


def scalar_from(grid, fn):
    x, y = grid.node_coords()
    return ScalarField(grid, fn(x, y))


def conformal_metric(grid, lam_fn):
    """g = exp(2*lam) * I."""
    x, y = grid.node_coords()
    e = np.exp(2.0 * lam_fn(x, y))
    comps = np.stack([e, np.zeros_like(e), e])
    return MetricField(grid, comps)


def diag_exp_metric(grid, mu_fn):
    """Unit-determinant anisotropic g = diag(exp(mu), exp(-mu))."""
    x, y = grid.node_coords()
    m = mu_fn(x, y)
    comps = np.stack([np.exp(m), np.zeros_like(m), np.exp(-m)])
    return MetricField(grid, comps)


@pytest.fixture
def grid64():
    return torus_grid(64)


@pytest.fixture
def grid32():
    return torus_grid(32)
