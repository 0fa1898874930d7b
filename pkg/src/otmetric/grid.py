"""Discrete calculus on a flat periodic rectangle with a variable metric.

Fields live on the node lattice of ``[0, lx) x [0, ly)`` with ``nx * ny``
nodes; node ``(i, j)`` sits at ``(i*hx, j*hy)``.  Arrays are indexed
``arr[i, j]`` with axis 0 along x.  Covectors carry lower indices (1-form
components), vectors carry upper indices; the metric converts between them.

All derivative stencils are second-order central differences with periodic
wraparound, so ``exterior_derivative(grad(u))`` vanishes identically
(the stencils commute).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridMismatch, SingularMetric


@dataclass(frozen=True)
class GridSpec:
    """Periodic node lattice: counts and periods."""

    nx: int
    ny: int
    lx: float
    ly: float

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise ValueError("grid needs nx, ny >= 8")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError("grid periods must be positive")

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    def node_coords(self):
        """Coordinate arrays x, y of shape (nx, ny)."""
        x = np.arange(self.nx)[:, None] * self.hx * np.ones((1, self.ny))
        y = np.ones((self.nx, 1)) * np.arange(self.ny)[None, :] * self.hy
        return x, y

    def wrap_delta(self, d, axis):
        """Map coordinate offsets into [-L/2, L/2) along an axis."""
        period = self.lx if axis == 0 else self.ly
        return d - period * np.round(d / period)


def _freeze(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class ScalarField:
    grid: GridSpec
    values: np.ndarray  # (nx, ny)

    def __post_init__(self):
        v = _freeze(self.values)
        if v.shape != self.grid.shape:
            raise ValueError(f"scalar field shape {v.shape} != grid {self.grid.shape}")
        _check_finite(v, "scalar field")
        object.__setattr__(self, "values", v)

    def mean(self) -> float:
        return float(self.values.mean())


@dataclass(frozen=True)
class CovectorField:
    """1-form field: components (w_1, w_2) stacked as comps[0], comps[1]."""

    grid: GridSpec
    comps: np.ndarray  # (2, nx, ny)

    def __post_init__(self):
        c = _freeze(self.comps)
        if c.shape != (2, *self.grid.shape):
            raise ValueError(f"covector field shape {c.shape} != (2, nx, ny)")
        _check_finite(c, "covector field")
        object.__setattr__(self, "comps", c)


@dataclass(frozen=True)
class VectorField:
    """Contravariant field: components stacked as comps[0], comps[1]."""

    grid: GridSpec
    comps: np.ndarray  # (2, nx, ny)

    def __post_init__(self):
        c = _freeze(self.comps)
        if c.shape != (2, *self.grid.shape):
            raise ValueError(f"vector field shape {c.shape} != (2, nx, ny)")
        _check_finite(c, "vector field")
        object.__setattr__(self, "comps", c)


@dataclass(frozen=True)
class MetricField:
    """Symmetric 2x2 tensor per node, stored as (g11, g12, g22)."""

    grid: GridSpec
    comps: np.ndarray  # (3, nx, ny)

    def __post_init__(self):
        c = _freeze(self.comps)
        if c.shape != (3, *self.grid.shape):
            raise ValueError(f"metric field shape {c.shape} != (3, nx, ny)")
        _check_finite(c, "metric field")
        object.__setattr__(self, "comps", c)

    @property
    def g11(self):
        return self.comps[0]

    @property
    def g12(self):
        return self.comps[1]

    @property
    def g22(self):
        return self.comps[2]

    def det(self) -> np.ndarray:
        return self.g11 * self.g22 - self.g12 ** 2

    def require_spd(self):
        """Raise SingularMetric unless pointwise positive-definite."""
        if np.any(self.g11 <= 0) or np.any(self.det() <= 0):
            raise SingularMetric("metric is not positive-definite at some node")

    @staticmethod
    def constant(grid: GridSpec, g11: float, g12: float, g22: float) -> "MetricField":
        comps = np.empty((3, *grid.shape))
        comps[0], comps[1], comps[2] = g11, g12, g22
        return MetricField(grid, comps)

    @staticmethod
    def identity(grid: GridSpec) -> "MetricField":
        return MetricField.constant(grid, 1.0, 0.0, 1.0)


def check_same_grid(*fields):
    g0 = fields[0].grid
    for f in fields[1:]:
        if f.grid != g0:
            raise GridMismatch(f"grids differ: {f.grid} vs {g0}")
    return g0


# -- raw-array stencils (periodic central differences) ----------------------

def ddx(a: np.ndarray, hx: float) -> np.ndarray:
    return (np.roll(a, -1, axis=-2) - np.roll(a, 1, axis=-2)) / (2.0 * hx)


def ddy(a: np.ndarray, hy: float) -> np.ndarray:
    return (np.roll(a, -1, axis=-1) - np.roll(a, 1, axis=-1)) / (2.0 * hy)


def metric_inverse_comps(g: MetricField):
    """Pointwise inverse of an SPD metric, as (i11, i12, i22) arrays."""
    g.require_spd()
    det = g.det()
    return g.g22 / det, -g.g12 / det, g.g11 / det


# -- module operations -------------------------------------------------------

def grad(u: ScalarField) -> CovectorField:
    """Central-difference gradient; returns the 1-form (d1 u, d2 u)."""
    g = u.grid
    comps = np.stack([ddx(u.values, g.hx), ddy(u.values, g.hy)])
    return CovectorField(g, comps)


def sharp(g: MetricField, w: CovectorField) -> VectorField:
    """Raise the index: per node g(x)^{-1} w(x)."""
    check_same_grid(g, w)
    i11, i12, i22 = metric_inverse_comps(g)
    comps = np.stack([i11 * w.comps[0] + i12 * w.comps[1],
                      i12 * w.comps[0] + i22 * w.comps[1]])
    return VectorField(g.grid, comps)


def flat(g: MetricField, v: VectorField) -> CovectorField:
    """Lower the index: per node g(x) v(x)."""
    check_same_grid(g, v)
    g.require_spd()
    comps = np.stack([g.g11 * v.comps[0] + g.g12 * v.comps[1],
                      g.g12 * v.comps[0] + g.g22 * v.comps[1]])
    return CovectorField(g.grid, comps)


def metric_dot(g: MetricField, w1: CovectorField, w2: CovectorField) -> ScalarField:
    """Inner product of two 1-forms: w1^T g^{-1} w2 pointwise."""
    check_same_grid(g, w1, w2)
    i11, i12, i22 = metric_inverse_comps(g)
    a1, a2 = w1.comps
    b1, b2 = w2.comps
    vals = i11 * a1 * b1 + i12 * (a1 * b2 + a2 * b1) + i22 * a2 * b2
    return ScalarField(g.grid, vals)


def volume_density(g: MetricField) -> ScalarField:
    """sqrt(det g) pointwise (the density of the Riemannian area element)."""
    g.require_spd()
    return ScalarField(g.grid, np.sqrt(g.det()))


def integrate(u: ScalarField, g: MetricField) -> float:
    """Riemannian integral: sum of u*sqrt(det g) over nodes times cell area.

    On a periodic grid the trapezoid rule degenerates to this node sum and is
    spectrally accurate for smooth integrands.
    """
    check_same_grid(u, g)
    dens = volume_density(g).values
    return float(np.sum(u.values * dens) * u.grid.cell_area)


def exterior_derivative(w: CovectorField) -> ScalarField:
    """Coefficient of the 2-form dw: d1 w_2 - d2 w_1 (central differences)."""
    g = w.grid
    vals = ddx(w.comps[1], g.hx) - ddy(w.comps[0], g.hy)
    return ScalarField(g, vals)
