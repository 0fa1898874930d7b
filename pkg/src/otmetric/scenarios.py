"""Synthetic ground-truth metric and density families for the simulator."""

from __future__ import annotations

import numpy as np

from . import gfld
from .errors import ConfigError
from .grid import GridSpec, MetricField, ScalarField, integrate, volume_density

METRIC_FAMILIES = ("constant", "conformal", "anisotropic", "file")
DENSITY_FAMILIES = ("uniform", "sine")


def _sine_profile(grid: GridSpec, amplitude: float, kx: int, ky: int):
    """amplitude * sin(kx x) * sin(ky y); a zero wavenumber drops its factor."""
    x, y = grid.node_coords()
    out = np.full(grid.shape, amplitude)
    if kx != 0:
        out = out * np.sin(kx * x * 2 * np.pi / grid.lx)
    if ky != 0:
        out = out * np.sin(ky * y * 2 * np.pi / grid.ly)
    return out


def make_metric(grid: GridSpec, family: str, c0: float = 1.0,
                amplitude: float = 0.15, kx: int = 1, ky: int = 1,
                path: str | None = None) -> MetricField:
    """Ground-truth metric.

    constant:    g = c0 * I
    conformal:   g = c0 * exp(2 lam) * I,  lam = amplitude sin(kx x) sin(ky y)
    anisotropic: g = c0 * diag(exp(mu), exp(-mu)), same sine profile for mu
                 (unit determinant for c0 = 1 by construction)
    file:        read a 3-component GFLD file

    A zero wavenumber drops the corresponding sine factor, so single-axis
    profiles like mu = amplitude * sin(y) are expressible (kx=0, ky=1).
    """
    if family == "file":
        if not path:
            raise ConfigError("metric.family=file needs metric.file")
        m = gfld.load_metric(gfld.require_file(path))
        if m.grid != grid:
            raise ConfigError(f"metric file grid {m.grid} != configured grid {grid}")
        m.require_spd()
        return m
    if c0 <= 0:
        raise ConfigError("metric.c0 must be positive")
    if family == "constant":
        return MetricField.constant(grid, c0, 0.0, c0)
    if family == "conformal":
        e = c0 * np.exp(2.0 * _sine_profile(grid, amplitude, kx, ky))
        return MetricField(grid, np.stack([e, np.zeros_like(e), e]))
    if family == "anisotropic":
        mu = _sine_profile(grid, amplitude, kx, ky)
        return MetricField(grid, np.stack([c0 * np.exp(mu), np.zeros_like(mu),
                                           c0 * np.exp(-mu)]))
    raise ConfigError(f"unknown metric family {family!r}")


def conformal_exponent(grid: GridSpec, amplitude: float, kx: int, ky: int):
    """The lambda field of the conformal family (for oracle comparisons)."""
    return _sine_profile(grid, amplitude, kx, ky)


def make_density(grid: GridSpec, g: MetricField, family: str = "uniform",
                 amplitude: float = 0.0, kx: int = 1, ky: int = 1) -> ScalarField:
    """Reference density h > 0 normalized to unit total mass against dV_g."""
    x, y = grid.node_coords()
    if family == "uniform":
        raw = np.ones(grid.shape)
    elif family == "sine":
        if not -1.0 < amplitude < 1.0:
            raise ConfigError("density.amplitude must lie in (-1, 1)")
        raw = 1.0 + amplitude * np.sin(kx * x * 2 * np.pi / grid.lx) \
            * np.sin(ky * y * 2 * np.pi / grid.ly)
    else:
        raise ConfigError(f"unknown density family {family!r}")
    mass = integrate(ScalarField(grid, raw), g)
    h = ScalarField(grid, raw / mass)
    # exact unit mass up to rounding; volume weights stay positive
    assert np.min(h.values) > 0
    return h


def scaled_metric(g: MetricField, c: float) -> MetricField:
    return MetricField(g.grid, c * g.comps)


def density_for_scaled_metric(h: ScalarField, c: float) -> ScalarField:
    """Renormalized density when the metric is scaled by c (area scales by c)."""
    return ScalarField(h.grid, h.values / c)


def metric_inverse(g: MetricField) -> MetricField:
    g.require_spd()
    det = g.det()
    return MetricField(g.grid, np.stack([g.g22 / det, -g.g12 / det, g.g11 / det]))


def gtilde_of(g: MetricField) -> MetricField:
    """(det g)^{1/2} g^{-1}: the unit-determinant part of the ground truth."""
    g.require_spd()
    s = np.sqrt(g.det())
    inv = metric_inverse(g)
    return MetricField(g.grid, inv.comps * s[None])


def logbeta_of(g: MetricField) -> ScalarField:
    """log((det g)^{-1/2}), the log of the scalar factor (n = 2)."""
    g.require_spd()
    return ScalarField(g.grid, -0.5 * np.log(g.det()))


def sqrt_det(g: MetricField) -> np.ndarray:
    return volume_density(g).values
