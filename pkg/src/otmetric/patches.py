"""Overlapping rectangular patch covers with blending weights.

Patches are index windows (periodically wrapped) on the node lattice.  The
default uniform cover tiles each axis with ``per_axis`` patches of width
``2 * stride`` so neighbours overlap by half a patch width; raised-cosine
weights per patch are strictly positive on patch nodes and nearly sum to a
constant, and are renormalized to sum to one wherever any patch contributes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig
from .grid import GridSpec

MIN_PATCH_NODES = 16


@dataclass(frozen=True)
class Patch:
    """Wrapped index window [i0, i0+ni) x [j0, j0+nj)."""

    i0: int
    ni: int
    j0: int
    nj: int

    def __post_init__(self):
        if self.ni < MIN_PATCH_NODES or self.nj < MIN_PATCH_NODES:
            raise InvalidConfig(f"patch must span >= {MIN_PATCH_NODES} nodes per axis")

    def x_indices(self, grid: GridSpec) -> np.ndarray:
        return (self.i0 + np.arange(self.ni)) % grid.nx

    def y_indices(self, grid: GridSpec) -> np.ndarray:
        return (self.j0 + np.arange(self.nj)) % grid.ny

    def extract(self, arr: np.ndarray, grid: GridSpec, margin: int = 0) -> np.ndarray:
        """Wrapped sub-block of a (..., nx, ny) array, optionally grown by margin."""
        xi = (self.i0 - margin + np.arange(self.ni + 2 * margin)) % grid.nx
        yj = (self.j0 - margin + np.arange(self.nj + 2 * margin)) % grid.ny
        return arr[..., xi[:, None], yj[None, :]]

    def node_mask(self, grid: GridSpec) -> np.ndarray:
        m = np.zeros(grid.shape, dtype=bool)
        m[np.ix_(self.x_indices(grid), self.y_indices(grid))] = True
        return m

    def bounds(self, grid: GridSpec):
        """Coordinate window ((x0, x1), (y0, y1)); x1/y1 may exceed the period."""
        x0 = self.i0 * grid.hx
        y0 = self.j0 * grid.hy
        return ((x0, x0 + self.ni * grid.hx), (y0, y0 + self.nj * grid.hy))


def _hann(n: int) -> np.ndarray:
    t = (np.arange(n) + 0.5) / n
    return np.sin(np.pi * t) ** 2


@dataclass(frozen=True)
class PatchCover:
    grid: GridSpec
    patches: tuple[Patch, ...]

    def weight_window(self, patch: Patch) -> np.ndarray:
        """Raised-cosine bump on the patch window, shape (ni, nj)."""
        return np.outer(_hann(patch.ni), _hann(patch.nj))

    def scatter(self, patch: Patch, block: np.ndarray, accum: np.ndarray):
        """Add a patch-shaped block into a global accumulator (wrapped)."""
        xi = patch.x_indices(self.grid)
        yj = patch.y_indices(self.grid)
        accum[..., xi[:, None], yj[None, :]] += block

    def total_weight(self) -> np.ndarray:
        w = np.zeros(self.grid.shape)
        for p in self.patches:
            self.scatter(p, self.weight_window(p), w)
        return w


def build_uniform_cover(grid: GridSpec, per_axis: int = 5,
                        width_factor: float = 2.0) -> PatchCover:
    """Uniform cover: per_axis^2 patches of width ~ width_factor * (L / per_axis).

    width_factor >= 2 keeps the overlap at or above half a patch width.
    """
    if per_axis < 1:
        raise InvalidConfig("per_axis must be positive")
    if width_factor < 2.0:
        raise InvalidConfig("width_factor < 2 breaks the half-width overlap invariant")
    patches = []
    ni = int(round(width_factor * grid.nx / per_axis))
    nj = int(round(width_factor * grid.ny / per_axis))
    for p in range(per_axis):
        for q in range(per_axis):
            i0 = int(round(p * grid.nx / per_axis))
            j0 = int(round(q * grid.ny / per_axis))
            patches.append(Patch(i0, ni, j0, nj))
    return PatchCover(grid, tuple(patches))
