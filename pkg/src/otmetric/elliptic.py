"""Divergence-form elliptic operator on the periodic grid and its CG solver.

The continuous operator is ``P u = Lap_g u + <grad(log h), grad u>_g``, which
in weighted divergence form reads ``sqrt(det g) h P u = d_i(a^{ij} d_j u)``
with the conductivity-like tensor ``a = sqrt(det g) h g^{-1}``.  We
discretize ``u -> -d_i(a^{ij} d_j u)``:

* diagonal terms with face fluxes and arithmetically averaged coefficients,
* cross terms with nested central differences,

which keeps the operator matrix (implicit) symmetric, positive semidefinite
for pointwise-SPD ``a``, exactly annihilating constants.  Solves run CG on
the mean-zero subspace (the kernel is the constants).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CompatibilityViolated, NonpositiveDensity
from .grid import (GridSpec, MetricField, ScalarField, check_same_grid, ddx,
                   ddy, integrate, metric_inverse_comps, volume_density)

DEFAULT_TOL_CG = 1e-10
DEFAULT_TOL_COMPAT = 1e-8
MAX_ITER_FACTOR = 50


@dataclass
class SolveReport:
    iterations: int
    rel_residual: float
    compat_defect: float
    converged: bool

    def to_text(self) -> str:
        return (f"iterations={self.iterations}\n"
                f"rel_residual={self.rel_residual:.6e}\n"
                f"compat_defect={self.compat_defect:.6e}\n"
                f"converged={int(self.converged)}\n")


class DivFormOperator:
    """Matrix-free ``u -> -d_i(a^{ij} d_j u)`` with periodic stencils."""

    def __init__(self, grid: GridSpec, a11, a12, a22):
        self.grid = grid
        self.a11 = a11
        self.a12 = a12
        self.a22 = a22
        # face-averaged diagonal coefficients, at (i+1/2, j) and (i, j+1/2)
        self._ax = 0.5 * (a11 + np.roll(a11, -1, axis=0))
        self._ay = 0.5 * (a22 + np.roll(a22, -1, axis=1))
        self._ihx2 = 1.0 / grid.hx ** 2
        self._ihy2 = 1.0 / grid.hy ** 2

    def apply(self, u: np.ndarray) -> np.ndarray:
        fx = self._ax * (np.roll(u, -1, axis=0) - u)
        fy = self._ay * (np.roll(u, -1, axis=1) - u)
        out = -(fx - np.roll(fx, 1, axis=0)) * self._ihx2
        out -= (fy - np.roll(fy, 1, axis=1)) * self._ihy2
        cx = self.a12 * ddy(u, self.grid.hy)
        cy = self.a12 * ddx(u, self.grid.hx)
        out -= ddx(cx, self.grid.hx) + ddy(cy, self.grid.hy)
        return out

    def diagonal(self) -> np.ndarray:
        """Diagonal of the implicit matrix (for optional Jacobi scaling)."""
        d = (self._ax + np.roll(self._ax, 1, axis=0)) * self._ihx2
        d = d + (self._ay + np.roll(self._ay, 1, axis=1)) * self._ihy2
        return d


def assemble(g: MetricField, h: ScalarField) -> DivFormOperator:
    """Build the operator with coefficient a = sqrt(det g) * h * g^{-1}."""
    check_same_grid(g, h)
    if np.min(h.values) <= 0:
        raise NonpositiveDensity("density h must be strictly positive")
    i11, i12, i22 = metric_inverse_comps(g)
    w = volume_density(g).values * h.values
    return DivFormOperator(g.grid, w * i11, w * i12, w * i22)


def check_compatibility(f1_over_h: ScalarField, h: ScalarField, g: MetricField) -> float:
    """|integral of f1 dV_g| = |integral of (f1/h) * h dV_g|."""
    check_same_grid(f1_over_h, h, g)
    f1 = ScalarField(g.grid, f1_over_h.values * h.values)
    return abs(integrate(f1, g))


def _cg_mean_zero(apply_op, b, tol, max_iter, diag=None):
    """CG for the singular system restricted to mean-zero fields.

    Constants span the kernel; b is projected onto mean zero and every
    iterate keeps zero mean, so CG acts on the SPD restriction.  Returns
    (x, iterations, rel_residual).
    """
    b = b - b.mean()
    bnorm = np.sqrt(np.sum(b * b))
    if bnorm == 0.0:
        return np.zeros_like(b), 0, 0.0
    x = np.zeros_like(b)
    r = b.copy()
    z = r / diag if diag is not None else r
    p = z.copy()
    rz = np.sum(r * z)
    it = 0
    while it < max_iter:
        ap = apply_op(p)
        ap -= ap.mean()
        alpha = rz / np.sum(p * ap)
        x += alpha * p
        r -= alpha * ap
        it += 1
        if np.sqrt(np.sum(r * r)) <= tol * bnorm:
            break
        z = r / diag if diag is not None else r
        rz_new = np.sum(r * z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    x -= x.mean()
    rel = float(np.sqrt(np.sum(r * r)) / bnorm)
    return x, it, rel


def solve(op: DivFormOperator, f1_over_h: ScalarField, h: ScalarField, g: MetricField,
          tol_cg: float = DEFAULT_TOL_CG, tol_compat: float = DEFAULT_TOL_COMPAT,
          max_iter: int | None = None, jacobi: bool = False):
    """Solve P(phi) = f1/h in mean-zero gauge.

    The right side of the discrete system is ``-sqrt(det g) h (f1/h)`` so that
    ``op(phi) = rhs`` realizes the weighted divergence form.  Rejects sources
    whose Riemannian mean exceeds tol_compat.  If CG hits the iteration cap
    the best iterate is still returned; the report carries converged=False.
    """
    check_same_grid(f1_over_h, h, g)
    defect = check_compatibility(f1_over_h, h, g)
    scale = abs(integrate(ScalarField(g.grid, np.abs(f1_over_h.values) * h.values), g))
    if defect > tol_compat * max(scale, 1.0):
        raise CompatibilityViolated(
            f"source mean defect {defect:.3e} exceeds tolerance {tol_compat:.1e}")

    if max_iter is None:
        max_iter = MAX_ITER_FACTOR * max(op.grid.nx, op.grid.ny)
    rhs = -volume_density(g).values * h.values * f1_over_h.values
    diag = op.diagonal() if jacobi else None
    x, it, rel = _cg_mean_zero(op.apply, rhs, tol_cg, max_iter, diag)
    report = SolveReport(it, rel, defect, rel <= tol_cg)
    return ScalarField(op.grid, x), report


def null_space_test(op: DivFormOperator, seed: int = 0, tol: float = 1e-12,
                    max_iter: int | None = None) -> float:
    """Solve op(u) = 0 from a random mean-zero start; returns RMS of u.

    The converged solution must be the zero field because the kernel holds
    only constants; the returned norm certifies that numerically.
    """
    rng = np.random.default_rng(seed)
    u0 = rng.standard_normal(op.grid.shape)
    u0 -= u0.mean()
    u0 /= np.sqrt(np.mean(u0 * u0))
    if max_iter is None:
        max_iter = 4 * MAX_ITER_FACTOR * max(op.grid.nx, op.grid.ny)
    # u0 - x solves op(y) = op(u0); at convergence u = u0 - x lies in the kernel
    x, _, _ = _cg_mean_zero(op.apply, op.apply(u0), tol, max_iter)
    u = u0 - x
    u -= u.mean()
    return float(np.sqrt(np.mean(u * u)))


def ibp_defect(op: DivFormOperator, phi: ScalarField) -> float:
    """Discrete integration-by-parts defect for a solved probe.

    The integral of ``h Lap_g(phi) + <grad h, grad phi>_g dV_g`` equals the
    plain sum of the divergence-form operator values times the cell area,
    which telescopes to zero on the periodic grid; the return value is the
    rounding-level residual of that identity.
    """
    return float(abs(np.sum(op.apply(phi.values)) * op.grid.cell_area))
