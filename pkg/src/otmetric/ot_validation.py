"""Desk-scale entropic transport checks on constant-metric tori.

For g = c0 * I the squared geodesic distance separates per axis, so the
Gibbs kernel factorizes and every Sinkhorn update reduces to two
axis-sequential log-sum-exp contractions of O(N^3) work; the N^2 x N^2 plan
is never materialized.  The barycentric map uses wrap-aware circular means,
which keeps displacements free of branch-cut artifacts near half a period.

These routines certify, independently of the inversion pipeline: the
first-order map prediction (displacement = eps * raised gradient of the
solved potential, up to o(eps)), the invariance of the optimal map under
constant metric scaling, and the cost-Hessian identities at the diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import elliptic
from .errors import ConfigError, NotConverged
from .grid import GridSpec, MetricField, ScalarField, VectorField, grad, integrate

DEFAULT_MARGINAL_TOL = 1e-8


@dataclass(frozen=True)
class DiscreteMeasure:
    grid: GridSpec
    weights: np.ndarray  # (nx, ny), nonnegative, sums to one

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.shape != self.grid.shape:
            raise ValueError("weights shape mismatch")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to one")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @staticmethod
    def from_density(h: ScalarField, g: MetricField) -> "DiscreteMeasure":
        dens = h.values * np.sqrt(g.det()) * h.grid.cell_area
        return DiscreteMeasure(h.grid, dens / dens.sum())


class WrappedSqCost:
    """Cost c(x, y) = 0.5 * c0 * (wrapped squared distance), separable per axis."""

    def __init__(self, grid: GridSpec, c0: float):
        if c0 <= 0:
            raise ConfigError("metric scale c0 must be positive")
        self.grid = grid
        self.c0 = float(c0)
        x = np.arange(grid.nx) * grid.hx
        y = np.arange(grid.ny) * grid.hy
        dx = grid.wrap_delta(x[:, None] - x[None, :], 0)
        dy = grid.wrap_delta(y[:, None] - y[None, :], 1)
        self.cx = 0.5 * self.c0 * dx ** 2  # (nx, nx): source index first
        self.cy = 0.5 * self.c0 * dy ** 2

    def __call__(self, x, y) -> float:
        g = self.grid
        dx = g.wrap_delta(x[0] - y[0], 0)
        dy = g.wrap_delta(x[1] - y[1], 1)
        return 0.5 * self.c0 * (dx ** 2 + dy ** 2)


def wrapped_sq_distance(grid: GridSpec, c0: float) -> WrappedSqCost:
    return WrappedSqCost(grid, c0)


def cost_hessian_check(grid: GridSpec, c0: float, step: float = 1e-3,
                       point=None) -> float:
    """Finite-difference Hessians of the cost at the diagonal.

    Returns the larger Frobenius defect of the two identities
    Hess_x c = c0 I and  Hess_{x,y} c = -c0 I  at the evaluation point.
    """
    cost = WrappedSqCost(grid, c0)
    if point is None:
        point = (0.37 * grid.lx, 0.61 * grid.ly)
    p = np.asarray(point, dtype=float)
    e = [np.array([step, 0.0]), np.array([0.0, step])]

    hxx = np.empty((2, 2))
    for i in range(2):
        hxx[i, i] = (cost(p + e[i], p) - 2.0 * cost(p, p) + cost(p - e[i], p)) / step ** 2
    hxx[0, 1] = hxx[1, 0] = (cost(p + e[0] + e[1], p) - cost(p + e[0] - e[1], p)
                             - cost(p - e[0] + e[1], p) + cost(p - e[0] - e[1], p)
                             ) / (4.0 * step ** 2)
    hxy = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            hxy[i, j] = (cost(p + e[i], p + e[j]) - cost(p + e[i], p - e[j])
                         - cost(p - e[i], p + e[j]) + cost(p - e[i], p - e[j])
                         ) / (4.0 * step ** 2)
    ident = np.eye(2) * c0
    return max(float(np.linalg.norm(hxx - ident)),
               float(np.linalg.norm(hxy + ident)))


def _lse(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


@dataclass
class Coupling:
    """Entropic plan in potential form; the dense plan is never stored."""

    grid: GridSpec
    mu: DiscreteMeasure
    nu: DiscreteMeasure
    cost: WrappedSqCost
    eps_reg: float
    f: np.ndarray  # (nx, ny) source potential
    g: np.ndarray  # (nx, ny) target potential
    defect: float
    iterations: int
    converged: bool

    def _target_logweights(self):
        return self.g / self.eps_reg + np.log(self.nu.weights)

    def conditional_axis_tables(self):
        """Axis log-kernels and the partial contractions of the target side.

        Returns (ax (x1, y1), ay (x2, y2), t1 (x2, y1), t2 (x1, y2)) with
        t1 = LSE_{y2}[m + ay] and t2 = LSE_{y1}[m + ax]; the conditional of
        y1 given x is then proportional to exp(ax[x1, y1] + t1[x2, y1]).
        """
        eps = self.eps_reg
        m = self._target_logweights()  # (y1, y2)
        ax = -self.cost.cx / eps       # (x1, y1)
        ay = -self.cost.cy / eps       # (x2, y2)
        t1 = _lse(m[None, :, :] + ay[:, None, :], axis=2)      # (x2, y1)
        t2 = _lse(m.T[None, :, :] + ax[:, None, :], axis=2)    # (x1, y2)
        return ax, ay, t1, t2


def _half_update(pot_other, logw_other, cx, cy, eps):
    """One log-domain half step: new potential on the first marginal.

    new_f(x1, x2) = -eps * LSE_{y1, y2}[ m(y1, y2) - (cx + cy)/eps ] with
    m = pot_other/eps + logw_other, contracted one axis at a time.
    """
    m = pot_other / eps + logw_other                             # (y1, y2)
    t = _lse(m[None, :, :] + (-cy / eps)[:, None, :], axis=2)    # (x2, y1)
    s = _lse(t[None, :, :] + (-cx / eps)[:, :, None], axis=2)    # (x1, x2)
    return -eps * s


def sinkhorn(mu: DiscreteMeasure, nu: DiscreteMeasure, cost: WrappedSqCost,
             eps_reg: float, max_iter: int = 20000,
             tol: float = DEFAULT_MARGINAL_TOL,
             initial=None) -> Coupling:
    """Log-domain Sinkhorn with separable kernel contractions.

    Iterates until the L1 defect of the nu-marginal drops below tol; raises
    NotConverged (carrying the defect) at the iteration cap.  Optionally
    warm-starts from a previous coupling's potentials.
    """
    if eps_reg <= 0:
        raise ConfigError("entropic regularization must be positive")
    if np.any(mu.weights <= 0) or np.any(nu.weights <= 0):
        raise ConfigError("sinkhorn needs strictly positive weights")
    grid = mu.grid
    logmu = np.log(mu.weights)
    lognu = np.log(nu.weights)
    if initial is None:
        f = np.zeros(grid.shape)
        g = np.zeros(grid.shape)
    else:
        f, g = initial[0].copy(), initial[1].copy()

    defect = np.inf
    it = 0
    while it < max_iter:
        f = _half_update(g, lognu, cost.cx, cost.cy, eps_reg)
        g_new = _half_update(f, logmu, cost.cx, cost.cy, eps_reg)
        defect = float(np.sum(nu.weights
                              * np.abs(np.exp((g - g_new) / eps_reg) - 1.0)))
        g = g_new
        it += 1
        if defect <= tol:
            return Coupling(grid, mu, nu, cost, eps_reg, f, g, defect, it, True)
    raise NotConverged(
        f"sinkhorn marginal defect {defect:.3e} after {it} iterations",
        defect=defect)


def barycentric_map(coupling: Coupling) -> VectorField:
    """Displacement field: per source node the circular mean of target offsets.

    Each coordinate is averaged on its circle (angle of the mean phasor), so
    conditional mass that straddles the periodic cut cannot tear the mean;
    displacements always land in [-L/2, L/2).
    """
    grid = coupling.grid
    eps = coupling.eps_reg
    ax, ay, t1, t2 = coupling.conditional_axis_tables()

    y1 = np.arange(grid.nx) * grid.hx
    y2 = np.arange(grid.ny) * grid.hy
    ph1 = np.exp(2j * np.pi * y1 / grid.lx)
    ph2 = np.exp(2j * np.pi * y2 / grid.ly)

    # conditional over y1 given x: w1(x1, y1, x2) ~ exp(ax + t1)
    lw1 = ax[:, :, None] + t1[None, :, :]
    lw1 -= lw1.max(axis=1, keepdims=True)
    w1 = np.exp(lw1)
    z1 = np.einsum("iyj,y->ij", w1, ph1) / w1.sum(axis=1)
    disp1 = np.angle(z1 * np.conj(ph1)[:, None]) * grid.lx / (2 * np.pi)

    lw2 = ay[:, :, None] + t2.T[None, :, :]   # (x2, y2, x1)
    lw2 -= lw2.max(axis=1, keepdims=True)
    w2 = np.exp(lw2)
    z2 = np.einsum("jyi,y->ji", w2, ph2) / w2.sum(axis=1)
    disp2 = np.angle(z2 * np.conj(ph2)[:, None]) * grid.ly / (2 * np.pi)

    return VectorField(grid, np.stack([disp1, disp2.T]))


@dataclass
class LinearizationReport:
    eps_values: list
    raw_errors: list        # mu-weighted L2 map error per eps (floor included)
    corrected_errors: list  # after subtracting the eps = 0 displacement field
    floor: float
    slope: float
    predicted_scale: float

    def to_text(self) -> str:
        lines = ["eps,raw_error,corrected_error"]
        for e, r, c in zip(self.eps_values, self.raw_errors, self.corrected_errors):
            lines.append(f"{e:.6g},{r:.6e},{c:.6e}")
        lines.append(f"floor={self.floor:.6e}")
        lines.append(f"slope={self.slope:.4f}")
        return "\n".join(lines) + "\n"


def _weighted_rms(diff, weights):
    return float(np.sqrt(np.sum(weights * (diff[0] ** 2 + diff[1] ** 2))))


def linearization_check(h: ScalarField, f1_over_h: ScalarField, eps_values,
                        c0: float, eps_reg: float = 0.003,
                        max_iter: int = 20000,
                        tol: float = DEFAULT_MARGINAL_TOL) -> LinearizationReport:
    """First-order map check against the solved linearized equation.

    For each eps, perturb the reference measure by (1 + eps f1/h), transport
    back to the reference, extract the barycentric displacement, subtract the
    eps = 0 entropic floor field, and compare against eps * (grad phi)^sharp.
    The fitted log-log slope of the corrected error measures the o(eps)
    claim; 2.0 is the ideal.
    """
    grid = h.grid
    g = MetricField.constant(grid, c0, 0.0, c0)
    nu = DiscreteMeasure.from_density(h, g)

    # exact discrete compatibility against the reference measure
    raw = f1_over_h.values
    f1h = ScalarField(grid, raw - np.sum(raw * nu.weights))

    op = elliptic.assemble(g, h)
    phi, report = elliptic.solve(op, f1h, h, g)
    predicted = grad(phi).comps / c0  # (grad phi)^sharp for g = c0 I

    eps_values = list(eps_values)
    max_disp = max(eps_values) * np.max(np.hypot(predicted[0], predicted[1]))
    if max_disp >= min(grid.lx, grid.ly) / 8.0:
        raise ConfigError("eps too large: displacement leaves the trust region")

    cost = WrappedSqCost(grid, c0)
    cpl0 = sinkhorn(nu, nu, cost, eps_reg, max_iter, tol)
    floor_field = barycentric_map(cpl0).comps
    floor = _weighted_rms(floor_field, nu.weights)

    raw_errors, corrected, initial = [], [], (cpl0.f, cpl0.g)
    for eps in eps_values:
        w = nu.weights * (1.0 + eps * f1h.values)
        if np.any(w <= 0):
            raise ConfigError(f"eps={eps} makes the perturbed measure nonpositive")
        mu = DiscreteMeasure(grid, w / w.sum())
        cpl = sinkhorn(mu, nu, cost, eps_reg, max_iter, tol, initial=initial)
        initial = (cpl.f, cpl.g)
        disp = barycentric_map(cpl).comps
        raw_errors.append(_weighted_rms(disp - eps * predicted, mu.weights))
        corrected.append(_weighted_rms(disp - floor_field - eps * predicted,
                                       mu.weights))

    slope = float(np.polyfit(np.log(eps_values), np.log(corrected), 1)[0])
    pred_scale = float(np.max(np.hypot(predicted[0], predicted[1])))
    return LinearizationReport(eps_values, raw_errors, corrected, floor, slope,
                               pred_scale)


def scaling_invariance_check(h: ScalarField, f1_over_h: ScalarField, eps: float,
                             c0: float, eps_reg: float = 0.003,
                             factor: float = 4.0, matched: bool = True,
                             max_iter: int = 20000,
                             tol: float = DEFAULT_MARGINAL_TOL) -> float:
    """L-infinity difference of barycentric maps under metric scaling.

    Scaling the metric by ``factor`` while scaling the regularization the
    same way leaves the Gibbs kernel (hence the plan) unchanged; the
    unmatched variant differs only by the entropic blur.  Returns the
    largest displacement difference in length units.
    """
    grid = h.grid

    def run(c, er):
        g = MetricField.constant(grid, c, 0.0, c)
        nu = DiscreteMeasure.from_density(h, g)
        raw = f1_over_h.values
        f1h = raw - np.sum(raw * nu.weights)
        w = nu.weights * (1.0 + eps * f1h)
        mu = DiscreteMeasure(grid, w / w.sum())
        cpl = sinkhorn(mu, nu, WrappedSqCost(grid, c), er, max_iter, tol)
        return barycentric_map(cpl).comps

    d1 = run(c0, eps_reg)
    d2 = run(factor * c0, factor * eps_reg if matched else eps_reg)
    return float(np.max(np.abs(d1 - d2)))
