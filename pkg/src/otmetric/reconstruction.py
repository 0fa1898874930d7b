"""Pointwise inversion from internal measurements.

Pipeline per patch, all stages vectorized over nodes:

1. transfer coefficients: each extra field decomposes in the base frame,
   ``H_extra = mu^1 H_1 + mu^2 H_2``, computed as determinant ratios
   (Cramer), so the shared metric factor cancels;
2. Z matrices: columns are the central-difference gradients of the mu's;
3. span rows: ``sym(Z_k H^T Omega)`` with ``Omega = [[0,1],[-1,0]]``,
   vectorized in the orthonormal basis {E11, sqrt(2) E12, E22} of symmetric
   2x2 matrices;
4. the unit-determinant tensor: per node the span has codimension one and
   the sought tensor spans its Frobenius orthocomplement; we take the
   eigenvector of the smallest eigenvalue of the 3x3 Gram of the rows
   (closed-form trigonometric eigenvalues, cross-product eigenvector),
   sign-fixed to positive trace and scaled to unit determinant;
5. the log-density-factor gradient from the pair identity
   ``d(omega_j) = d(log beta) ^ omega_j`` with ``omega_j = gtilde^{-1} H_j``;
   evaluated either in the two-term contracted form ("direct") or by solving
   the 2x2 wedge system ("wedge"); the two are algebraically identical;
6. blending with raised-cosine partition weights, global least-squares
   integration of the gradient, and assembly ``ghat = (exp(logbeta) gtilde)^{-1}``.

Nodes failing the determinant screen, the eigenvalue-gap screen, or positive
definiteness are masked, never guessed.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import gfld
from .elliptic import SolveReport, _cg_mean_zero
from .errors import (AdmissibilityViolated, DisconnectedMask,
                     InvalidConfig, NoAdmissibleTuple, SingularMetric,
                     UncoveredNodes)
from .grid import (GridSpec, MetricField, ScalarField, check_same_grid,
                   ddx, ddy)
from .patches import Patch, PatchCover

GAP_MIN_DEFAULT = 10.0
EPS_FACTOR_DEFAULT = 1e-3
_TINY = 1e-300


# -- small batched kernels ----------------------------------------------------

def sym3_eigvals(a11, a12, a13, a22, a23, a33):
    """Eigenvalues of symmetric 3x3 matrices, ascending, closed form.

    Trigonometric solution of the characteristic cubic (stable for the
    symmetric case); inputs and outputs broadcast over any batch shape.
    """
    q = (a11 + a22 + a33) / 3.0
    p2 = ((a11 - q) ** 2 + (a22 - q) ** 2 + (a33 - q) ** 2
          + 2.0 * (a12 ** 2 + a13 ** 2 + a23 ** 2))
    p = np.sqrt(np.maximum(p2 / 6.0, 0.0))
    safe_p = np.maximum(p, _TINY)
    b11, b22, b33 = (a11 - q) / safe_p, (a22 - q) / safe_p, (a33 - q) / safe_p
    b12, b13, b23 = a12 / safe_p, a13 / safe_p, a23 / safe_p
    detb = (b11 * (b22 * b33 - b23 ** 2) - b12 * (b12 * b33 - b23 * b13)
            + b13 * (b12 * b23 - b22 * b13))
    r = np.clip(detb / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    lam_hi = q + 2.0 * p * np.cos(phi)
    lam_lo = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    lam_mid = 3.0 * q - lam_hi - lam_lo
    return lam_lo, lam_mid, lam_hi


def sym3_smallest_eigvec(a11, a12, a13, a22, a23, a33, lam_lo):
    """Unit eigenvector of the smallest eigenvalue via column cross products.

    For (A - lam I) of rank two the cross product of any two independent
    columns spans the eigenspace; we take the largest of the three
    candidates for stability.  Returns (v (3, ...), ok mask).
    """
    b11, b22, b33 = a11 - lam_lo, a22 - lam_lo, a33 - lam_lo
    c0 = np.stack([b11, a12, a13])
    c1 = np.stack([a12, b22, a23])
    c2 = np.stack([a13, a23, b33])

    def cross(u, v):
        return np.stack([u[1] * v[2] - u[2] * v[1],
                         u[2] * v[0] - u[0] * v[2],
                         u[0] * v[1] - u[1] * v[0]])

    cands = [cross(c0, c1), cross(c0, c2), cross(c1, c2)]
    norms = [np.sqrt(np.sum(c * c, axis=0)) for c in cands]
    best = np.argmax(np.stack(norms), axis=0)
    v = np.choose(best[None, ...], cands)
    nv = np.sqrt(np.sum(v * v, axis=0))
    ok = nv > _TINY
    v = v / np.maximum(nv, _TINY)
    return v, ok


def _erode(valid: np.ndarray) -> np.ndarray:
    """Shrink a block-local validity mask by one plus-stencil layer."""
    out = valid.copy()
    out[1:, :] &= valid[:-1, :]
    out[:-1, :] &= valid[1:, :]
    out[:, 1:] &= valid[:, :-1]
    out[:, :-1] &= valid[:, 1:]
    out[0, :] = out[-1, :] = False
    out[:, 0] = out[:, -1] = False
    return out


def _box3(a: np.ndarray) -> np.ndarray:
    """One-pass 3x3 box average (block-local; edges are masked by callers)."""
    s = (a
         + np.roll(a, 1, 0) + np.roll(a, -1, 0)
         + np.roll(a, 1, 1) + np.roll(a, -1, 1)
         + np.roll(np.roll(a, 1, 0), 1, 1) + np.roll(np.roll(a, 1, 0), -1, 1)
         + np.roll(np.roll(a, -1, 0), 1, 1) + np.roll(np.roll(a, -1, 0), -1, 1))
    return s / 9.0


# -- stage 1: transfer coefficients ------------------------------------------

@dataclass
class TransferCoefficients:
    """mu[k, i] fields: extra k expanded in the base frame, plus a validity mask."""

    mu: np.ndarray     # (m, 2, ...) block or grid shaped
    valid: np.ndarray  # bool, same trailing shape
    eps_adm: float


def _det2(a, b):
    return a[0] * b[1] - a[1] * b[0]


def transfer_coefficients(base, extras, eps_adm: float,
                          require_admissible: bool = True) -> TransferCoefficients:
    """Cramer-ratio coefficients mu over an array block.

    ``base`` is a pair of (2, ...) arrays; ``extras`` a list of (2, ...)
    arrays.  Nodes with |det base| < eps_adm are masked; with
    require_admissible the call fails if any node violates the screen.
    """
    h1, h2 = base
    det = _det2(h1, h2)
    valid = np.abs(det) >= eps_adm
    if require_admissible and not valid.all():
        raise AdmissibilityViolated(
            f"frame determinant below {eps_adm:.3e} at "
            f"{int((~valid).sum())} node(s) inside the patch")
    safe = np.where(valid, det, 1.0)
    mu = np.empty((len(extras), 2, *det.shape))
    for k, v in enumerate(extras):
        mu[k, 0] = _det2(v, h2) / safe
        mu[k, 1] = _det2(h1, v) / safe
    return TransferCoefficients(mu, valid, eps_adm)


# -- stage 2: gradients of the coefficients ----------------------------------

def z_matrices(tc: TransferCoefficients, grid: GridSpec,
               smooth: int | bool = 0):
    """Z_k with columns grad(mu^i_k); masks shrink by one stencil layer.

    Returns (z (m, 2, 2, ...), valid);  z[k, a, i] is the a-derivative of
    mu^i_k.  ``smooth`` applies that many 3x3 box passes to mu first (one
    pass is the standard noisy-data setting; heavier noise needs more).
    """
    mu = tc.mu
    valid = tc.valid
    for _ in range(int(smooth)):
        mu = np.stack([[_box3(mu[k, i]) for i in range(2)]
                       for k in range(mu.shape[0])])
        valid = _erode(valid)
    m = mu.shape[0]
    z = np.empty((m, 2, 2, *mu.shape[2:]))
    for k in range(m):
        for i in range(2):
            z[k, 0, i] = ddx(mu[k, i], grid.hx)
            z[k, 1, i] = ddy(mu[k, i], grid.hy)
    return z, _erode(valid)


# -- stage 3: the symmetric span ----------------------------------------------

def w_span(z: np.ndarray, base) -> np.ndarray:
    """Span rows sym(Z_k H^T Omega) vectorized as (m, 3, ...).

    Component form for n = 2 with P = Z_k H^T:
    M11 = -P[0,1], M22 = P[1,0], sqrt2*M12 = (P[0,0] - P[1,1]) / sqrt(2).
    """
    h1, h2 = base
    m = z.shape[0]
    rows = np.empty((m, 3, *z.shape[3:]))
    for k in range(m):
        p00 = z[k, 0, 0] * h1[0] + z[k, 0, 1] * h2[0]
        p01 = z[k, 0, 0] * h1[1] + z[k, 0, 1] * h2[1]
        p10 = z[k, 1, 0] * h1[0] + z[k, 1, 1] * h2[0]
        p11 = z[k, 1, 0] * h1[1] + z[k, 1, 1] * h2[1]
        rows[k, 0] = -p01
        rows[k, 1] = (p00 - p11) / np.sqrt(2.0)
        rows[k, 2] = p10
    return rows


def normalize_span_rows(rows: np.ndarray) -> np.ndarray:
    """Scale each span row toward unit Frobenius norm.

    The span (hence its orthocomplement) is invariant under per-row scaling,
    but the singular-value diagnostics are not; equalizing rows keeps one
    strong probe from hiding the rest.  Rows far smaller than the node's
    strongest row are only amplified up to a cap, so near-zero rows cannot
    inject pure noise.
    """
    norms = np.sqrt(np.sum(rows ** 2, axis=1))
    cap = 0.01 * norms.max(axis=0, keepdims=True)
    return rows / np.maximum(norms, np.maximum(cap, _TINY))[:, None]


def span_singular_values(rows: np.ndarray):
    """Ascending singular values (s1 <= s2 <= s3) of the stacked span rows.

    Also returns the Gram entries and the sum of its principal 2x2 minors;
    the minor sum equals lam2*lam3 + lam1*(lam2 + lam3) at full precision,
    which the rank screen needs (the trigonometric eigenvalues lose half the
    digits near double roots).
    """
    g11 = np.sum(rows[:, 0] * rows[:, 0], axis=0)
    g12 = np.sum(rows[:, 0] * rows[:, 1], axis=0)
    g13 = np.sum(rows[:, 0] * rows[:, 2], axis=0)
    g22 = np.sum(rows[:, 1] * rows[:, 1], axis=0)
    g23 = np.sum(rows[:, 1] * rows[:, 2], axis=0)
    g33 = np.sum(rows[:, 2] * rows[:, 2], axis=0)
    lam = sym3_eigvals(g11, g12, g13, g22, g23, g33)
    sv = [np.sqrt(np.maximum(l, 0.0)) for l in lam]
    minor2 = ((g11 * g22 - g12 ** 2) + (g11 * g33 - g13 ** 2)
              + (g22 * g33 - g23 ** 2))
    return sv, (g11, g12, g13, g22, g23, g33), minor2


@dataclass
class GtildeResult:
    comps: np.ndarray   # (3, ...) unit-determinant symmetric tensor
    gap: np.ndarray     # sigma_mid / max(sigma_min, tiny)
    cond: np.ndarray    # sigma_mid / sigma_max, the span conditioning
    valid: np.ndarray
    n_low_gap: int
    n_indefinite: int


RANK_TOL = 1e-3  # sigma_mid below this fraction of sigma_max means rank < 2


def recover_gtilde(rows: np.ndarray, valid: np.ndarray,
                   gap_min: float = GAP_MIN_DEFAULT,
                   rank_tol: float = RANK_TOL) -> GtildeResult:
    """Orthocomplement direction of the span, normalized to det = 1.

    The gap sigma_mid / sigma_min certifies that the span has codimension
    exactly one; a separate rank screen (via the Gram minor sum, which keeps
    full precision where the closed-form eigenvalues lose digits) rejects
    nodes where the span nearly collapses to a line.  The floor matters
    beyond exactness: the orthocomplement direction amplifies data
    perturbations by (sigma_max/sigma_mid)^2, so below-floor nodes carry
    meaningless directions.  Masked nodes are counted, never guessed.
    """
    if rows.shape[0] < 2:
        raise InvalidConfig("need at least two span rows per node (m >= 2)")
    rows = normalize_span_rows(rows)
    (s1, s2, s3), gram, minor2 = span_singular_values(rows)
    gap = s2 / np.maximum(s1, 1e-14 * s3 + _TINY)
    gap = np.where(s3 > _TINY, gap, 0.0)

    lam_lo = s1 ** 2
    v, ok = sym3_smallest_eigvec(*gram, lam_lo)
    trace = v[0] + v[2]
    v = np.where(trace < 0, -v, v)
    det = v[0] * v[2] - 0.5 * v[1] ** 2

    # minor2 >= lam2 * lam3, so this is a reliable lower-bound rank test
    rank_ok = minor2 >= (rank_tol ** 2) * (s3 ** 2) ** 2
    good_gap = (gap >= gap_min) & rank_ok & (s3 > _TINY)
    definite = det > 0
    out_valid = valid & ok & good_gap & definite
    n_low_gap = int(np.sum(valid & ok & ~good_gap))
    n_indef = int(np.sum(valid & ok & good_gap & ~definite))

    scale = 1.0 / np.sqrt(np.where(definite, det, 1.0))
    comps = np.stack([v[0] * scale, v[1] / np.sqrt(2.0) * scale, v[2] * scale])
    ident = np.stack([np.ones_like(det), np.zeros_like(det), np.ones_like(det)])
    comps = np.where(out_valid[None], comps, ident)
    cond = s2 / np.maximum(s3, _TINY)
    return GtildeResult(comps, gap, cond, out_valid, n_low_gap, n_indef)


def span_conditioning(base_blocks, extra_blocks, grid: GridSpec,
                      quantile: float = 0.1) -> float:
    """Scale-free score of how robustly the span is two-dimensional.

    Used by probe selection: the ``quantile`` level of sigma_mid / sigma_max
    over the block (after the usual determinant screen and stencil erosion).
    """
    det = np.abs(_det2(*base_blocks))
    s1 = np.median(np.hypot(base_blocks[0][0], base_blocks[0][1]))
    s2 = np.median(np.hypot(base_blocks[1][0], base_blocks[1][1]))
    eps = EPS_FACTOR_DEFAULT * max(s1 * s2, _TINY)
    tc = transfer_coefficients(base_blocks, extra_blocks, eps,
                               require_admissible=False)
    z, valid = z_matrices(tc, grid)
    rows = normalize_span_rows(w_span(z, base_blocks))
    (sa, sb, sc), _, _ = span_singular_values(rows)
    if not valid.any():
        return -np.inf
    ratio = sb[valid] / np.maximum(sc[valid], _TINY)
    return float(np.quantile(ratio, quantile))


# -- stage 5: gradient of log beta -------------------------------------------

def _gtilde_inverse_apply(gt, h):
    """gtilde^{-1} h for unit-determinant gt stored as (g11, g12, g22)."""
    return np.stack([gt[2] * h[0] - gt[1] * h[1],
                     -gt[1] * h[0] + gt[0] * h[1]])


def _gtilde_apply(gt, h):
    return np.stack([gt[0] * h[0] + gt[1] * h[1],
                     gt[1] * h[0] + gt[2] * h[1]])


def recover_log_beta_gradient(gt_comps, h1, h2, valid, grid: GridSpec,
                              eps_pair: float, path: str = "direct"):
    """Pointwise right side of the gradient equation for log beta.

    With omega_j = gtilde^{-1} H_j and d_j the scalar coefficient of
    d(omega_j), the identity d(omega_j) = F ^ omega_j determines F:

    * "wedge":  F = (d2 omega1 - d1 omega2) / (omega1 ^ omega2);
    * "direct": the contracted two-term evaluation
      F = [(|H1|^2 d2 - (H1.H2) d1) vol(gt H1, gt H2) / (D |H1|^2)] omega1
          - (d1 / |H1|^2) iota_{gt H1} vol,
      with chart dot products and D = |H1|^2|H2|^2 - (H1.H2)^2.

    The two forms are algebraically identical; both are kept so the pairing
    conventions stay cross-checked.  Returns (F (2, ...), valid mask eroded
    by the derivative stencil and the pair-independence screen).
    """
    if path not in ("direct", "wedge"):
        raise InvalidConfig(f"unknown beta path {path!r}")
    dot11 = h1[0] ** 2 + h1[1] ** 2
    dot22 = h2[0] ** 2 + h2[1] ** 2
    dot12 = h1[0] * h2[0] + h1[1] * h2[1]
    dmat = dot11 * dot22 - dot12 ** 2
    pair_ok = dmat >= eps_pair
    if not np.any(pair_ok & valid):
        raise AdmissibilityViolated("pair independence fails on the whole region")

    omega1 = _gtilde_inverse_apply(gt_comps, h1)
    omega2 = _gtilde_inverse_apply(gt_comps, h2)
    d1 = ddx(omega1[1], grid.hx) - ddy(omega1[0], grid.hy)
    d2 = ddx(omega2[1], grid.hx) - ddy(omega2[0], grid.hy)
    out_valid = _erode(valid) & pair_ok

    safe_d = np.where(pair_ok, dmat, 1.0)
    safe_n1 = np.maximum(dot11, _TINY)
    if path == "wedge":
        w12 = omega1[0] * omega2[1] - omega1[1] * omega2[0]
        safe_w = np.where(np.abs(w12) > _TINY, w12, 1.0)
        f = (d2[None] * omega1 - d1[None] * omega2) / safe_w[None]
    else:
        gh1 = _gtilde_apply(gt_comps, h1)
        gh2 = _gtilde_apply(gt_comps, h2)
        vol12 = gh1[0] * gh2[1] - gh1[1] * gh2[0]
        coef = (dot11 * d2 - dot12 * d1) * vol12 / (safe_d * safe_n1)
        iota = np.stack([-gh1[1], gh1[0]])
        f = coef[None] * omega1 - (d1 / safe_n1)[None] * iota
    f = np.where(out_valid[None], f, 0.0)
    return f, out_valid


# -- stage 6: global assembly --------------------------------------------------

def _flood(mask: np.ndarray, start) -> np.ndarray:
    nx, ny = mask.shape
    seen = np.zeros_like(mask)
    seen[start] = True
    queue = deque([start])
    while queue:
        i, j = queue.popleft()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ii, jj = (i + di) % nx, (j + dj) % ny
            if mask[ii, jj] and not seen[ii, jj]:
                seen[ii, jj] = True
                queue.append((ii, jj))
    return seen


def _connected(mask: np.ndarray) -> bool:
    """Single periodic 4-connected component check via BFS."""
    idx = np.argwhere(mask)
    if len(idx) == 0:
        return False
    return bool(np.all(_flood(mask, tuple(idx[0]))[mask]))


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Dominant periodic 4-connected component of a boolean mask."""
    remaining = mask.copy()
    best = np.zeros_like(mask)
    while remaining.any():
        comp = _flood(remaining, tuple(np.argwhere(remaining)[0]))
        if comp.sum() > best.sum():
            best = comp
        remaining &= ~comp
    return best


def integrate_gradient(f_comps: np.ndarray, weight: np.ndarray, grid: GridSpec,
                       tol: float = 1e-10, max_iter: int | None = None):
    """Weighted least-squares potential: minimize sum w |grad v - F|^2.

    Uses the same central-difference gradient as the forward stencil, so an
    exact discrete gradient field integrates back to its potential (up to
    the mean).  CG keeps the iterates orthogonal to the operator kernel; any
    kernel content of the true potential (checkerboard modes, and with
    zero-weight holes some hole-local modes) is dropped, which for smooth
    fields costs O(1e-3) near holes and nothing elsewhere.  Returns
    (v mean-zero over the mask, SolveReport).
    """
    mask = weight > 0
    if not mask.any():
        raise DisconnectedMask("weight field is identically zero")
    if not _connected(mask):
        raise DisconnectedMask("admissible region is not connected")

    def apply_op(v):
        return (-ddx(weight * ddx(v, grid.hx), grid.hx)
                - ddy(weight * ddy(v, grid.hy), grid.hy))

    rhs = (-ddx(weight * f_comps[0], grid.hx)
           - ddy(weight * f_comps[1], grid.hy))
    if max_iter is None:
        max_iter = 100 * max(grid.nx, grid.ny)
    v, it, rel = _cg_mean_zero(apply_op, rhs, tol, max_iter)
    v = v - v[mask].mean()
    report = SolveReport(it, rel, 0.0, rel <= tol)
    return v, report


@dataclass
class PatchResult:
    patch: Patch
    probe_ids: tuple[str, ...]
    base_margin: float
    gap_metric: float
    gt_comps: np.ndarray      # (3, ni, nj) on the patch window
    gt_valid: np.ndarray
    f_comps: np.ndarray       # (2, ni, nj)
    f_valid: np.ndarray
    gap: np.ndarray
    n_low_gap: int
    n_indefinite: int


def blend_patches(results, cover: PatchCover):
    """Partition-of-unity blend of per-patch tensors and gradient fields.

    Weights are raised-cosine windows masked by per-patch validity and
    renormalized to sum to one on the covered region.  The blended tensor is
    symmetrized by storage and rescaled back to unit determinant.  Raises
    UncoveredNodes only when the cover geometry itself (ignoring masks)
    leaves holes; mask-induced holes simply stay outside the result masks.
    """
    grid = cover.grid
    geom_w = cover.total_weight()
    if np.any(geom_w <= 0):
        raise UncoveredNodes(geom_w <= 0)

    w_gt = np.zeros(grid.shape)
    w_f = np.zeros(grid.shape)
    gt_acc = np.zeros((3, *grid.shape))
    f_acc = np.zeros((2, *grid.shape))
    gap_acc = np.zeros(grid.shape)
    for r in results:
        win = cover.weight_window(r.patch)
        wg = win * r.gt_valid
        wf = win * r.f_valid
        cover.scatter(r.patch, wg, w_gt)
        cover.scatter(r.patch, wf, w_f)
        cover.scatter(r.patch, wg[None] * r.gt_comps, gt_acc)
        cover.scatter(r.patch, wf[None] * r.f_comps, f_acc)
        cover.scatter(r.patch, wg * r.gap, gap_acc)

    gt_mask = w_gt > 0
    f_mask = w_f > 0
    gt = np.where(gt_mask[None], gt_acc / np.maximum(w_gt, _TINY)[None], 0.0)
    det = gt[0] * gt[2] - gt[1] ** 2
    bad = gt_mask & (det <= 0)
    gt_mask &= ~bad
    scale = 1.0 / np.sqrt(np.where(det > 0, det, 1.0))
    gt = gt * scale[None]
    ident = np.stack([np.ones(grid.shape), np.zeros(grid.shape),
                      np.ones(grid.shape)])
    gt = np.where(gt_mask[None], gt, ident)
    f = np.where(f_mask[None], f_acc / np.maximum(w_f, _TINY)[None], 0.0)
    gap = np.where(gt_mask, gap_acc / np.maximum(w_gt, _TINY), 0.0)
    return gt, f, gap, w_gt, gt_mask, f_mask


def assemble_metric(gt_comps: np.ndarray, logbeta: np.ndarray,
                    grid: GridSpec, mask: np.ndarray) -> MetricField:
    """ghat = (exp(logbeta) * gtilde)^{-1}; identity filler off the mask."""
    det = gt_comps[0] * gt_comps[2] - gt_comps[1] ** 2
    if np.any(np.abs(det[mask] - 1.0) > 1e-6):
        raise SingularMetric("blended gtilde drifted off unit determinant")
    scale = np.exp(-logbeta)
    comps = np.stack([gt_comps[2] * scale, -gt_comps[1] * scale,
                      gt_comps[0] * scale])
    ident = np.stack([np.ones(grid.shape), np.zeros(grid.shape),
                      np.ones(grid.shape)])
    comps = np.where(mask[None], comps / np.maximum(det, _TINY)[None], ident)
    return MetricField(grid, comps)


@dataclass
class GaugeReport:
    s: float
    relerr: np.ndarray
    median: float
    max: float


def gauge_compare(ghat: MetricField, g_true: MetricField,
                  mask: np.ndarray) -> GaugeReport:
    """Best multiplicative gauge and the residual Frobenius error field."""
    check_same_grid(ghat, g_true)

    def fro_dot(a, b):
        return a[0] * b[0] + 2.0 * a[1] * b[1] + a[2] * b[2]

    a = ghat.comps
    b = g_true.comps
    num = float(np.sum(fro_dot(a, b)[mask]))
    den = float(np.sum(fro_dot(a, a)[mask]))
    s = num / max(den, _TINY)
    resid = np.sqrt(np.maximum(fro_dot(s * a - b, s * a - b), 0.0))
    norm = np.sqrt(np.maximum(fro_dot(b, b), _TINY))
    relerr = np.where(mask, resid / norm, 0.0)
    vals = relerr[mask]
    return GaugeReport(s, relerr, float(np.median(vals)), float(vals.max()))


# -- driver --------------------------------------------------------------------

@dataclass
class ReconstructionParams:
    m: int = 2
    eps_factor: float = EPS_FACTOR_DEFAULT
    gap_min: float = GAP_MIN_DEFAULT
    mu_smooth_passes: int = 0   # 3x3 box passes on mu (noisy data)
    beta_path: str = "direct"
    tol_cg: float = 1e-10
    # stabilizers for the log-beta stage, which differentiates the recovered
    # tensor: nodes with weak span conditioning are excluded from it, the
    # tensor copy it differentiates is box-smoothed (the reported tensor is
    # not), and the blended gradient field can be box-smoothed again under
    # noise; each pass adds only an O(h^2) bias
    beta_cond_min: float = 0.02
    gtilde_smooth_passes: int = 1
    f_smooth_passes: int = 0

    @property
    def margin(self) -> int:
        """Block margin: one layer per derivative stencil and box pass."""
        return 2 + self.mu_smooth_passes + self.gtilde_smooth_passes


@dataclass
class ReconstructionResult:
    grid: GridSpec
    gtilde: MetricField
    logbeta: ScalarField
    ghat: MetricField
    mask: np.ndarray
    gap: ScalarField
    weight: np.ndarray
    patch_results: list
    failed_patches: list
    counts: dict
    integration_report: SolveReport

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())


def reconstruct_patch(ms, patch: Patch, params: ReconstructionParams) -> PatchResult:
    """Run the pointwise stages on one patch (with a wrapped stencil margin)."""
    from .probes import select_probes

    grid = ms.grid
    margin = params.margin
    sel = select_probes(ms.probes, patch, grid, n=2, m=params.m,
                        eps_factor=params.eps_factor, margin=margin)
    blocks = [patch.extract(ms.probes[k].h_field.comps, grid, margin=margin)
              for k in sel.indices]
    base, extras = blocks[:2], blocks[2:]

    s1 = np.median(np.hypot(base[0][0], base[0][1]))
    s2 = np.median(np.hypot(base[1][0], base[1][1]))
    eps_node = params.eps_factor * max(s1 * s2, _TINY)

    tc = transfer_coefficients(base, extras, eps_node, require_admissible=False)
    interior = tc.valid[margin:-margin, margin:-margin]
    if not interior.all():
        raise AdmissibilityViolated(
            f"frame determinant below {eps_node:.3e} inside the patch")
    z, valid_z = z_matrices(tc, grid, smooth=params.mu_smooth_passes)
    rows = w_span(z, base)
    gt = recover_gtilde(rows, valid_z, gap_min=params.gap_min)

    beta_valid = gt.valid & (gt.cond >= params.beta_cond_min)
    gt_for_beta = gt.comps
    for _ in range(params.gtilde_smooth_passes):
        sm = np.stack([_box3(c) for c in gt_for_beta])
        det = sm[0] * sm[2] - sm[1] ** 2
        gt_for_beta = sm / np.sqrt(np.maximum(det, _TINY))[None]
        beta_valid = _erode(beta_valid)
    f, valid_f = recover_log_beta_gradient(
        gt_for_beta, base[0], base[1], beta_valid, grid,
        eps_pair=eps_node ** 2, path=params.beta_path)

    sl = np.s_[margin:-margin, margin:-margin]
    return PatchResult(patch, tuple(ms.probes[k].probe_id for k in sel.indices),
                       sel.base_margin, sel.gap_metric,
                       gt.comps[(np.s_[:],) + sl], gt.valid[sl],
                       f[(np.s_[:],) + sl], valid_f[sl], gt.gap[sl],
                       gt.n_low_gap, gt.n_indefinite)


def run_reconstruction(ms, cover: PatchCover,
                       params: ReconstructionParams | None = None) -> ReconstructionResult:
    """Full inversion: per-patch recovery, blending, potential integration."""
    if params is None:
        params = ReconstructionParams()
    results, failed = [], []
    for patch in cover.patches:
        try:
            results.append(reconstruct_patch(ms, patch, params))
        except (NoAdmissibleTuple, AdmissibilityViolated) as exc:
            failed.append((patch, str(exc)))
    if not results:
        raise NoAdmissibleTuple("every patch failed the admissibility screens")

    gt, f, gap, w_gt, gt_mask, f_mask = blend_patches(results, cover)
    # optional masked smoothing of the blended gradient field (periodic box
    # with weight-normalized averaging, so mask holes do not bleed zeros in)
    for _ in range(params.f_smooth_passes):
        wf = np.where(f_mask, 1.0, 0.0)
        wsum = _box3(wf)
        f = np.where((wsum > 0) & f_mask,
                     np.stack([_box3(f[0] * wf), _box3(f[1] * wf)])
                     / np.maximum(wsum, _TINY)[None], 0.0)
    # log beta carries one additive gauge per connected component; keep the
    # dominant component and mask stray islets rather than mixing gauges
    main = largest_component(f_mask)
    n_islets = int((f_mask & ~main).sum())
    f_mask = main
    logbeta, report = integrate_gradient(f, np.where(f_mask, w_gt, 0.0),
                                         cover.grid, tol=params.tol_cg)
    mask = gt_mask & f_mask
    ghat = assemble_metric(gt, logbeta, cover.grid, mask)
    counts = {
        "n_patches": len(cover.patches),
        "n_failed_patches": len(failed),
        "n_low_gap": int(sum(r.n_low_gap for r in results)),
        "n_indefinite": int(sum(r.n_indefinite for r in results)),
        "n_islet_nodes": n_islets,
    }
    grid = cover.grid
    return ReconstructionResult(
        grid, MetricField(grid, gt), ScalarField(grid, logbeta), ghat,
        mask, ScalarField(grid, np.where(np.isfinite(gap), gap, 0.0)),
        w_gt, results, failed, counts, report)


def save_result(res: ReconstructionResult, dirpath, gauge: GaugeReport | None = None):
    os.makedirs(dirpath, exist_ok=True)
    gfld.save(os.path.join(dirpath, "gtilde.gfld"), res.gtilde, "gtilde")
    gfld.save(os.path.join(dirpath, "logbeta.gfld"), res.logbeta, "logbeta")
    gfld.save(os.path.join(dirpath, "ghat.gfld"), res.ghat, "ghat")
    gfld.save(os.path.join(dirpath, "gap.gfld"), res.gap, "gap")
    mask_field = ScalarField(res.grid, res.mask.astype(float))
    gfld.save(os.path.join(dirpath, "mask.gfld"), mask_field, "mask")

    lines = [f"coverage={res.coverage:.6f}"]
    for key, val in res.counts.items():
        lines.append(f"{key}={val}")
    lines.append(f"integration_iterations={res.integration_report.iterations}")
    lines.append(f"integration_residual={res.integration_report.rel_residual:.3e}")
    if gauge is not None:
        lines.append(f"gauge_s={gauge.s:.9e}")
        lines.append(f"relerr_median={gauge.median:.6e}")
        lines.append(f"relerr_max={gauge.max:.6e}")
    for r in res.patch_results:
        lines.append(f"patch i0={r.patch.i0} j0={r.patch.j0} "
                     f"probes={','.join(r.probe_ids)} "
                     f"margin={r.base_margin:.4e} gap_metric={r.gap_metric:.4e}")
    for patch, why in res.failed_patches:
        lines.append(f"patch_failed i0={patch.i0} j0={patch.j0} reason={why}")
    with open(os.path.join(dirpath, "report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
