"""Probe sources, the solved probe dictionary, and per-patch selection.

A probe is a dipole of two compactly supported Gaussian-like bumps.  Each
bump is normalized to unit mass against the reference measure ``h dV_g``, so
the difference has exactly zero mean and the source vanishes identically
outside the two 4-sigma disks.  On any patch disjoint from both supports the
solved potential satisfies the homogeneous equation, which is what the
per-patch inversion needs.

Selection screens candidate probes on measured data only: the base pair
maximizes the worst frame determinant over the patch, the extra probes
maximize the conditioning of the symmetric-matrix span they generate.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import elliptic, gfld
from .errors import (DegenerateDipole, FormatError, InvalidConfig,
                     NoAdmissibleTuple)
from .grid import (GridSpec, MetricField, ScalarField, VectorField,
                   check_same_grid, volume_density)
from .patches import Patch

SUPPORT_RADII = 4.0  # bump support radius in units of width


def _smoothstep(t):
    """C-infinity step: 0 for t<=0, 1 for t>=1."""
    t = np.clip(t, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.maximum(t, 1e-300)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.maximum(1.0 - t, 1e-300)), 0.0)
    return a / (a + b)


def periodic_bump(grid: GridSpec, center, width: float) -> np.ndarray:
    """Gaussian bump of std-dev ``width`` cut smoothly to zero at 4*width.

    Exactly Gaussian inside 3*width; multiplied by a smooth window on the
    [3, 4]*width annulus; identically zero outside.
    """
    x, y = grid.node_coords()
    dx = grid.wrap_delta(x - center[0], axis=0)
    dy = grid.wrap_delta(y - center[1], axis=1)
    r = np.hypot(dx, dy)
    core = np.exp(-0.5 * (r / width) ** 2)
    window = _smoothstep((SUPPORT_RADII * width - r) / width)
    return core * window


@dataclass(frozen=True)
class ProbeSource:
    probe_id: str
    p_plus: tuple[float, float]
    p_minus: tuple[float, float]
    width: float
    field: ScalarField          # f1/h, zero mean against h dV_g
    quiet_mask: np.ndarray      # True where the source vanishes identically


def make_dipole_source(grid: GridSpec, p_plus, p_minus, width: float,
                       g: MetricField | None = None,
                       h: ScalarField | None = None,
                       probe_id: str = "probe") -> ProbeSource:
    """Dipole source f1/h with unit-mass bumps of opposite sign.

    Mean correction happens against ``h dV_g`` (each bump is scaled to unit
    reference mass), which keeps the field identically zero on the quiet
    region.  Swapping the endpoints negates the field exactly.
    """
    if width < 2.0 * max(grid.hx, grid.hy):
        raise InvalidConfig("bump width must span at least two grid spacings")
    sep = np.hypot(grid.wrap_delta(p_plus[0] - p_minus[0], 0),
                   grid.wrap_delta(p_plus[1] - p_minus[1], 1))
    if sep < 1e-12 * max(grid.lx, grid.ly):
        raise DegenerateDipole("dipole endpoints coincide")

    if g is None:
        g = MetricField.identity(grid)
    if h is None:
        h = ScalarField(grid, np.full(grid.shape, 1.0))
    ref = h.values * volume_density(g).values * grid.cell_area

    bp = periodic_bump(grid, p_plus, width)
    bm = periodic_bump(grid, p_minus, width)
    mp = np.sum(bp * ref)
    mm = np.sum(bm * ref)
    if mp <= 0 or mm <= 0:
        raise DegenerateDipole("bump carries no mass on this grid")
    field = bp / mp - bm / mm
    quiet = (bp == 0.0) & (bm == 0.0)
    return ProbeSource(probe_id,
                       (float(p_plus[0]), float(p_plus[1])),
                       (float(p_minus[0]), float(p_minus[1])),
                       float(width), ScalarField(grid, field), quiet)


@dataclass(frozen=True)
class ProbeLayout:
    """Deterministic dipole placements: (center, angle) pairs + shared geometry."""

    placements: tuple[tuple[tuple[float, float], float], ...]
    width: float
    separation: float

    def n_directions(self) -> int:
        angles = {round(a % np.pi, 9) for _, a in self.placements}
        return len(angles)


def default_layout(grid: GridSpec, sites_per_axis: int = 5,
                   orientations: int = 4, width: float | None = None,
                   separation: float | None = None,
                   dense: bool = False) -> ProbeLayout:
    """Dipole sites on the lattice staggered against the uniform patch cover.

    With ``sites_per_axis`` equal to the patch count per axis, each site sits
    at the periodic antipode of one patch center, so every patch keeps a
    handful of source-free probes.  Orientations cycle over the site lattice
    (angle index (a + 3b) mod orientations), which puts three or four
    distinct directions into every 3x3 site neighbourhood.

    ``dense`` interleaves a second, half-cell-shifted lattice with rotated
    angles; the extra sites sit closer to the patches (stronger curvature in
    the data), which pays off for noisy measurements.
    """
    lmin = min(grid.lx, grid.ly)
    if width is None:
        width = 0.035 * lmin
    if separation is None:
        separation = 0.15 * lmin
    placements = []
    for a in range(sites_per_axis):
        for b in range(sites_per_axis):
            theta = np.pi * ((a + 3 * b) % orientations) / orientations
            cx = ((a + 0.5) / sites_per_axis) * grid.lx
            cy = ((b + 0.5) / sites_per_axis) * grid.ly
            placements.append(((cx, cy), theta))
            if dense:
                theta2 = np.pi * (((a + 3 * b) % orientations) + 0.5) / orientations
                cx2 = (cx + 0.5 * grid.lx / sites_per_axis) % grid.lx
                cy2 = (cy + 0.5 * grid.ly / sites_per_axis) % grid.ly
                placements.append(((cx2, cy2), theta2))
    return ProbeLayout(tuple(placements), float(width), float(separation))


@dataclass
class ProbeEntry:
    source: ProbeSource
    phi: ScalarField
    report: elliptic.SolveReport


@dataclass
class ProbeDictionary:
    grid: GridSpec
    entries: list[ProbeEntry]

    def __len__(self):
        return len(self.entries)


def build_dictionary(grid: GridSpec, g_true: MetricField, h: ScalarField,
                     layout: ProbeLayout,
                     tol_cg: float = elliptic.DEFAULT_TOL_CG) -> ProbeDictionary:
    """Solve every dipole in the layout against the ground truth."""
    check_same_grid(g_true, h)
    if len(layout.placements) < 8:
        raise InvalidConfig("layout needs at least 8 dipole placements")
    if layout.n_directions() < 4:
        raise InvalidConfig("layout must span at least 4 dipole directions")
    op = elliptic.assemble(g_true, h)
    entries = []
    half = 0.5 * layout.separation
    for idx, (center, angle) in enumerate(layout.placements):
        d = (half * np.cos(angle), half * np.sin(angle))
        src = make_dipole_source(
            grid,
            ((center[0] + d[0]) % grid.lx, (center[1] + d[1]) % grid.ly),
            ((center[0] - d[0]) % grid.lx, (center[1] - d[1]) % grid.ly),
            layout.width, g_true, h, probe_id=f"p{idx:02d}")
        phi, report = elliptic.solve(op, src.field, h, g_true, tol_cg=tol_cg)
        entries.append(ProbeEntry(src, phi, report))
    return ProbeDictionary(grid, entries)


# -- admissibility screens on measured data ---------------------------------

def _patch_values(arr, patch: Patch | None, grid: GridSpec):
    if patch is None:
        return arr
    return patch.extract(arr, grid)


def pair_independence(h1: VectorField, h2: VectorField,
                      patch: Patch | None = None) -> float:
    """min over the patch of |H1|^2 |H2|^2 - (H1.H2)^2 (chart dot products)."""
    check_same_grid(h1, h2)
    a = _patch_values(h1.comps, patch, h1.grid)
    b = _patch_values(h2.comps, patch, h1.grid)
    f1 = (a[0] ** 2 + a[1] ** 2) * (b[0] ** 2 + b[1] ** 2) \
        - (a[0] * b[0] + a[1] * b[1]) ** 2
    return float(f1.min())


def frame_determinant(hs, patch: Patch | None = None) -> float:
    """min over the patch of |det [H1 H2]| for the two base fields."""
    if len(hs) != 2:
        raise InvalidConfig("the frame screen is defined for n = 2 fields")
    check_same_grid(*hs)
    a = _patch_values(hs[0].comps, patch, hs[0].grid)
    b = _patch_values(hs[1].comps, patch, hs[0].grid)
    det = a[0] * b[1] - a[1] * b[0]
    return float(np.abs(det).min())


def _clear_of_patch(grid: GridSpec, patch: Patch, p_plus, p_minus,
                    width: float, margin_nodes: int = 2) -> bool:
    """True when both bump supports stay off the patch (plus a small margin)."""
    (x0, x1), (y0, y1) = patch.bounds(grid)
    pad = SUPPORT_RADII * width + margin_nodes * max(grid.hx, grid.hy)

    def dist_axis(c, a0, a1, period):
        mid = 0.5 * (a0 + a1)
        halfw = 0.5 * (a1 - a0)
        d = abs(c - mid - period * round((c - mid) / period))
        return max(d - halfw, 0.0)

    for p in (p_plus, p_minus):
        dx = dist_axis(p[0], x0, x1, grid.lx)
        dy = dist_axis(p[1], y0, y1, grid.ly)
        if np.hypot(dx, dy) < pad:
            return False
    return True


@dataclass
class Selection:
    indices: tuple[int, ...]      # n base probes then m extras
    base_margin: float            # min |det| / scale on the patch
    gap_metric: float             # span-conditioning quantile for the extras
    eps_adm: float


def select_probes(probes, patch: Patch, grid: GridSpec, n: int = 2, m: int = 2,
                  eps_factor: float = 1e-3, margin: int = 2) -> Selection:
    """Pick an (n+m)-tuple of patch-admissible probes from measured data.

    ``probes`` is a sequence with attributes ``h_field`` (VectorField),
    ``p_plus``, ``p_minus``, ``width``; both the measurement set and the
    probe dictionary satisfy this.  Base pair by best worst-case frame
    determinant, extras by best span conditioning; both scale-free.  Screens
    run on the patch grown by the reconstruction stencil margin, so the
    guaranteed margins hold on every node the stencils later touch.
    """
    if n != 2:
        raise InvalidConfig("selection implements the two-dimensional case (n = 2)")
    if m < 1:
        raise InvalidConfig("need m >= 1 extra probes for the span construction")
    if len(probes) < n + m:
        raise InvalidConfig(f"need at least {n + m} probes, have {len(probes)}")

    cand = [k for k, pr in enumerate(probes)
            if _clear_of_patch(grid, patch, pr.p_plus, pr.p_minus, pr.width,
                               margin_nodes=2 + margin)]
    if len(cand) < n + m:
        raise NoAdmissibleTuple(
            f"only {len(cand)} probes have sources clear of the patch")

    blocks = {k: patch.extract(probes[k].h_field.comps, grid, margin=margin)
              for k in cand}
    scale = {k: float(np.median(np.hypot(blocks[k][0], blocks[k][1])))
             for k in cand}

    best_pair, best_margin = None, -np.inf
    for ia, a in enumerate(cand):
        for b in cand[ia + 1:]:
            det = blocks[a][0] * blocks[b][1] - blocks[a][1] * blocks[b][0]
            s = max(scale[a] * scale[b], 1e-300)
            margin = float(np.abs(det).min()) / s
            if margin > best_margin:
                best_pair, best_margin = (a, b), margin
    if best_pair is None or best_margin < eps_factor:
        raise NoAdmissibleTuple(
            f"best frame margin {best_margin:.3e} below eps_adm {eps_factor:.1e}")

    from . import reconstruction  # local import; selection scores use the span kernel

    rest = [k for k in cand if k not in best_pair]
    base_blocks = (blocks[best_pair[0]], blocks[best_pair[1]])

    def score(extras):
        return reconstruction.span_conditioning(
            base_blocks, [blocks[k] for k in extras], grid)

    # best pair exhaustively, then grow greedily up to m extras
    best_extras, best_gap = None, -np.inf
    if m == 1:
        for a in rest:
            gap = score((a,))
            if gap > best_gap:
                best_extras, best_gap = (a,), gap
    else:
        for ia, a in enumerate(rest):
            for b in rest[ia + 1:]:
                gap = score((a, b))
                if gap > best_gap:
                    best_extras, best_gap = (a, b), gap
    if best_extras is None:
        raise NoAdmissibleTuple("no extra probes available for the span")
    while len(best_extras) < m:
        nxt, nxt_gap = None, -np.inf
        for a in rest:
            if a in best_extras:
                continue
            gap = score(best_extras + (a,))
            if gap > nxt_gap:
                nxt, nxt_gap = a, gap
        if nxt is None:
            raise NoAdmissibleTuple(
                f"only {len(best_extras)} extra probes available, need {m}")
        best_extras, best_gap = best_extras + (nxt,), nxt_gap

    return Selection(best_pair + best_extras, best_margin, best_gap,
                     eps_factor)


# -- persistence -------------------------------------------------------------

def save_dictionary(dictionary: ProbeDictionary, dirpath):
    os.makedirs(dirpath, exist_ok=True)
    lines = [f"gfld-dictionary 1 {len(dictionary.entries)}"]
    for e in dictionary.entries:
        s = e.source
        lines.append(f"probe {s.probe_id} {s.p_plus[0]!r} {s.p_plus[1]!r} "
                     f"{s.p_minus[0]!r} {s.p_minus[1]!r} {s.width!r}")
        gfld.save(os.path.join(dirpath, f"{s.probe_id}_source.gfld"),
                  s.field, f"{s.probe_id}_source")
        gfld.save(os.path.join(dirpath, f"{s.probe_id}_phi.gfld"),
                  e.phi, f"{s.probe_id}_phi")
    with open(os.path.join(dirpath, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dictionary(dirpath) -> ProbeDictionary:
    manifest = os.path.join(dirpath, "manifest.txt")
    gfld.require_file(manifest)
    with open(manifest) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    head = lines[0].split()
    if len(head) != 3 or head[0] != "gfld-dictionary":
        raise FormatError(f"{manifest}: bad dictionary manifest header")
    entries = []
    grid = None
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] != "probe" or len(parts) != 7:
            raise FormatError(f"{manifest}: bad probe line {ln!r}")
        pid = parts[1]
        pp = (float(parts[2]), float(parts[3]))
        pm = (float(parts[4]), float(parts[5]))
        width = float(parts[6])
        fld = gfld.load_scalar(os.path.join(dirpath, f"{pid}_source.gfld"))
        phi = gfld.load_scalar(os.path.join(dirpath, f"{pid}_phi.gfld"))
        if grid is None:
            grid = fld.grid
        if fld.grid != grid or phi.grid != grid:
            raise FormatError(f"{manifest}: grid mismatch for probe {pid}")
        bp = periodic_bump(grid, pp, width)
        bm = periodic_bump(grid, pm, width)
        quiet = (bp == 0.0) & (bm == 0.0)
        src = ProbeSource(pid, pp, pm, width, fld, quiet)
        entries.append(ProbeEntry(src, phi, elliptic.SolveReport(0, 0.0, 0.0, True)))
    if int(head[2]) != len(entries):
        raise FormatError(f"{manifest}: probe count mismatch")
    return ProbeDictionary(grid, entries)
