"""Internal measurement data: one vector field H = g^{-1} grad(phi) per probe.

This is the only stage where the ground-truth metric touches the data path.
Sets persist as a manifest plus one 2-component GFLD file per probe; round
trips are bitwise lossless.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from . import gfld
from .errors import FormatError
from .grid import GridSpec, MetricField, ScalarField, VectorField, grad, sharp

MANIFEST_NAME = "measurements.txt"


@dataclass(frozen=True)
class ProbeMeasurement:
    probe_id: str
    h_field: VectorField
    p_plus: tuple[float, float]
    p_minus: tuple[float, float]
    width: float


@dataclass(frozen=True)
class MeasurementSet:
    grid: GridSpec
    probes: tuple[ProbeMeasurement, ...]
    noise_sigma: float = 0.0
    seed: int = 0
    provenance: str = ""

    def __len__(self):
        return len(self.probes)

    def h_fields(self):
        return [p.h_field for p in self.probes]


def measure(g_true: MetricField, phi: ScalarField) -> VectorField:
    """The map-derivative datum: g^{-1} grad(phi) pointwise."""
    return sharp(g_true, grad(phi))


def measure_dictionary(dictionary, g_true: MetricField,
                       provenance: str = "") -> MeasurementSet:
    """Measure every solved probe of a dictionary."""
    probes = []
    for e in dictionary.entries:
        s = e.source
        probes.append(ProbeMeasurement(s.probe_id, measure(g_true, e.phi),
                                       s.p_plus, s.p_minus, s.width))
    return MeasurementSet(dictionary.grid, tuple(probes), 0.0, 0, provenance)


def add_noise(ms: MeasurementSet, sigma: float, seed: int) -> MeasurementSet:
    """Relative Gaussian perturbation: std is sigma times each probe's RMS |H|.

    Deterministic for a given seed; sigma = 0 returns the data unchanged.
    """
    if sigma < 0:
        raise ValueError("noise level must be nonnegative")
    if sigma == 0.0:
        return replace(ms, noise_sigma=0.0, seed=seed)
    rng = np.random.default_rng(seed)
    noisy = []
    for p in ms.probes:
        c = p.h_field.comps
        rms = float(np.sqrt(np.mean(c[0] ** 2 + c[1] ** 2)))
        pert = rng.standard_normal(c.shape) * (sigma * rms)
        noisy.append(ProbeMeasurement(p.probe_id, VectorField(ms.grid, c + pert),
                                      p.p_plus, p.p_minus, p.width))
    return MeasurementSet(ms.grid, tuple(noisy), sigma, seed, ms.provenance)


def save(ms: MeasurementSet, dirpath):
    os.makedirs(dirpath, exist_ok=True)
    g = ms.grid
    lines = [f"gfld-measurements 1 {len(ms.probes)}",
             f"grid {g.nx} {g.ny} {g.lx!r} {g.ly!r}",
             f"noise_sigma {ms.noise_sigma!r}",
             f"seed {ms.seed}",
             f"provenance {ms.provenance or '-'}"]
    for p in ms.probes:
        fname = f"H_{p.probe_id}.gfld"
        lines.append(f"probe {p.probe_id} {p.p_plus[0]!r} {p.p_plus[1]!r} "
                     f"{p.p_minus[0]!r} {p.p_minus[1]!r} {p.width!r} {fname}")
        gfld.save(os.path.join(dirpath, fname), p.h_field, f"H_{p.probe_id}")
    with open(os.path.join(dirpath, MANIFEST_NAME), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load(dirpath) -> MeasurementSet:
    manifest = os.path.join(dirpath, MANIFEST_NAME)
    gfld.require_file(manifest)
    with open(manifest) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    head = lines[0].split()
    if len(head) != 3 or head[0] != "gfld-measurements" or head[1] != "1":
        raise FormatError(f"{manifest}: bad manifest header")
    count = int(head[2])

    meta = {}
    probe_lines = []
    for ln in lines[1:]:
        key = ln.split(None, 1)[0]
        if key == "probe":
            probe_lines.append(ln)
        else:
            meta[key] = ln.split(None, 1)[1] if " " in ln else ""
    try:
        gp = meta["grid"].split()
        grid = GridSpec(int(gp[0]), int(gp[1]), float(gp[2]), float(gp[3]))
        sigma = float(meta["noise_sigma"])
        seed = int(meta["seed"])
    except (KeyError, ValueError, IndexError) as exc:
        raise FormatError(f"{manifest}: malformed metadata") from exc
    provenance = meta.get("provenance", "-")
    provenance = "" if provenance == "-" else provenance

    if len(probe_lines) != count:
        raise FormatError(f"{manifest}: probe count mismatch "
                          f"({len(probe_lines)} lines, header says {count})")
    probes = []
    for ln in probe_lines:
        parts = ln.split()
        if len(parts) != 8:
            raise FormatError(f"{manifest}: bad probe line {ln!r}")
        pid = parts[1]
        h = gfld.load_vector(os.path.join(dirpath, parts[7]))
        if h.grid != grid:
            raise FormatError(
                f"{manifest}: field grid for probe {pid} disagrees with manifest")
        probes.append(ProbeMeasurement(pid, h,
                                       (float(parts[2]), float(parts[3])),
                                       (float(parts[4]), float(parts[5])),
                                       float(parts[6])))
    return MeasurementSet(grid, tuple(probes), sigma, seed, provenance)
