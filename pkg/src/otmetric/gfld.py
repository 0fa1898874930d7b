"""GFLD v1 field files.

Layout: one ASCII header line

    gfld 1 <nx> <ny> <lx> <ly> <ncomp> <name>\n

followed by ``ncomp * nx * ny`` little-endian IEEE float64 values,
component-major, nodes in row-major order (x-index outermost, matching the
C-order flatten of an ``(nx, ny)`` array).  Round trips are bitwise lossless;
``repr`` formatting of the periods preserves them exactly.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError, IoError
from .grid import CovectorField, GridSpec, MetricField, ScalarField, VectorField

MAGIC = "gfld"
VERSION = 1

_FIELD_NCOMP = {ScalarField: 1, CovectorField: 2, VectorField: 2, MetricField: 3}


def _comps_of(fld):
    if isinstance(fld, ScalarField):
        return fld.values[None, :, :]
    return fld.comps


def save(path, fld, name: str):
    """Write a field to a GFLD v1 file."""
    if " " in name or not name:
        raise ValueError("field name must be nonempty and free of spaces")
    g = fld.grid
    comps = _comps_of(fld)
    header = f"{MAGIC} {VERSION} {g.nx} {g.ny} {g.lx!r} {g.ly!r} {comps.shape[0]} {name}\n"
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(np.ascontiguousarray(comps, dtype="<f8").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load(path):
    """Read a GFLD v1 file; returns (GridSpec, comps (ncomp, nx, ny), name)."""
    try:
        with open(path, "rb") as fh:
            header = fh.readline()
            payload = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    try:
        parts = header.decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: header is not ASCII") from exc
    if len(parts) != 8 or parts[0] != MAGIC:
        raise FormatError(f"{path}: bad magic/header {parts[:2]}")
    if int(parts[1]) != VERSION:
        raise FormatError(f"{path}: unsupported version {parts[1]}")
    try:
        nx, ny = int(parts[2]), int(parts[3])
        lx, ly = float(parts[4]), float(parts[5])
        ncomp = int(parts[6])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header numbers") from exc
    name = parts[7]

    expected = ncomp * nx * ny * 8
    if len(payload) != expected:
        raise FormatError(f"{path}: payload {len(payload)} bytes, expected {expected}")
    comps = np.frombuffer(payload, dtype="<f8").reshape(ncomp, nx, ny).astype(np.float64)
    return GridSpec(nx, ny, lx, ly), comps, name


def save_field(path, fld, name: str):
    save(path, fld, name)


def load_scalar(path) -> ScalarField:
    g, comps, _ = load(path)
    if comps.shape[0] != 1:
        raise FormatError(f"{path}: expected 1 component, found {comps.shape[0]}")
    return ScalarField(g, comps[0])


def load_vector(path) -> VectorField:
    g, comps, _ = load(path)
    if comps.shape[0] != 2:
        raise FormatError(f"{path}: expected 2 components, found {comps.shape[0]}")
    return VectorField(g, comps)


def load_covector(path) -> CovectorField:
    g, comps, _ = load(path)
    if comps.shape[0] != 2:
        raise FormatError(f"{path}: expected 2 components, found {comps.shape[0]}")
    return CovectorField(g, comps)


def load_metric(path) -> MetricField:
    g, comps, _ = load(path)
    if comps.shape[0] != 3:
        raise FormatError(f"{path}: expected 3 components, found {comps.shape[0]}")
    return MetricField(g, comps)


def require_file(path):
    if not os.path.isfile(path):
        raise IoError(f"missing file: {path}")
    return path
