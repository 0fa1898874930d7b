import numpy as np
import pytest

from otmetric import measurements as ms_mod
from otmetric.errors import FormatError
from otmetric.grid import MetricField, ScalarField, VectorField, grad
from otmetric.measurements import MeasurementSet, ProbeMeasurement

from conftest import conformal_metric, scalar_from, torus_grid


def test_measure_constant_phi_gives_zero(grid64):
    phi = ScalarField(grid64, np.full(grid64.shape, 3.0))
    h = ms_mod.measure(MetricField.identity(grid64), phi)
    assert np.all(h.comps == 0.0)


def test_measure_identity_metric_is_gradient(grid64):
    phi = scalar_from(grid64, lambda x, y: np.sin(x) * np.cos(y))
    h = ms_mod.measure(MetricField.identity(grid64), phi)
    assert np.array_equal(h.comps, grad(phi).comps)


def test_measure_conformal_oracle():
    grid = torus_grid(128)
    lam_fn = lambda x, y: 0.1 * np.sin(y)
    g = conformal_metric(grid, lam_fn)
    phi = scalar_from(grid, lambda x, y: np.sin(x))
    h = ms_mod.measure(g, phi)
    x, y = grid.node_coords()
    expect = np.exp(-2 * lam_fn(x, y)) * np.cos(x)
    assert np.max(np.abs(h.comps[0] - expect)) <= (2 * np.pi / 128) ** 2
    assert np.max(np.abs(h.comps[1])) <= 1e-12


def test_measure_scaling_law(grid64):
    phi = scalar_from(grid64, lambda x, y: np.sin(x + y))
    g = conformal_metric(grid64, lambda x, y: 0.2 * np.sin(x))
    c0 = 4.0  # power of two: the pointwise inverse scales exactly
    h1 = ms_mod.measure(g, phi)
    h2 = ms_mod.measure(MetricField(grid64, c0 * g.comps), phi)
    assert np.allclose(h2.comps, h1.comps / c0, rtol=0, atol=1e-15)


def test_measure_linearity(grid64):
    g = conformal_metric(grid64, lambda x, y: 0.1 * np.cos(x + y))
    u = scalar_from(grid64, lambda x, y: np.sin(x))
    v = scalar_from(grid64, lambda x, y: np.cos(2 * y))
    both = ScalarField(grid64, 2.0 * u.values + 3.0 * v.values)
    hu = ms_mod.measure(g, u).comps
    hv = ms_mod.measure(g, v).comps
    hb = ms_mod.measure(g, both).comps
    assert np.allclose(hb, 2.0 * hu + 3.0 * hv, atol=1e-13)


def _small_set(grid, k=3, seed=0):
    rng = np.random.default_rng(seed)
    probes = tuple(
        ProbeMeasurement(f"p{i:02d}",
                         VectorField(grid, rng.standard_normal((2, *grid.shape))),
                         (0.5 + i, 1.0), (2.5 + i, 1.0), 0.3)
        for i in range(k))
    return MeasurementSet(grid, probes, 0.0, 0, "cfg:deadbeef")


def test_noise_zero_sigma_identical(grid32):
    ms = _small_set(grid32)
    out = ms_mod.add_noise(ms, 0.0, seed=5)
    for a, b in zip(ms.probes, out.probes):
        assert a.h_field.comps is b.h_field.comps


def test_noise_deterministic_per_seed(grid32):
    ms = _small_set(grid32)
    a = ms_mod.add_noise(ms, 0.01, seed=42)
    b = ms_mod.add_noise(ms, 0.01, seed=42)
    for pa, pb in zip(a.probes, b.probes):
        assert np.array_equal(pa.h_field.comps, pb.h_field.comps)
    c = ms_mod.add_noise(ms, 0.01, seed=43)
    assert not np.array_equal(a.probes[0].h_field.comps,
                              c.probes[0].h_field.comps)


def test_noise_amplitude_meets_law_of_large_numbers():
    grid = torus_grid(128)
    ms = _small_set(grid, k=1, seed=1)
    sigma = 0.01
    out = ms_mod.add_noise(ms, sigma, seed=7)
    c0 = ms.probes[0].h_field.comps
    pert = out.probes[0].h_field.comps - c0
    rms_h = np.sqrt(np.mean(c0[0] ** 2 + c0[1] ** 2))
    rms_pert = np.sqrt(np.mean(pert ** 2))
    assert abs(rms_pert - sigma * rms_h) <= 0.1 * sigma * rms_h


def test_save_load_round_trip(tmp_path, grid32):
    ms = ms_mod.add_noise(_small_set(grid32), 0.02, seed=9)
    ms_mod.save(ms, tmp_path / "m")
    back = ms_mod.load(tmp_path / "m")
    assert back.grid == ms.grid
    assert back.noise_sigma == ms.noise_sigma
    assert back.seed == 9
    assert back.provenance == ms.provenance
    for a, b in zip(ms.probes, back.probes):
        assert a.probe_id == b.probe_id
        assert a.p_plus == b.p_plus and a.p_minus == b.p_minus
        assert a.width == b.width
        assert np.array_equal(a.h_field.comps, b.h_field.comps)


def test_load_rejects_truncated_manifest(tmp_path, grid32):
    ms = _small_set(grid32)
    ms_mod.save(ms, tmp_path / "m")
    manifest = tmp_path / "m" / ms_mod.MANIFEST_NAME
    lines = manifest.read_text().splitlines()
    manifest.write_text("\n".join(lines[:-1]) + "\n")  # drop one probe line
    with pytest.raises(FormatError):
        ms_mod.load(tmp_path / "m")


def test_load_rejects_grid_mismatch(tmp_path, grid32):
    ms = _small_set(grid32)
    ms_mod.save(ms, tmp_path / "m")
    manifest = tmp_path / "m" / ms_mod.MANIFEST_NAME
    text = manifest.read_text().replace("grid 32 32", "grid 64 64")
    manifest.write_text(text)
    with pytest.raises(FormatError):
        ms_mod.load(tmp_path / "m")
