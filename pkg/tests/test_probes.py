import numpy as np
import pytest

from otmetric import elliptic, probes
from otmetric.errors import (DegenerateDipole, InvalidConfig, NoAdmissibleTuple)
from otmetric.grid import MetricField, ScalarField, VectorField, grad, integrate
from otmetric.patches import Patch

from conftest import conformal_metric, torus_grid


def uniform_h(grid, value=1.0):
    return ScalarField(grid, np.full(grid.shape, value))


def test_dipole_rejects_coincident_points(grid64):
    with pytest.raises(DegenerateDipole):
        probes.make_dipole_source(grid64, (1.0, 1.0), (1.0, 1.0), 0.3)


def test_dipole_rejects_unresolved_width(grid64):
    with pytest.raises(InvalidConfig):
        probes.make_dipole_source(grid64, (1.0, 1.0), (2.0, 1.0),
                                  0.5 * grid64.hx)


def test_dipole_zero_mean_and_quiet_region():
    grid = torus_grid(128)
    g = conformal_metric(grid, lambda x, y: 0.1 * np.sin(x) * np.sin(y))
    h = uniform_h(grid, 1.0 / (4 * np.pi ** 2))
    src = probes.make_dipole_source(grid, (np.pi / 2, np.pi),
                                    (3 * np.pi / 2, np.pi), 0.3, g, h)
    f1 = ScalarField(grid, src.field.values * h.values)
    assert abs(integrate(f1, g)) <= 1e-10
    # identically zero outside the two 4-sigma disks
    assert np.max(np.abs(src.field.values[src.quiet_mask])) <= 1e-12
    x, y = grid.node_coords()
    r_plus = np.hypot(grid.wrap_delta(x - np.pi / 2, 0),
                      grid.wrap_delta(y - np.pi, 1))
    far = r_plus > 1.3
    r_minus = np.hypot(grid.wrap_delta(x - 3 * np.pi / 2, 0),
                       grid.wrap_delta(y - np.pi, 1))
    far &= r_minus > 1.3
    assert np.all(src.quiet_mask[far])


def test_dipole_swap_negates_exactly(grid64):
    a, b = (1.0, 2.0), (4.0, 3.5)
    s1 = probes.make_dipole_source(grid64, a, b, 0.4)
    s2 = probes.make_dipole_source(grid64, b, a, 0.4)
    assert np.array_equal(s1.field.values, -s2.field.values)


def test_default_layout_spans_directions(grid64):
    layout = probes.default_layout(grid64)
    assert len(layout.placements) >= 8
    assert layout.n_directions() >= 4


def test_build_dictionary_rejects_thin_layouts(grid64):
    g = MetricField.identity(grid64)
    h = uniform_h(grid64)
    thin = probes.ProbeLayout((((1.0, 1.0), 0.0),) * 8, 0.3, 1.0)
    with pytest.raises(InvalidConfig):
        probes.build_dictionary(grid64, g, h, thin)  # one direction only


def test_build_dictionary_flat_dipole_flux_direction():
    # flat-torus solve oracle: between the bumps the flux is axis-aligned
    grid = torus_grid(64)
    g = MetricField.identity(grid)
    h = uniform_h(grid)
    op = elliptic.assemble(g, h)
    src = probes.make_dipole_source(grid, (np.pi / 2, np.pi),
                                    (3 * np.pi / 2, np.pi), 0.3, g, h)
    phi, rep = elliptic.solve(op, src.field, h, g)
    assert rep.converged
    w = grad(phi)
    # sample the midline between the bumps, away from both supports
    i_mid = grid.nx // 2
    j_mid = grid.ny // 2
    band = w.comps[:, i_mid, j_mid - 2:j_mid + 3]
    assert np.all(np.abs(band[0]) >= 3.0 * np.abs(band[1]))


def _synthetic_probe(grid, comps, pid="s"):
    # measurement-like record with sources far away from the tested patch
    from otmetric.measurements import ProbeMeasurement
    return ProbeMeasurement(pid, VectorField(grid, comps),
                            (0.1, 0.1), (0.3, 0.3), 0.05)


def test_pair_independence_values(grid64):
    ones = np.ones(grid64.shape)
    zeros = np.zeros(grid64.shape)
    e1 = VectorField(grid64, np.stack([ones, zeros]))
    e2 = VectorField(grid64, np.stack([zeros, ones]))
    d11 = VectorField(grid64, np.stack([ones, ones]))
    assert probes.pair_independence(e1, VectorField(grid64, 2 * e1.comps)) == 0.0
    assert probes.pair_independence(e1, e2) == pytest.approx(1.0)
    assert probes.pair_independence(e1, d11) == pytest.approx(1.0)
    assert (probes.pair_independence(e1, e2)
            == probes.pair_independence(e2, e1))


def test_frame_determinant_values(grid64):
    ones = np.ones(grid64.shape)
    zeros = np.zeros(grid64.shape)
    e1 = VectorField(grid64, np.stack([ones, zeros]))
    e2 = VectorField(grid64, np.stack([zeros, ones]))
    h1 = VectorField(grid64, np.stack([2 * ones, zeros]))
    h2 = VectorField(grid64, np.stack([ones, 3 * ones]))
    assert probes.frame_determinant([e1, e1]) == 0.0
    assert probes.frame_determinant([e1, e2]) == pytest.approx(1.0)
    assert probes.frame_determinant([h1, h2]) == pytest.approx(6.0)


def test_frame_determinant_scaling_law(grid64):
    rng = np.random.default_rng(0)
    h1 = VectorField(grid64, rng.standard_normal((2, *grid64.shape)))
    h2 = VectorField(grid64, rng.standard_normal((2, *grid64.shape)))
    s = 2.0  # power of two keeps the identity exact in floating point
    sh1 = VectorField(grid64, s * h1.comps)
    sh2 = VectorField(grid64, s * h2.comps)
    assert (probes.frame_determinant([sh1, sh2])
            == s ** 2 * probes.frame_determinant([h1, h2]))


def test_select_probes_contracts(grid64):
    ones = np.ones(grid64.shape)
    zeros = np.zeros(grid64.shape)
    x, y = grid64.node_coords()
    patch = Patch(34, 20, 34, 20)
    # two transversal base candidates and two curved extras
    fields = [
        np.stack([ones, zeros]),
        np.stack([zeros, ones]),
        np.stack([np.sin(x), 0.3 * ones]),
        np.stack([0.3 * ones, np.sin(x + y)]),
        np.stack([ones, 0.1 * ones]),
    ]
    ms_probes = [_synthetic_probe(grid64, c, f"s{i}") for i, c in enumerate(fields)]
    sel = probes.select_probes(ms_probes, patch, grid64, n=2, m=2)
    assert set(sel.indices[:2]) == {0, 1}
    assert sel.base_margin >= 0.1

    with pytest.raises(InvalidConfig):
        probes.select_probes(ms_probes, patch, grid64, n=2, m=0)
    with pytest.raises(InvalidConfig):
        probes.select_probes(ms_probes[:3], patch, grid64, n=2, m=2)


def test_select_probes_all_parallel_fails(grid64):
    ones = np.ones(grid64.shape)
    zeros = np.zeros(grid64.shape)
    patch = Patch(30, 20, 30, 20)
    base = np.stack([ones, zeros])
    ms_probes = [_synthetic_probe(grid64, (k + 1.0) * base, f"s{k}")
                 for k in range(5)]
    with pytest.raises(NoAdmissibleTuple):
        probes.select_probes(ms_probes, patch, grid64)


def test_select_probes_requires_clear_sources(grid64):
    # sources sitting on the patch disqualify a probe regardless of its field
    from otmetric.measurements import ProbeMeasurement
    ones = np.ones(grid64.shape)
    zeros = np.zeros(grid64.shape)
    patch = Patch(20, 20, 20, 20)
    (x0, x1), (y0, y1) = patch.bounds(grid64)
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    on_patch = [ProbeMeasurement(f"bad{k}",
                                 VectorField(grid64, np.stack([ones, zeros])),
                                 (cx, cy), (cx + 0.5, cy), 0.2)
                for k in range(4)]
    with pytest.raises(NoAdmissibleTuple):
        probes.select_probes(on_patch, patch, grid64)


def test_dictionary_round_trip(tmp_path):
    grid = torus_grid(32)
    g = MetricField.identity(grid)
    h = uniform_h(grid)
    layout = probes.default_layout(grid, sites_per_axis=3, orientations=4,
                                   width=0.45, separation=1.2)
    d = probes.build_dictionary(grid, g, h, layout, tol_cg=1e-8)
    probes.save_dictionary(d, tmp_path / "dict")
    back = probes.load_dictionary(tmp_path / "dict")
    assert len(back) == len(d)
    for e1, e2 in zip(d.entries, back.entries):
        assert e1.source.probe_id == e2.source.probe_id
        assert np.array_equal(e1.phi.values, e2.phi.values)
        assert np.array_equal(e1.source.quiet_mask, e2.source.quiet_mask)
