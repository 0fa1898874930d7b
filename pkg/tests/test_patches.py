import numpy as np
import pytest

from otmetric.errors import InvalidConfig
from otmetric.patches import Patch, build_uniform_cover

from conftest import torus_grid


def test_patch_minimum_size():
    with pytest.raises(InvalidConfig):
        Patch(0, 8, 0, 32)


def test_patch_wrapped_extraction():
    grid = torus_grid(32)
    arr = np.arange(32 * 32, dtype=float).reshape(32, 32)
    p = Patch(28, 16, 30, 16)  # wraps both axes
    block = p.extract(arr, grid)
    assert block.shape == (16, 16)
    assert block[0, 0] == arr[28, 30]
    assert block[4, 2] == arr[0, 0]
    with_margin = p.extract(arr, grid, margin=2)
    assert with_margin.shape == (20, 20)
    assert np.array_equal(with_margin[2:-2, 2:-2], block)


def test_uniform_cover_geometry():
    grid = torus_grid(128)
    cover = build_uniform_cover(grid, per_axis=5)
    assert len(cover.patches) == 25
    for p in cover.patches:
        assert p.ni >= 16 and p.nj >= 16
    # overlap of neighbours is at least half a patch width
    stride = 128 // 5
    assert cover.patches[0].ni - stride - 1 >= cover.patches[0].ni // 2 - 1
    # every node is covered with positive total weight
    w = cover.total_weight()
    assert np.all(w > 0)


def test_cover_rejects_thin_overlap():
    grid = torus_grid(128)
    with pytest.raises(InvalidConfig):
        build_uniform_cover(grid, per_axis=5, width_factor=1.2)


def test_weight_window_positive_on_patch():
    grid = torus_grid(64)
    cover = build_uniform_cover(grid, per_axis=3)
    for p in cover.patches:
        w = cover.weight_window(p)
        assert w.shape == (p.ni, p.nj)
        assert np.all(w > 0)
