import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from fine3d.geometry import (
    ConfigurationError,
    CropSpec,
    build_grid,
    intersect,
    sample_crop,
    tile_crops,
    window_index,
    window_merge,
    window_split,
)
from fine3d.tensor import DimensionError, Tensor


def brute_force_cells(grid, crop):
    cells = set()
    for x in range(crop.origin[0], crop.origin[0] + crop.size[0]):
        for y in range(crop.origin[1], crop.origin[1] + crop.size[1]):
            cells.add(grid.cell_of(x, y))
    return tuple(sorted(cells))


def test_build_grid_examples():
    g = build_grid((64, 64, 32), (4, 4))
    assert g.M == 16 and g.cell_size == (16, 16)
    one = build_grid((64, 64, 32), (1, 1))
    assert one.M == 1
    assert intersect(one, CropSpec((3, 9, 0), (32, 32, 32))).cell_indices == (0,)


def test_grid_rejects_cells_smaller_than_crop():
    with pytest.raises(ConfigurationError, match="intersect more than 4"):
        build_grid((64, 64, 32), (8, 8), crop_size=(16, 16, 8))


def test_grid_covers_volume_and_maps_each_voxel_once():
    g = build_grid((10, 7, 3), (3, 2))
    assert g.cell_size[0] * g.cell_counts[0] >= 10 and g.cell_size[1] * g.cell_counts[1] >= 7
    cmap = g.cell_map()
    assert cmap.min() == 0 and cmap.max() < g.M
    assert set(np.unique(cmap)) == set(range(g.M))


def test_large_volume_crop_bound_exhaustive():
    g = build_grid((512, 512, 256), (4, 4), crop_size=(128, 128, 128))
    assert g.cell_size == (128, 128)
    # the x and y counts are independent, so a sweep along x covers every origin
    worst = max(intersect(g, CropSpec((ox, 0, 0), (128, 128, 128))).count for ox in range(0, 385))
    assert worst == 2
    for ox, oy in itertools.product(range(0, 385, 7), range(0, 385, 7)):
        assert intersect(g, CropSpec((ox, oy, 0), (128, 128, 128))).count <= 4


def test_intersect_examples():
    g = build_grid((32, 32, 8), (2, 2))
    assert intersect(g, CropSpec((0, 0, 0), (16, 16, 8))).cell_indices == (0,)
    assert intersect(g, CropSpec((5, 0, 0), (16, 16, 8))).cell_indices == (0, 2)
    straddle = CropSpec((5, 9, 0), (16, 16, 8))
    assert intersect(g, straddle).cell_indices == brute_force_cells(g, straddle) == (0, 1, 2, 3)


@pytest.mark.parametrize("vol, cells, crop", [
    ((12, 12, 4), (3, 3), (4, 4, 4)),
    ((16, 9, 2), (2, 3), (5, 3, 2)),
    ((10, 10, 3), (2, 2), (5, 5, 1)),
])
def test_intersect_equals_brute_force_and_bound(vol, cells, crop):
    g = build_grid(vol, cells, crop)
    for ox in range(vol[0] - crop[0] + 1):
        for oy in range(vol[1] - crop[1] + 1):
            c = CropSpec((ox, oy, 0), crop)
            got = intersect(g, c)
            assert got.cell_indices == brute_force_cells(g, c)
            assert 1 <= got.count <= 4


def test_window_split_examples():
    x = Tensor(np.arange(64.0).reshape(4, 4, 4, 1))
    s = window_split(x, (4, 4, 4))
    assert s.shape == (1, 64, 1)
    np.testing.assert_array_equal(s.data.reshape(-1), np.arange(64.0))
    x = np.zeros((8, 4, 4, 1))
    x[5, 0, 0, 0] = 1.0
    s = window_split(Tensor(x), (4, 4, 4))
    assert s.shape[0] == 2 and s.data[1].sum() == 1.0 and s.data[0].sum() == 0.0
    assert window_index((5, 0, 0), (8, 4, 4), (4, 4, 4))[0] == 1


def test_window_split_non_divisible():
    with pytest.raises(DimensionError):
        window_split(Tensor(np.zeros((6, 4, 4, 1))), (4, 4, 4))


@settings(max_examples=40, deadline=None)
@given(st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
       st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
       st.integers(1, 3), st.integers(0, 1000))
def test_window_roundtrip_property(counts, win, c, seed):
    dims = tuple(n * w for n, w in zip(counts, win))
    x = np.random.default_rng(seed).normal(size=dims + (c,))
    s = window_split(Tensor(x), win)
    back = window_merge(s, dims, win)
    assert back.data.tobytes() == x.tobytes()
    assert sorted(s.data.reshape(-1)) == sorted(x.reshape(-1))
    vox = tuple(int(v) - 1 for v in dims)
    w, p = window_index(vox, dims, win)
    np.testing.assert_array_equal(s.data[w, p], x[vox])


def test_sample_crop_examples():
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert sample_crop((8, 8, 4), (8, 8, 4), rng).origin == (0, 0, 0)
    a = [sample_crop((64, 64, 64), (32, 32, 32), np.random.default_rng(3)).origin for _ in range(1)]
    b = [sample_crop((64, 64, 64), (32, 32, 32), np.random.default_rng(3)).origin for _ in range(1)]
    assert a == b
    with pytest.raises(ConfigurationError):
        sample_crop((8, 8, 4), (9, 8, 4), rng)


def test_sample_crop_uniform_chi_square():
    rng = np.random.default_rng(12345)
    origins = np.array([sample_crop((64, 64, 64), (32, 32, 32), rng).origin for _ in range(10_000)])
    for axis in range(3):
        counts = np.bincount(origins[:, axis], minlength=33)
        assert len(counts) == 33
        assert stats.chisquare(counts).pvalue > 0.01


def test_tile_crops_cover_volume():
    crops = tile_crops((32, 24, 8), (16, 16, 8), overlap=0.5)
    cover = np.zeros((32, 24, 8), int)
    for c in crops:
        cover[c.slices()] += 1
    assert cover.min() >= 1
    assert [c.origin[:2] for c in tile_crops((32, 32, 8), (16, 16, 8))] == [(0, 0), (0, 16), (16, 0), (16, 16)]
