"""Spatial bookkeeping: sub-volume grid, crops, window partition, intersections.

The grid is two-dimensional over (x, y); every cell spans the full z extent
of the volume, so memory tokens are constant along z.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import DimensionError, Tensor, reshape, transpose


class ConfigurationError(ValueError):
    pass


Dims3 = tuple[int, int, int]


@dataclass(frozen=True)
class VolumeGrid:
    volume_dims: Dims3
    cell_counts: tuple[int, int]
    cell_size: tuple[int, int]

    @property
    def M(self) -> int:
        return self.cell_counts[0] * self.cell_counts[1]

    def cell_of(self, x: int, y: int) -> int:
        """Row-major (x-major) cell index of voxel column (x, y)."""
        return (x // self.cell_size[0]) * self.cell_counts[1] + y // self.cell_size[1]

    def cell_box(self, cell: int) -> tuple[tuple[int, int], tuple[int, int]]:
        """Half-open voxel ranges ``((x0, x1), (y0, y1))`` of a cell, clipped to the volume."""
        gx, gy = divmod(cell, self.cell_counts[1])
        sx, sy = self.cell_size
        X, Y, _ = self.volume_dims
        return (gx * sx, min((gx + 1) * sx, X)), (gy * sy, min((gy + 1) * sy, Y))

    def cell_map(self) -> np.ndarray:
        """``[X, Y]`` array of cell indices."""
        X, Y, _ = self.volume_dims
        xs = np.arange(X)[:, None] // self.cell_size[0]
        ys = np.arange(Y)[None, :] // self.cell_size[1]
        return xs * self.cell_counts[1] + ys


@dataclass(frozen=True)
class CropSpec:
    origin: Dims3
    size: Dims3

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))


@dataclass(frozen=True)
class WindowPartition:
    grid_dims: Dims3
    window_size: Dims3

    @property
    def counts(self) -> Dims3:
        return tuple(g // w for g, w in zip(self.grid_dims, self.window_size))

    @property
    def N(self) -> int:
        return int(np.prod(self.counts))

    @property
    def N_u(self) -> int:
        return int(np.prod(self.window_size))


@dataclass(frozen=True)
class IntersectionSet:
    cell_indices: tuple[int, ...]

    @property
    def count(self) -> int:
        return len(self.cell_indices)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def build_grid(volume_dims: Sequence[int], cell_counts: Sequence[int],
               crop_size: Sequence[int] | None = None) -> VolumeGrid:
    """Partition the (x, y) footprint of a volume into ``cell_counts`` cells.

    If ``crop_size`` is given, every cell must be at least as large as the
    crop along x and y. That guarantees a crop straddles at most one cell
    boundary per axis, so it touches at most 4 cells (8 without z-collapse).
    """
    volume_dims = tuple(int(v) for v in volume_dims)
    gx, gy = (int(c) for c in cell_counts)
    if len(volume_dims) != 3 or min(volume_dims) < 1:
        raise ConfigurationError(f"volume dims must be three positive extents, got {volume_dims}")
    if gx < 1 or gy < 1:
        raise ConfigurationError(f"cell counts must be >= 1, got {(gx, gy)}")
    if gx > volume_dims[0] or gy > volume_dims[1]:
        raise ConfigurationError(f"cell counts {(gx, gy)} exceed volume footprint {volume_dims[:2]}")
    cell_size = (_ceil_div(volume_dims[0], gx), _ceil_div(volume_dims[1], gy))
    if crop_size is not None:
        for axis, (s, p) in enumerate(zip(cell_size, crop_size[:2])):
            if s < p:
                raise ConfigurationError(
                    f"cell size {s} along axis {axis} is smaller than crop size {p}; a crop "
                    "could then straddle two boundaries on that axis and intersect more than "
                    "4 cells, breaking the intersection bound"
                )
    return VolumeGrid(volume_dims, (gx, gy), cell_size)


def intersect(grid: VolumeGrid, crop: CropSpec) -> IntersectionSet:
    """Sorted cells whose (x, y) footprint overlaps the crop's footprint."""
    for o, s, v in zip(crop.origin, crop.size, grid.volume_dims):
        if o < 0 or o + s > v:
            raise ConfigurationError(f"crop {crop} lies outside volume {grid.volume_dims}")
    sx, sy = grid.cell_size
    x0, y0 = crop.origin[0] // sx, crop.origin[1] // sy
    x1 = (crop.origin[0] + crop.size[0] - 1) // sx
    y1 = (crop.origin[1] + crop.size[1] - 1) // sy
    gy = grid.cell_counts[1]
    return IntersectionSet(tuple(ix * gy + iy for ix in range(x0, x1 + 1) for iy in range(y0, y1 + 1)))


def partition(grid_dims: Sequence[int], window_size: Sequence[int]) -> WindowPartition:
    grid_dims = tuple(int(g) for g in grid_dims)
    window_size = tuple(int(w) for w in window_size)
    if any(g % w for g, w in zip(grid_dims, window_size)):
        raise DimensionError(f"extent {grid_dims} is not divisible by window size {window_size}")
    return WindowPartition(grid_dims, window_size)


def window_split(x: Tensor, window_size: Sequence[int]) -> Tensor:
    """``[Px, Py, Pz, c] -> [N, N_u, c]`` with windows in lexicographic (wx, wy, wz) order."""
    Px, Py, Pz, c = x.shape
    wx, wy, wz = partition((Px, Py, Pz), window_size).window_size
    t = reshape(x, (Px // wx, wx, Py // wy, wy, Pz // wz, wz, c))
    t = transpose(t, (0, 2, 4, 1, 3, 5, 6))
    return reshape(t, (-1, wx * wy * wz, c))


def window_merge(x: Tensor, grid_dims: Sequence[int], window_size: Sequence[int]) -> Tensor:
    """Inverse of :func:`window_split`."""
    part = partition(grid_dims, window_size)
    (nx, ny, nz), (wx, wy, wz) = part.counts, part.window_size
    c = x.shape[-1]
    if x.shape[:2] != (part.N, part.N_u):
        raise DimensionError(f"window_merge: got {x.shape}, expected ({part.N}, {part.N_u}, c)")
    t = reshape(x, (nx, ny, nz, wx, wy, wz, c))
    t = transpose(t, (0, 3, 1, 4, 2, 5, 6))
    return reshape(t, (nx * wx, ny * wy, nz * wz, c))


def window_index(voxel: Sequence[int], grid_dims: Sequence[int], window_size: Sequence[int]) -> tuple[int, int]:
    """(window, position-in-window) of a voxel under :func:`window_split` ordering."""
    part = partition(grid_dims, window_size)
    (nx, ny, nz), (wx, wy, wz) = part.counts, part.window_size
    x, y, z = voxel
    w = ((x // wx) * ny + y // wy) * nz + z // wz
    p = ((x % wx) * wy + y % wy) * wz + z % wz
    return w, p


def sample_crop(volume_dims: Sequence[int], crop_size: Sequence[int], rng: np.random.Generator) -> CropSpec:
    """Crop with origin drawn uniformly over all positions that keep it inside the volume."""
    volume_dims, crop_size = tuple(volume_dims), tuple(crop_size)
    if any(p > v for p, v in zip(crop_size, volume_dims)):
        raise ConfigurationError(f"crop {crop_size} larger than volume {volume_dims}")
    origin = tuple(int(rng.integers(0, v - p + 1)) for v, p in zip(volume_dims, crop_size))
    return CropSpec(origin, crop_size)


def tile_origins(extent: int, size: int, stride: int) -> list[int]:
    """Origins of a regular 1-D tiling; the last tile is clamped to the edge."""
    if size >= extent:
        return [0]
    origins = list(range(0, extent - size + 1, stride))
    if origins[-1] != extent - size:
        origins.append(extent - size)
    return origins


def tile_crops(volume_dims: Sequence[int], crop_size: Sequence[int], overlap: float = 0.0) -> list[CropSpec]:
    """Regular crop grid covering the volume, x-major order."""
    strides = [max(1, int(round(p * (1.0 - overlap)))) for p in crop_size]
    axes = [tile_origins(v, p, s) for v, p, s in zip(volume_dims, crop_size, strides)]
    return [CropSpec((x, y, z), tuple(crop_size)) for x in axes[0] for y in axes[1] for z in axes[2]]


def pad_to_multiple(volume: np.ndarray, multiple: Sequence[int]) -> np.ndarray:
    """Zero-pad the trailing side of each spatial axis to a multiple of ``multiple``."""
    pads = [(0, (-s) % m) for s, m in zip(volume.shape[:3], multiple)]
    pads += [(0, 0)] * (volume.ndim - 3)
    return np.pad(volume, pads)
