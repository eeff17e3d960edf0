"""Synthetic long-range segmentation volumes and the FVOL container.

Each volume holds a *marker* blob whose intensity encodes its class and a
*dependent* blob with one fixed intensity whose label copies the marker's
class. The two blobs sit in different grid cells and are far enough apart
that no crop of the configured size contains voxels of both, so the
dependent's class can only be recovered from context outside the crop.
"""
from __future__ import annotations

import hashlib
import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .geometry import build_grid
from .memory import FormatError

FVOL_MAGIC = b"FVOL0001"
FVOL_VERSION = 1
DTYPE_F32, DTYPE_U8 = 0, 1
_HEADER = struct.Struct("<IIIIBIII")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    volume_dims: tuple = (32, 32, 8)
    grid_cells: tuple = (2, 2)
    classes: int = 3
    marker_radius_range: tuple = (5, 5)
    dependent_radius_range: tuple = (2, 2)
    exclusion: tuple = (16, 16)
    dependent_level: float = -1.0
    noise_sigma: float = 0.1
    blobs: bool = True
    max_retries: int = 10000

    def marker_level(self, k: int) -> float:
        return float(k)


@dataclass(frozen=True)
class Layout:
    marker_class: int
    marker_cell: int
    marker_center: tuple
    marker_radius: int
    dependent_cell: int
    dependent_center: tuple
    dependent_radius: int


def _ball(dims, center, radius) -> np.ndarray:
    x, y, z = np.ogrid[: dims[0], : dims[1], : dims[2]]
    cx, cy, cz = center
    return (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= radius ** 2


def _partner_cell(grid, cell: int) -> int:
    gx, gy = grid.cell_counts
    ix, iy = divmod(cell, gy)
    return (gx - 1 - ix) * gy + (gy - 1 - iy)


def _center_ranges(grid, cell: int, radius: int, z_extent: int):
    """Centres keeping the ball inside its cell in x/y; in z a ball taller
    than the volume is centred and clipped."""
    (x0, x1), (y0, y1) = grid.cell_box(cell)
    rz = min(radius, (z_extent - 1) // 2)
    return (range(x0 + radius, x1 - radius), range(y0 + radius, y1 - radius),
            range(rz, z_extent - rz))


def _separated(spec: SyntheticSpec, lay: Layout) -> bool:
    """True if along x or y the two balls' extents are at least ``exclusion``
    apart, so no window of that size holds a voxel of each."""
    for a in range(2):
        gap = max(lay.dependent_center[a] - lay.dependent_radius - (lay.marker_center[a] + lay.marker_radius),
                  lay.marker_center[a] - lay.marker_radius - (lay.dependent_center[a] + lay.dependent_radius))
        if gap >= spec.exclusion[a]:
            return True
    return False


def sample_layout(spec: SyntheticSpec, rng: np.random.Generator) -> Layout:
    grid = build_grid(spec.volume_dims, spec.grid_cells)
    (m_lo, m_hi), (d_lo, d_hi) = spec.marker_radius_range, spec.dependent_radius_range
    for _ in range(spec.max_retries):
        cell = int(rng.integers(grid.M))
        partner = _partner_cell(grid, cell)
        k = int(rng.integers(1, spec.classes))
        rm, rd = int(rng.integers(m_lo, m_hi + 1)), int(rng.integers(d_lo, d_hi + 1))
        rm_ranges = _center_ranges(grid, cell, rm, spec.volume_dims[2])
        rd_ranges = _center_ranges(grid, partner, rd, spec.volume_dims[2])
        if partner == cell or any(len(r) == 0 for r in rm_ranges + rd_ranges):
            continue
        cm = tuple(int(r[rng.integers(len(r))]) for r in rm_ranges)
        cd = tuple(int(r[rng.integers(len(r))]) for r in rd_ranges)
        lay = Layout(k, cell, cm, rm, partner, cd, rd)
        if _separated(spec, lay):
            return lay
    raise GenerationError(f"no valid blob placement after {spec.max_retries} attempts for {spec}")


def enumerate_layouts(spec: SyntheticSpec) -> Iterator[Layout]:
    """Every valid layout; :func:`sample_layout` draws uniformly from this set."""
    grid = build_grid(spec.volume_dims, spec.grid_cells)
    m_radii = range(spec.marker_radius_range[0], spec.marker_radius_range[1] + 1)
    d_radii = range(spec.dependent_radius_range[0], spec.dependent_radius_range[1] + 1)
    for cell in range(grid.M):
        partner = _partner_cell(grid, cell)
        if partner == cell:
            continue
        for k in range(1, spec.classes):
            for rm, rd in itertools.product(m_radii, d_radii):
                for cm in itertools.product(*_center_ranges(grid, cell, rm, spec.volume_dims[2])):
                    for cd in itertools.product(*_center_ranges(grid, partner, rd, spec.volume_dims[2])):
                        lay = Layout(k, cell, cm, rm, partner, cd, rd)
                        if _separated(spec, lay):
                            yield lay


def render(spec: SyntheticSpec, lay: Layout | None) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free intensity and label volumes of a layout."""
    dims = spec.volume_dims
    vol = np.zeros(dims, dtype=np.float64)
    lab = np.zeros(dims, dtype=np.uint8)
    if lay is not None:
        m = _ball(dims, lay.marker_center, lay.marker_radius)
        d = _ball(dims, lay.dependent_center, lay.dependent_radius)
        vol[m] = spec.marker_level(lay.marker_class)
        vol[d] = spec.dependent_level
        lab[m] = lay.marker_class
        lab[d] = lay.marker_class
    return vol, lab


def generate(spec: SyntheticSpec, seed: int) -> tuple[np.ndarray, np.ndarray, Layout | None]:
    """``(volume float32, labels uint8, layout)``; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    lay = sample_layout(spec, rng) if spec.blobs else None
    vol, lab = render(spec, lay)
    if spec.noise_sigma > 0:
        vol = vol + rng.normal(0.0, spec.noise_sigma, vol.shape)
    return vol.astype(np.float32), lab, lay


def dependent_mask(spec: SyntheticSpec, lay: Layout) -> np.ndarray:
    return _ball(spec.volume_dims, lay.dependent_center, lay.dependent_radius)


def dependent_region(spec: SyntheticSpec, lay: Layout) -> np.ndarray:
    """Full-depth column of the dependent blob's cell; holds no marker voxel."""
    grid = build_grid(spec.volume_dims, spec.grid_cells)
    (x0, x1), (y0, y1) = grid.cell_box(lay.dependent_cell)
    region = np.zeros(spec.volume_dims, dtype=bool)
    region[x0:x1, y0:y1, :] = True
    return region


# FVOL container -------------------------------------------------------------

def write_fvol(path, array: np.ndarray, original_dims=None) -> None:
    """Write a 3-D float32 volume or uint8 label map.

    The three reserved u32 header slots hold the pre-padding extent (zeros
    mean the stored extent is the original one).
    """
    array = np.asarray(array)
    if array.ndim != 3:
        raise ValueError(f"FVOL stores 3-D arrays, got shape {array.shape}")
    if array.dtype == np.uint8:
        code, payload = DTYPE_U8, array.astype("<u1")
    else:
        code, payload = DTYPE_F32, array.astype("<f4")
    orig = tuple(original_dims) if original_dims is not None else (0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(FVOL_MAGIC)
        fh.write(_HEADER.pack(FVOL_VERSION, *array.shape, code, *orig))
        fh.write(np.ascontiguousarray(payload).tobytes())


def read_fvol(path) -> tuple[np.ndarray, tuple]:
    """Returns ``(array, original_dims)``; raises :class:`FormatError` on any malformed input."""
    blob = Path(path).read_bytes()
    if len(blob) < 8 + _HEADER.size or blob[:8] != FVOL_MAGIC:
        raise FormatError(f"{path}: not an FVOL file (bad magic or truncated header)")
    version, X, Y, Z, code, ox, oy, oz = _HEADER.unpack_from(blob, 8)
    if version != FVOL_VERSION:
        raise FormatError(f"{path}: unsupported FVOL version {version}")
    if code not in (DTYPE_F32, DTYPE_U8):
        raise FormatError(f"{path}: unknown dtype code {code}")
    itemsize = 4 if code == DTYPE_F32 else 1
    payload = blob[8 + _HEADER.size:]
    if len(payload) != X * Y * Z * itemsize:
        raise FormatError(f"{path}: header dims {(X, Y, Z)} do not match payload of {len(payload)} bytes")
    dtype = "<f4" if code == DTYPE_F32 else "<u1"
    arr = np.frombuffer(payload, dtype=dtype).reshape(X, Y, Z)
    arr = arr.astype(np.float32 if code == DTYPE_F32 else np.uint8)
    orig = (ox, oy, oz) if (ox, oy, oz) != (0, 0, 0) else (X, Y, Z)
    return arr, orig


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
