"""Attention rows along a query voxel's token chain, exported as CSV and PGM.

For a query voxel the chain is: its visual token's W-MSA row (over the
window's visual tokens and window tokens), the G-MSA row of its window's
first window token (over all window tokens of the crop and the intersecting
bank tokens), and the global-MSA row of the bank token of its grid cell
(over all bank tokens). Rows are averaged over heads, so each sums to 1.
Bank tokens hidden from the global stage get weight exactly 0.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CropSpec, intersect, partition, window_index
from .model import SegModel
from .training import context_crops, crop_array, populate_bank


class BoundsError(IndexError):
    pass


@dataclass
class AttentionRow:
    stage: str
    weights: np.ndarray                        # one row, sums to 1
    kinds: list = field(default_factory=list)  # "visual" | "window_token" | "bank"
    coords: list = field(default_factory=list)  # (x, y, z) of each key; cell (ix, iy, 0) for bank
    image: np.ndarray | None = None            # 2-D heat map (x by y), z summed


def _query_crop(model: SegModel, query) -> CropSpec:
    for crop in context_crops(model):
        if all(o <= q < o + s for q, o, s in zip(query, crop.origin, crop.size)):
            return crop
    raise BoundsError(f"query {tuple(query)} is outside the volume {model.cfg.volume_dims}")


def attention_chain(model: SegModel, volume: np.ndarray, query, level: int | None = None,
                    warm: bool = True) -> list[AttentionRow]:
    """Rows of the last block at FINE encoder ``level`` (default: the first one).

    With ``warm`` the bank is first populated over the context tiling;
    otherwise the query crop sees a fresh bank, so every cell outside it is
    unseen.
    """
    cfg = model.cfg
    query = tuple(int(q) for q in query)
    if len(query) != 3 or any(not 0 <= q < d for q, d in zip(query, cfg.volume_dims)):
        raise BoundsError(f"query {query} is outside the volume {cfg.volume_dims}")
    fine = [i for i in range(len(cfg.stages)) if cfg.is_fine(i) and cfg.stages[i].blocks]
    blocked = [i for i in range(len(cfg.stages)) if cfg.stages[i].blocks]
    if level is None:
        level = fine[0] if fine else blocked[0]
    if not cfg.stages[level].blocks:
        raise ValueError(f"encoder level {level} has no attention blocks")
    crop = _query_crop(model, query)
    bank = model.new_bank()
    if warm and bank is not None:
        populate_bank(model, volume, bank)
    probe: dict = {}
    model.forward(crop_array(volume, crop), crop, bank, write=False, decode=False, probe=probe)

    factor = int(np.prod([s.down for s in cfg.stages[: level + 1]]))
    dims = cfg.stage_dims()[level]
    ws = cfg.stage_window(level)
    part = partition(dims, ws)
    local = tuple((q - o) // factor for q, o in zip(query, crop.origin))
    win, pos = window_index(local, dims, ws)
    tag = f"L{level}B{cfg.stages[level].blocks - 1}:"
    rows = []

    a = probe[tag + "w_msa"].mean(axis=1)[win, pos]
    n_u = int(np.prod(ws))
    w_origin = np.array(divmod_window(win, part.counts)) * np.array(ws)
    vis = [tuple(crop.origin[i] + factor * (w_origin[i] + off[i]) for i in range(3))
           for off in np.ndindex(*ws)]
    n_v = len(a) - n_u
    img = a[:n_u].reshape(ws).sum(axis=2)
    rows.append(AttentionRow("w_msa", a, ["visual"] * n_u + ["window_token"] * n_v,
                             vis + [(-1, -1, -1)] * n_v, img))

    if tag + "g_msa" in probe:
        g = probe[tag + "g_msa"][0].mean(axis=0)
        n_win = part.N
        g_row = g[win * cfg.N_v]
        centers = [tuple(crop.origin[i] + factor * (np.array(divmod_window(j, part.counts))[i] * ws[i])
                         for i in range(3)) for j in range(n_win) for _ in range(cfg.N_v)]
        kinds = ["window_token"] * (n_win * cfg.N_v)
        coords = list(centers)
        if bank is not None:
            inter = intersect(model.grid, crop)
            for cell in inter.cell_indices:
                for _ in range(cfg.N_w):
                    kinds.append("bank")
                    coords.append(_cell_coord(model, cell))
        vt = g_row[: n_win * cfg.N_v].reshape(n_win, cfg.N_v).sum(axis=1).reshape(part.counts).sum(axis=2)
        rows.append(AttentionRow("g_msa", g_row, kinds, coords, vt))

    if tag + "global_msa" in probe:
        glob = probe[tag + "global_msa"][0].mean(axis=0)
        M, n_w = model.grid.M, cfg.N_w
        keep = probe.get(tag + "global_msa:keep", np.arange(M * n_w))
        qrow = model.grid.cell_of(query[0], query[1]) * n_w
        full = np.zeros(M * n_w)
        full[keep] = glob[int(np.flatnonzero(keep == qrow)[0])]
        coords = [_cell_coord(model, r // n_w) for r in range(M * n_w)]
        img = full.reshape(M, n_w).sum(axis=1).reshape(model.grid.cell_counts)
        rows.append(AttentionRow("global_msa", full, ["bank"] * (M * n_w), coords, img))
    return rows


def divmod_window(w: int, counts) -> tuple[int, int, int]:
    nx, ny, nz = counts
    wx, rest = divmod(w, ny * nz)
    wy, wz = divmod(rest, nz)
    return wx, wy, wz


def _cell_coord(model: SegModel, cell: int) -> tuple[int, int, int]:
    gx, gy = model.grid.cell_counts
    ix, iy = divmod(cell, gy)
    return ix, iy, 0


def row_csv(row: AttentionRow) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "kind", "x", "y", "z", "weight"])
    for i, (k, c, val) in enumerate(zip(row.kinds, row.coords, row.weights)):
        w.writerow([i, k, *c, f"{val:.17g}"])
    return buf.getvalue()


def to_pgm(image: np.ndarray, zoom: int = 8) -> bytes:
    """Binary 8-bit PGM, scaled so the largest weight maps to 255."""
    img = np.asarray(image, dtype=np.float64)
    top = img.max()
    q = np.zeros(img.shape, dtype=np.uint8) if top <= 0 else np.rint(255.0 * img / top).astype(np.uint8)
    q = np.kron(q, np.ones((zoom, zoom), dtype=np.uint8))
    h, w = q.shape
    # rows of the image run along y, columns along x
    return f"P5\n{h} {w}\n255\n".encode() + np.ascontiguousarray(q.T).tobytes()


def export(rows: list[AttentionRow], prefix, zoom: int = 8) -> list[Path]:
    written = []
    for row in rows:
        base = Path(f"{prefix}_{row.stage}")
        csv_path, pgm_path = base.with_suffix(".csv"), base.with_suffix(".pgm")
        csv_path.write_text(row_csv(row))
        pgm_path.write_bytes(to_pgm(row.image, zoom))
        written += [csv_path, pgm_path]
    return written
