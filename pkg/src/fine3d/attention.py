"""Window, global and volume attention and their composition into the FINE block.

Token layout conventions:

* visual tokens ``u``: ``[N, N_u, c]``, windows in lexicographic order
* window tokens ``v``: ``[N, N_v, c]``, aligned with the windows of ``u``
* volume tokens ``w``: ``[M * N_w, c]``, cell-major

Masked attention is computed by gathering the visible rows, attending over
them only and scattering the result back; hidden rows pass through
unchanged. This makes a masked run bit-identical to a run on the sequence
with the hidden rows removed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import MLP, LayerNorm, Linear, Module, param
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    concat,
    expand,
    gather_rows,
    mac_tag,
    matmul,
    reshape,
    scale,
    scatter_rows,
    softmax,
    split,
    transpose,
)

ABLATIONS = ("none", "no-volume-tokens", "no-memory")


@dataclass(frozen=True)
class FineBlockConfig:
    c: int
    heads: int = 2
    N_v: int = 1
    N_w: int = 1
    mlp_ratio: float = 2.0
    rel_pos_bias: bool = True

    def __post_init__(self):
        if self.c % self.heads:
            raise ValueError(f"embed dim {self.c} not divisible by {self.heads} heads")
        if self.N_v < 1 or self.N_w < 1:
            raise ValueError("N_v and N_w must be >= 1")


def relative_position_index(window_size: Sequence[int], n_mem: int) -> np.ndarray:
    """Bias-table index for every (query, key) pair of a window sequence.

    Visual pairs index a ``(2Wx-1)(2Wy-1)(2Wz-1)`` table by coordinate
    offset. Any memory key uses entry ``T``; a memory query on a visual key
    uses entry ``T + 1``.
    """
    wx, wy, wz = window_size
    coords = np.stack(np.meshgrid(np.arange(wx), np.arange(wy), np.arange(wz), indexing="ij"), -1).reshape(-1, 3)
    rel = coords[:, None, :] - coords[None, :, :] + np.array([wx - 1, wy - 1, wz - 1])
    vis = (rel[..., 0] * (2 * wy - 1) + rel[..., 1]) * (2 * wz - 1) + rel[..., 2]
    T = (2 * wx - 1) * (2 * wy - 1) * (2 * wz - 1)
    n_u = len(coords)
    L = n_u + n_mem
    idx = np.empty((L, L), dtype=np.int64)
    idx[:n_u, :n_u] = vis
    idx[n_u:, :n_u] = T + 1
    idx[:, n_u:] = T
    return idx


class MSA(Module):
    """Pre-norm multi-head self-attention with residual, ``x + proj(attn(norm(x)))``."""

    def __init__(self, c: int, heads: int, rng: np.random.Generator,
                 window_size: Sequence[int] | None = None, n_mem: int = 0):
        self.c, self.heads = c, heads
        self.norm = LayerNorm(c)
        self.qkv = Linear(c, 3 * c, rng)
        self.proj = Linear(c, c, rng)
        self.rel_index = None
        if window_size is not None:
            self.rel_index = relative_position_index(window_size, n_mem)
            self.rel_bias = param(rng.normal(0.0, 0.02, (int(self.rel_index.max()) + 1, heads)))

    def attend(self, x: Tensor, probe: dict | None = None, key: str | None = None) -> Tensor:
        """Attention over every row of ``x[B, L, c]``."""
        B, L, c = x.shape
        H, d = self.heads, c // self.heads
        h = self.norm(x)
        with mac_tag(kind="proj"):
            qkv = self.qkv(h)
        qkv = transpose(reshape(qkv, (B, L, 3, H, d)), (2, 0, 3, 1, 4))
        q, k, v = (reshape(t, (B, H, L, d)) for t in split(qkv, [1, 1, 1], axis=0))
        with mac_tag(kind="attn"):
            logits = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
            if self.rel_index is not None:
                if self.rel_index.shape != (L, L):
                    raise DimensionError(f"sequence length {L} does not match the bias table {self.rel_index.shape}")
                bias = gather_rows(self.rel_bias, self.rel_index.reshape(-1))
                logits = logits + transpose(reshape(bias, (L, L, H)), (2, 0, 1))
            attn = softmax(logits, axis=-1)
            out = matmul(attn, v)
        if probe is not None and key is not None:
            probe[key] = attn.data.copy()
        out = reshape(transpose(out, (0, 2, 1, 3)), (B, L, c))
        with mac_tag(kind="proj"):
            out = self.proj(out)
        return x + out

    def __call__(self, x: Tensor, mask=None, probe: dict | None = None, key: str | None = None) -> Tensor:
        return _masked(lambda t: self.attend(t, probe, key), x, mask, probe, key)


def _masked(fn, x: Tensor, mask, probe=None, key=None) -> Tensor:
    """Apply ``fn`` to the visible rows of a single sequence ``x[L, c]``.

    ``mask`` is True where a row is hidden. With no mask, ``x`` may also be
    batched ``[B, L, c]``.
    """
    if mask is None or not np.any(mask):
        if x.ndim == 2:
            return reshape(fn(reshape(x, (1,) + x.shape)), x.shape)
        return fn(x)
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 2 or mask.shape != (x.shape[0],):
        raise DimensionError(f"mask of shape {mask.shape} does not match sequence {x.shape}")
    keep = np.flatnonzero(~mask)
    if keep.size == 0:
        raise ContractError("every token is masked; no key is visible to any query")
    sub = gather_rows(x, keep)
    out = reshape(fn(reshape(sub, (1,) + sub.shape)), sub.shape)
    if probe is not None and key in probe:
        probe[key + ":keep"] = keep
    return scatter_rows(x, keep, out)


class Stage(Module):
    """One attention sub-layer followed by an MLP sub-layer, both pre-norm residual."""

    def __init__(self, c: int, heads: int, mlp_ratio: float, rng: np.random.Generator,
                 window_size: Sequence[int] | None = None, n_mem: int = 0):
        self.attn = MSA(c, heads, rng, window_size, n_mem)
        self.mlp = MLP(c, mlp_ratio, rng)

    def __call__(self, x: Tensor, mask=None, probe: dict | None = None, key: str | None = None) -> Tensor:
        return _masked(lambda t: self.mlp(self.attn.attend(t, probe, key)), x, mask, probe, key)


def msa(seq: Tensor, layer: MSA, mask=None) -> Tensor:
    """Multi-head self-attention over one sequence ``[L, c]`` with optional hidden-row mask."""
    return layer(seq, mask)


class WindowBlock(Module):
    """Plain window attention block over visual tokens only."""

    def __init__(self, c: int, heads: int, mlp_ratio: float, window_size, rng, rel_pos_bias: bool = True):
        self.stage = Stage(c, heads, mlp_ratio, rng, window_size if rel_pos_bias else None, 0)

    def __call__(self, u: Tensor, probe=None, tag: str = "") -> Tensor:
        with mac_tag(stage="w_msa"):
            return self.stage(u, probe=probe, key=tag + "w_msa")


class FineBlock(Module):
    """W-MSA over [u, v] per window, G-MSA over [v, w_cap], then MSA over all of w."""

    def __init__(self, cfg: FineBlockConfig, window_size, rng: np.random.Generator, ablation: str = "none"):
        if ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablation!r}")
        self.cfg, self.ablation = cfg, ablation
        bias_ws = window_size if cfg.rel_pos_bias else None
        n_mem = 0 if ablation == "no-memory" else cfg.N_v
        self.w_stage = Stage(cfg.c, cfg.heads, cfg.mlp_ratio, rng, bias_ws, n_mem)
        if ablation != "no-memory":
            self.g_stage = Stage(cfg.c, cfg.heads, cfg.mlp_ratio, rng)
        if ablation == "none":
            self.v_stage = Stage(cfg.c, cfg.heads, cfg.mlp_ratio, rng)

    def w_msa(self, u: Tensor, v: Tensor | None, probe=None, tag: str = ""):
        with mac_tag(stage="w_msa"):
            if v is None:
                return self.w_stage(u, probe=probe, key=tag + "w_msa"), None
            if u.shape[0] != v.shape[0]:
                raise DimensionError(f"{u.shape[0]} visual windows vs {v.shape[0]} window-token groups")
            n_u = u.shape[1]
            out = self.w_stage(concat([u, v], axis=1), probe=probe, key=tag + "w_msa")
            u2, v2 = split(out, [n_u, out.shape[1] - n_u], axis=1)
            return u2, v2

    def g_msa(self, v: Tensor, w_cap: Tensor | None, probe=None, tag: str = ""):
        N, n_v, c = v.shape
        flat = reshape(v, (N * n_v, c))
        with mac_tag(stage="g_msa"):
            if w_cap is None:
                return reshape(self.g_stage(flat, probe=probe, key=tag + "g_msa"), v.shape), None
            if w_cap.shape[0] == 0:
                raise ContractError("G-MSA needs at least one intersecting volume token")
            out = self.g_stage(concat([flat, w_cap], axis=0), probe=probe, key=tag + "g_msa")
            v2, w2 = split(out, [N * n_v, w_cap.shape[0]], axis=0)
            return reshape(v2, v.shape), w2

    def global_msa(self, w: Tensor, hidden, probe=None, tag: str = "") -> Tensor:
        with mac_tag(stage="global_msa"):
            return self.v_stage(w, mask=hidden, probe=probe, key=tag + "global_msa")

    def __call__(self, u: Tensor, v: Tensor | None, bank: Tensor | None, rows, hidden,
                 probe: dict | None = None, tag: str = ""):
        """Returns ``(u', v', bank')``.

        ``rows`` are the bank rows of the intersecting cells in ascending
        cell order; ``hidden`` marks bank rows of never-seen cells.
        """
        u, v = self.w_msa(u, v, probe, tag)
        if self.ablation == "no-memory":
            return u, None, None
        if self.ablation == "no-volume-tokens":
            v, _ = self.g_msa(v, None, probe, tag)
            return u, v, None
        w_cap = gather_rows(bank, rows)
        v, w_cap = self.g_msa(v, w_cap, probe, tag)
        bank = scatter_rows(bank, rows, w_cap)
        bank = self.global_msa(bank, hidden, probe, tag)
        return u, v, bank


def init_window_tokens(embedding: Tensor, n_windows: int) -> Tensor:
    """Broadcast the learned ``[N_v, c]`` window-token embedding to every window."""
    return expand(embedding, (n_windows,))
