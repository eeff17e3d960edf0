"""Desk-scale U-shaped segmentation network with FINE blocks in the encoder.

Down- and up-sampling are non-overlapping strided convolutions (kernel ==
stride), which reduce to a patch reshape followed by a matrix product.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .attention import ABLATIONS, FineBlock, FineBlockConfig, WindowBlock, init_window_tokens
from .geometry import CropSpec, VolumeGrid, build_grid, intersect, partition, window_merge, window_split
from .memory import MemoryBank
from .nn import MLP, Linear, Module, param
from .tensor import DimensionError, Tensor, mac_tag, reshape, transpose


@dataclass(frozen=True)
class StageSpec:
    dim: int
    blocks: int
    down: int


@dataclass
class ModelConfig:
    volume_dims: tuple = (32, 32, 8)
    grid_cells: tuple = (2, 2)
    crop_size: tuple = (16, 16, 8)
    window_size: tuple = (4, 4, 2)
    stages: tuple = (StageSpec(8, 0, 1), StageSpec(16, 2, 2), StageSpec(16, 2, 2))
    fine_stages: tuple = (1, 2)
    classes: int = 3
    heads: int = 2
    mlp_ratio: float = 2.0
    N_v: int = 1
    N_w: int = 1
    deep_supervision: bool = True
    rel_pos_bias: bool = True
    ablation: str = "none"
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        self.volume_dims = tuple(int(v) for v in self.volume_dims)
        self.grid_cells = tuple(int(v) for v in self.grid_cells)
        self.crop_size = tuple(int(v) for v in self.crop_size)
        self.window_size = tuple(int(v) for v in self.window_size)
        self.stages = tuple(s if isinstance(s, StageSpec) else StageSpec(*s) for s in self.stages)
        self.fine_stages = tuple(int(s) for s in self.fine_stages)
        self.validate()

    def validate(self) -> None:
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if not self.stages:
            raise ValueError("at least one stage is required")
        for i in self.fine_stages:
            if not 0 <= i < len(self.stages):
                raise ValueError(f"fine stage {i} does not exist")
        for level, dims in enumerate(self.stage_dims()):
            partition(dims, self.stage_window(level))
        build_grid(self.volume_dims, self.grid_cells, self.crop_size)

    def stage_dims(self) -> list[tuple[int, int, int]]:
        dims, out = self.crop_size, []
        for s in self.stages:
            if any(d % s.down for d in dims):
                raise DimensionError(f"extent {dims} not divisible by downsampling factor {s.down}")
            dims = tuple(d // s.down for d in dims)
            out.append(dims)
        return out

    def stage_window(self, level: int) -> tuple[int, int, int]:
        return tuple(min(w, d) for w, d in zip(self.window_size, self.stage_dims()[level]))

    def is_fine(self, level: int) -> bool:
        return level in self.fine_stages and self.ablation != "no-memory"

    def uses_bank(self) -> bool:
        return self.ablation == "none" and any(self.is_fine(i) for i in range(len(self.stages)))

    def as_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [[s.dim, s.blocks, s.down] for s in self.stages]
        return d


class PatchDown(Module):
    """Strided convolution with kernel == stride on a channels-last grid."""

    def __init__(self, c_in: int, c_out: int, factor: int, rng):
        self.f = factor
        self.lin = Linear(c_in * factor ** 3, c_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        f = self.f
        if f == 1:
            return self.lin(x)
        X, Y, Z, c = x.shape
        t = reshape(x, (X // f, f, Y // f, f, Z // f, f, c))
        t = reshape(transpose(t, (0, 2, 4, 1, 3, 5, 6)), (X // f, Y // f, Z // f, f ** 3 * c))
        return self.lin(t)


class PatchUp(Module):
    """Transposed convolution with kernel == stride."""

    def __init__(self, c_in: int, c_out: int, factor: int, rng):
        self.f, self.c_out = factor, c_out
        self.lin = Linear(c_in, c_out * factor ** 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        f, co = self.f, self.c_out
        X, Y, Z, _ = x.shape
        t = reshape(self.lin(x), (X, Y, Z, f, f, f, co))
        return reshape(transpose(t, (0, 3, 1, 4, 2, 5, 6)), (X * f, Y * f, Z * f, co))


class EncoderStage(Module):
    def __init__(self, cfg: ModelConfig, level: int, c_in: int, rng):
        spec = cfg.stages[level]
        self.level = level
        self.down = PatchDown(c_in, spec.dim, spec.down, rng)
        self.window = cfg.stage_window(level)
        self.fine = cfg.is_fine(level)
        if self.fine:
            bcfg = FineBlockConfig(spec.dim, cfg.heads, cfg.N_v, cfg.N_w, cfg.mlp_ratio, cfg.rel_pos_bias)
            self.window_token = param(rng.normal(0.0, 0.02, (cfg.N_v, spec.dim)))
            self.blocks = [FineBlock(bcfg, self.window, rng, cfg.ablation) for _ in range(spec.blocks)]
        else:
            self.blocks = [WindowBlock(spec.dim, cfg.heads, cfg.mlp_ratio, self.window, rng, cfg.rel_pos_bias)
                           for _ in range(spec.blocks)]


class DecoderStage(Module):
    def __init__(self, c_in: int, c_out: int, factor: int, classes: int, mlp_ratio: float, rng):
        self.up = PatchUp(c_in, c_out, factor, rng)
        self.mix = MLP(c_out, mlp_ratio, rng)
        self.head = Linear(c_out, classes, rng)


class SegModel(Module):
    """U-shaped encoder-decoder; ``forward`` returns logits ``[K, X, Y, Z]`` per supervision level."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.grid: VolumeGrid = build_grid(cfg.volume_dims, cfg.grid_cells, cfg.crop_size)
        self.encoder = []
        c_in = cfg.in_channels
        for level, spec in enumerate(cfg.stages):
            self.encoder.append(EncoderStage(cfg, level, c_in, rng))
            c_in = spec.dim
        self.bank_init = [
            param(rng.normal(0.0, 0.02, (self.grid.M * cfg.N_w, cfg.stages[i].dim)))
            for i in self.bank_levels()
        ]
        self.decoder = []
        for level in range(len(cfg.stages) - 1, 0, -1):
            self.decoder.append(DecoderStage(cfg.stages[level].dim, cfg.stages[level - 1].dim,
                                             cfg.stages[level].down, cfg.classes, cfg.mlp_ratio, rng))
        self.head0 = Linear(cfg.stages[0].dim, cfg.classes, rng) if len(cfg.stages) == 1 else None

    def bank_levels(self) -> list[int]:
        if not self.cfg.uses_bank():
            return []
        return [i for i in range(len(self.cfg.stages)) if self.cfg.is_fine(i) and self.cfg.stages[i].blocks > 0]

    def new_bank(self) -> MemoryBank | None:
        if not self.cfg.uses_bank():
            return None
        return MemoryBank.fresh(self.bank_init, self.grid.M, self.cfg.N_w)

    def forward(self, x, crop: CropSpec | None = None, bank: MemoryBank | None = None,
                write: bool = True, decode: bool = True, probe: dict | None = None) -> list[Tensor]:
        """Segment one crop.

        ``x`` is ``[Px, Py, Pz]`` or ``[Px, Py, Pz, C]``. With a bank, the
        crop's cells are activated and, when ``write`` is set, the bank is
        replaced with the updated tokens. ``decode=False`` stops after the
        encoder (used for memory-only context passes) and returns ``[]``.
        """
        cfg = self.cfg
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 3:
            x = reshape(x, x.shape + (1,))
        if x.shape[:3] != cfg.crop_size or x.shape[3] != cfg.in_channels:
            raise DimensionError(f"crop of shape {x.shape} does not match configured {cfg.crop_size}")
        levels = self.bank_levels()
        rows = hidden = None
        if levels:
            if bank is None or crop is None:
                raise ValueError("this model needs a crop position and a memory bank")
            inter = intersect(self.grid, crop)
            work = bank if write else bank.copy()
            work.activate(inter, self.bank_init)
            rows = work.rows(inter.cell_indices)
            hidden = work.unseen_mask()
        skips = []
        last_needed = max(levels) if (levels and not decode) else len(self.encoder) - 1
        for stage in self.encoder[: last_needed + 1]:
            x = stage.down(x)
            x = self._run_blocks(stage, x, work if levels else None, levels, rows, hidden, probe)
            skips.append(x)
        if not decode:
            return []
        return self._decode(skips)

    __call__ = forward

    def _run_blocks(self, stage: EncoderStage, x: Tensor, bank, levels, rows, hidden, probe):
        if not stage.blocks:
            return x
        dims = x.shape[:3]
        u = window_split(x, stage.window)
        if not stage.fine:
            for b, blk in enumerate(stage.blocks):
                u = blk(u, probe, f"L{stage.level}B{b}:")
            return window_merge(u, dims, stage.window)
        v = init_window_tokens(stage.window_token, u.shape[0])
        w = None
        slot = levels.index(stage.level) if stage.level in levels else None
        if slot is not None:
            w = bank.tokens[slot]
        for b, blk in enumerate(stage.blocks):
            u, v, w = blk(u, v, w, rows, hidden, probe, f"L{stage.level}B{b}:")
        if slot is not None:
            bank.tokens[slot] = w
        return window_merge(u, dims, stage.window)

    def _decode(self, skips: list[Tensor]) -> list[Tensor]:
        outs = []
        x = skips[-1]
        if self.head0 is not None:
            with mac_tag(stage="head", kind="head"):
                return [self._to_logits(self.head0(x))]
        for i, dec in enumerate(self.decoder):
            level = len(skips) - 2 - i
            with mac_tag(stage="decoder", kind="decoder"):
                x = dec.mix(dec.up(x) + skips[level])
                if self.cfg.deep_supervision or level == 0:
                    outs.append((level, self._to_logits(dec.head(x))))
        outs.sort(key=lambda t: t[0])
        return [o for _, o in outs]

    @staticmethod
    def _to_logits(x: Tensor) -> Tensor:
        return transpose(x, (3, 0, 1, 2))
