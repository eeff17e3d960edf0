"""Loss, optimiser, training episodes and sliding-window inference.

One training iteration is an *episode* on a single volume. A fresh memory
bank is populated by passes over a fixed non-overlapping tiling of the
volume (the same tiling inference uses for its first pass), then one random
crop is segmented against the populated bank. The loss of that crop is
backpropagated through the whole episode including the bank writes. With
``context_loss`` the tiling passes are decoded and supervised too; a cell seen
for the first time cannot yet read other cells (two blocks per stage are not
enough), so that extra signal mostly rewards guessing and is off by default.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import CropSpec, sample_crop, tile_crops
from .memory import MemoryBank
from .model import SegModel
from .tensor import (
    Tape,
    Tensor,
    add,
    concat,
    div,
    log_softmax,
    mean,
    mul,
    scale,
    softmax,
    sub,
    tsum,
)

log = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5


class NumericError(FloatingPointError):
    pass


OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainConfig:
    epochs: int = 1
    iters_per_epoch: int = 250
    base_lr: float = 0.01
    momentum: float = 0.99
    nesterov: bool = True
    poly_power: float = 0.9
    dice_w: float = 0.5
    ce_w: float = 0.5
    grad_clip: float = 12.0
    fg_oversample: float = 0.0
    context_loss: bool = False
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.iters_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and iters_per_epoch >= 1")
        if self.base_lr < 0 or not 0 <= self.momentum < 1 or self.poly_power <= 0:
            raise ValueError("invalid optimiser settings")
        if self.dice_w < 0 or self.ce_w < 0 or abs(self.dice_w + self.ce_w - 1.0) > 1e-12:
            raise ValueError("dice_w and ce_w must be non-negative and sum to 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")

    @property
    def max_iter(self) -> int:
        return self.epochs * self.iters_per_epoch


# loss -----------------------------------------------------------------------

def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label values must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    return (np.arange(classes).reshape((-1,) + (1,) * labels.ndim) == labels[None]).astype(np.float64)


def dice_ce_loss(logits: Tensor, labels: np.ndarray, dice_w: float = 0.5, ce_w: float = 0.5) -> Tensor:
    """``dice_w * (1 - mean soft Dice) + ce_w * mean CE`` for logits ``[K, ...]``."""
    K = logits.shape[0]
    y = Tensor(one_hot(labels, K))
    axes = tuple(range(1, logits.ndim))
    n_vox = int(np.prod(logits.shape[1:]))
    ce = scale(tsum(mul(y, log_softmax(logits, axis=0))), -1.0 / n_vox)
    p = softmax(logits, axis=0)
    inter = tsum(mul(p, y), axis=axes)
    denom = add(add(tsum(p, axis=axes), tsum(y, axis=axes)), Tensor(np.full(K, DICE_SMOOTH)))
    dsc = div(add(scale(inter, 2.0), Tensor(np.full(K, DICE_SMOOTH))), denom)
    dice_term = sub(Tensor(1.0), mean(dsc))
    return add(scale(dice_term, dice_w), scale(ce, ce_w))


def downsample_labels(labels: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour down-sampling by integer factors (top-left sample of each block)."""
    factors = [s // t for s, t in zip(labels.shape, shape)]
    return labels[tuple(slice(None, None, f) for f in factors)]


def ds_weights(levels: int) -> np.ndarray:
    w = 2.0 ** -np.arange(levels)
    return w / w.sum()


def deep_supervision_loss(outs: Sequence[Tensor], labels: np.ndarray, dice_w=0.5, ce_w=0.5) -> Tensor:
    weights = ds_weights(len(outs))
    total = None
    for a, logits in zip(weights, outs):
        lab = downsample_labels(labels, logits.shape[1:])
        term = scale(dice_ce_loss(logits, lab, dice_w, ce_w), a)
        total = term if total is None else add(total, term)
    return total


# optimiser ------------------------------------------------------------------

def poly_lr(it: int, max_iter: int, base_lr: float, power: float = 0.9) -> float:
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    if max_iter == 0:
        return base_lr
    return base_lr * (1.0 - it / max_iter) ** power


def _clip_factor(grads, clip: float | None) -> tuple[float, float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
    return norm, (clip / norm if (clip is not None and norm > clip) else 1.0)


class SGD:
    """SGD with (Nesterov) momentum; parameters without a gradient are skipped."""

    kind = "sgd"

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.99, nesterov: bool = True):
        self.params = list(params)
        self.momentum, self.nesterov = momentum, nesterov
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float, clip: float | None = None) -> float:
        grads = [p.grad for p in self.params]
        norm, factor = _clip_factor(grads, clip)
        mu = self.momentum
        for p, g, buf in zip(self.params, grads, self.buffers):
            if g is None:
                continue
            if factor != 1.0:
                g = g * factor
            buf *= mu
            buf += g
            d = g + mu * buf if self.nesterov else buf
            p.data -= lr * d
        return norm


class Adam:
    """Adam with bias correction; same clipping and skipping rules as :class:`SGD`."""

    kind = "adam"

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float, clip: float | None = None) -> float:
        grads = [p.grad for p in self.params]
        norm, factor = _clip_factor(grads, clip)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            if factor != 1.0:
                g = g * factor
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


def make_optimizer(params: Sequence[Tensor], tcfg: "TrainConfig"):
    if tcfg.optimizer == "adam":
        return Adam(params)
    return SGD(params, tcfg.momentum, tcfg.nesterov)


# training -------------------------------------------------------------------

@dataclass
class TrainState:
    iteration: int = 0
    losses: list = field(default_factory=list)
    rng: np.random.Generator = None
    banks: dict = field(default_factory=dict)


def context_crops(model: SegModel) -> list[CropSpec]:
    """Fixed non-overlapping tiling used to populate a fresh bank."""
    return tile_crops(model.cfg.volume_dims, model.cfg.crop_size, overlap=0.0)


def crop_array(volume: np.ndarray, crop: CropSpec) -> np.ndarray:
    return np.asarray(volume[crop.slices()], dtype=np.float64)


def populate_bank(model: SegModel, volume: np.ndarray, bank: MemoryBank | None = None,
                  labels: np.ndarray | None = None, tcfg: TrainConfig | None = None):
    """Passes over the context tiling, writing to the bank.

    Without ``labels`` the passes are encoder-only. With labels every tile is
    also decoded and its loss is returned as a list (graph recorded if a tape
    is active).
    """
    if bank is None:
        bank = model.new_bank()
    losses = []
    if bank is None and labels is None:
        return None, losses
    for crop in context_crops(model):
        outs = model.forward(crop_array(volume, crop), crop, bank, decode=labels is not None)
        if labels is not None:
            losses.append(deep_supervision_loss(outs, labels[crop.slices()], tcfg.dice_w, tcfg.ce_w))
    return bank, losses


def _pick_crop(model: SegModel, labels: np.ndarray, rng: np.random.Generator, fg: float) -> CropSpec:
    cfg = model.cfg
    if fg > 0 and rng.random() < fg and labels.any():
        pts = np.argwhere(labels > 0)
        p = pts[rng.integers(len(pts))]
        hi = np.array(cfg.volume_dims) - np.array(cfg.crop_size)
        lo = np.clip(p - np.array(cfg.crop_size) + 1, 0, hi)
        up = np.clip(p, 0, hi)
        origin = tuple(int(rng.integers(a, b + 1)) for a, b in zip(lo, up))
        return CropSpec(origin, cfg.crop_size)
    return sample_crop(cfg.volume_dims, cfg.crop_size, rng)


def train_step(model: SegModel, opt: SGD | Adam, volume: np.ndarray, labels: np.ndarray, crop: CropSpec,
               lr: float, tcfg: TrainConfig) -> tuple[float, MemoryBank | None, float]:
    """One episode on one volume; returns ``(loss, final bank, grad norm)``."""
    model.zero_grad()
    with Tape():
        bank, losses = populate_bank(model, volume, labels=labels if tcfg.context_loss else None, tcfg=tcfg)
        outs = model.forward(crop_array(volume, crop), crop, bank)
        losses.append(deep_supervision_loss(outs, labels[crop.slices()], tcfg.dice_w, tcfg.ce_w))
        loss = losses[0]
        for extra in losses[1:]:
            loss = add(loss, extra)
        loss = scale(loss, 1.0 / len(losses))
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at crop {crop}")
    loss.backward()
    norm = opt.step(lr, tcfg.grad_clip)
    return value, (bank.detach() if bank is not None else None), norm


def train(model: SegModel, volumes: Sequence[tuple[np.ndarray, np.ndarray]], tcfg: TrainConfig,
          opt: SGD | Adam | None = None, state: TrainState | None = None,
          on_epoch: Callable | None = None, stop_at: int | None = None) -> tuple[SGD | Adam, TrainState]:
    """Run (or resume) training until ``tcfg.max_iter`` or ``stop_at`` iterations."""
    if opt is None:
        opt = make_optimizer(model.parameters(), tcfg)
    if state is None:
        state = TrainState(rng=np.random.default_rng(tcfg.seed))
    end = tcfg.max_iter if stop_at is None else min(stop_at, tcfg.max_iter)
    if end > state.iteration and not volumes:
        raise ValueError("no training volumes")
    while state.iteration < end:
        it = state.iteration
        lr = poly_lr(it, tcfg.max_iter, tcfg.base_lr, tcfg.poly_power)
        vid = int(state.rng.integers(len(volumes)))
        vol, lab = volumes[vid]
        crop = _pick_crop(model, lab, state.rng, tcfg.fg_oversample)
        loss, bank, _ = train_step(model, opt, vol, lab, crop, lr, tcfg)
        state.losses.append(loss)
        if bank is not None:
            state.banks[vid] = bank
        state.iteration += 1
        if state.iteration % tcfg.iters_per_epoch == 0:
            epoch = state.iteration // tcfg.iters_per_epoch
            ep_loss = float(np.mean(state.losses[-tcfg.iters_per_epoch:]))
            log.info("epoch %d  mean loss %.6f  lr %.6g", epoch, ep_loss, lr)
            if on_epoch is not None:
                on_epoch(epoch, ep_loss, lr)
    return opt, state


# inference ------------------------------------------------------------------

def predict_crop(model: SegModel, volume: np.ndarray, crop: CropSpec, bank: MemoryBank | None) -> np.ndarray:
    outs = model.forward(crop_array(volume, crop), crop, bank, write=False)
    return softmax(outs[0], axis=0).data


def sliding_infer(model: SegModel, volume: np.ndarray, bank: MemoryBank | None = None,
                  overlap: float = 0.5, return_probs: bool = False):
    """Full-volume label map.

    Pass 1 populates a fresh bank over the context tiling; pass 2 predicts a
    50%-overlap crop grid against that bank without writing to it, and
    averages softmax probabilities where crops overlap.
    """
    cfg = model.cfg
    if bank is None:
        bank, _ = populate_bank(model, volume)
    K = cfg.classes
    acc = np.zeros((K,) + tuple(volume.shape), dtype=np.float64)
    hits = np.zeros(volume.shape, dtype=np.float64)
    for crop in tile_crops(cfg.volume_dims, cfg.crop_size, overlap=overlap):
        sl = crop.slices()
        acc[(slice(None),) + sl] += predict_crop(model, volume, crop, bank)
        hits[sl] += 1.0
    probs = acc / hits
    labels = probs.argmax(axis=0).astype(np.uint8)
    return (labels, probs) if return_probs else labels
