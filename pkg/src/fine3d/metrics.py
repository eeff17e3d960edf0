"""Per-class Dice and 95th-percentile Hausdorff distance."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

UNDEFINED = float("inf")

# 6-connectivity structuring element
_FACE = ndimage.generate_binary_structure(3, 1)


def dice(pred, true, k: int | None = None) -> float:
    """``2|A∩B| / (|A|+|B|)``; 1.0 when both masks are empty.

    With ``k`` given, ``pred`` and ``true`` are label maps and class ``k``
    is compared; otherwise they are boolean masks.
    """
    a = np.asarray(pred) == k if k is not None else np.asarray(pred, dtype=bool)
    b = np.asarray(true) == k if k is not None else np.asarray(true, dtype=bool)
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (sa + sb)


def surface(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-neighbour outside it (volume border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask
    eroded = ndimage.binary_erosion(mask, structure=_FACE, border_value=0)
    return mask & ~eroded


def surface_distances(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Distance from each surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    sa, sb = surface(a), surface(b)
    dt = ndimage.distance_transform_edt(~sb, sampling=spacing)
    return dt[sa]


def hd95(pred, true, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile (linear interpolation) of the pooled symmetric surface distances.

    Returns :data:`UNDEFINED` (``inf``) if either mask is empty.
    """
    a, b = np.asarray(pred, dtype=bool), np.asarray(true, dtype=bool)
    if not a.any() or not b.any():
        return UNDEFINED
    d = np.concatenate([surface_distances(a, b, spacing), surface_distances(b, a, spacing)])
    return float(np.percentile(d, 95, method="linear"))


@dataclass
class MetricReport:
    dice: dict = field(default_factory=dict)
    hd95: dict = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values()))) if self.dice else float("nan")

    @property
    def mean_hd95(self) -> float:
        vals = [v for v in self.hd95.values() if np.isfinite(v)]
        return float(np.mean(vals)) if vals else UNDEFINED


def evaluate(pred: np.ndarray, true: np.ndarray, classes: int, spacing=(1.0, 1.0, 1.0)) -> MetricReport:
    """Foreground classes ``1..K-1``; a class absent from both maps is skipped."""
    report = MetricReport()
    for k in range(1, classes):
        a, b = pred == k, true == k
        if not a.any() and not b.any():
            continue
        report.dice[k] = dice(a, b)
        report.hd95[k] = hd95(a, b, spacing)
    return report
