"""IoU metrics for map masks and the occupancy grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from quadbev.synthworld.world import FREE


@dataclass
class IouMetrics:
    per_category: dict[int, float]  # NaN where the union is empty
    mean: float


def _mean(per: dict[int, float], exclude=()) -> float:
    vals = [v for c, v in per.items() if c not in exclude and not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


class IouAccumulator:
    def __init__(self, categories):
        self.categories = list(categories)
        self.inter = {c: 0 for c in self.categories}
        self.union = {c: 0 for c in self.categories}

    def add(self, pred: np.ndarray, target: np.ndarray, c: int) -> None:
        self.inter[c] += int(np.count_nonzero(pred & target))
        self.union[c] += int(np.count_nonzero(pred | target))

    def result(self, exclude=()) -> IouMetrics:
        per = {c: (self.inter[c] / self.union[c] if self.union[c] else float("nan")) for c in self.categories}
        return IouMetrics(per, _mean(per, exclude))


def _np(x) -> np.ndarray:
    return x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)


def map_iou_accumulate(acc: IouAccumulator, logits, masks) -> None:
    """``logits`` / ``masks``: (..., C, H, W); a cell is predicted when sigmoid > 0.5."""
    pred = _np(logits) > 0
    tgt = _np(masks) > 0.5
    for c in acc.categories:
        acc.add(pred[..., c, :, :], tgt[..., c, :, :], c)


def map_iou(logits, masks) -> IouMetrics:
    acc = IouAccumulator(range(_np(masks).shape[-3]))
    map_iou_accumulate(acc, logits, masks)
    return acc.result()


def occ_miou_accumulate(acc: IouAccumulator, logits, occ_grid) -> None:
    pred = _np(logits).argmax(axis=-1)
    tgt = _np(occ_grid)
    for c in acc.categories:
        acc.add(pred == c, tgt == c, c)


def occ_miou(logits, occ_grid, n_categories: int = FREE + 1) -> IouMetrics:
    """Per-category voxel IoU of the argmax labels; the mean skips the free label."""
    acc = IouAccumulator(range(n_categories))
    occ_miou_accumulate(acc, logits, occ_grid)
    return acc.result(exclude=(FREE,))
