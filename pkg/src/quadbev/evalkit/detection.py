"""Heatmap decoding, NMS and center-distance mAP / NDS."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from quadbev.bevgeom import BevGridSpec
from quadbev.synthworld.world import Box3D, wrap_angle

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
MIN_RECALL = 0.1
MIN_PRECISION = 0.1


@dataclass
class DetectionMetrics:
    mAP: float
    nds: float
    mATE: float
    mASE: float
    mAOE: float
    ap: dict[tuple[int, float], float] = field(default_factory=dict)  # (category, threshold) -> AP

    def ap_at(self, threshold: float) -> float:
        vals = [v for (c, d), v in self.ap.items() if d == threshold]
        return float(np.mean(vals)) if vals else float("nan")


def aabb(box: Box3D) -> tuple[float, float, float, float]:
    c = box.bev_corners()
    return c[:, 0].min(), c[:, 0].max(), c[:, 1].min(), c[:, 1].max()


def aabb_iou(a: Box3D, b: Box3D) -> float:
    ax0, ax1, ay0, ay1 = aabb(a)
    bx0, bx1, by0, by1 = aabb(b)
    ix = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def nms(dets: list[tuple[Box3D, float]], iou_thresh: float = 0.5) -> list[tuple[Box3D, float]]:
    """Greedy per-category suppression on axis-aligned BEV footprints."""
    keep: list[tuple[Box3D, float]] = []
    for box, score in sorted(dets, key=lambda d: -d[1]):
        if all(k.category != box.category or aabb_iou(k, box) <= iou_thresh for k, _ in keep):
            keep.append((box, score))
    return keep


def decode_detections(heatmap: torch.Tensor, reg: torch.Tensor, grid: BevGridSpec, score_thresh: float = 0.1,
                      max_k: int = 50, nms_iou: float = 0.5) -> list[tuple[Box3D, float]]:
    """Peaks of one sample's heatmap logits (C, H, W) decoded with the regression raster (8, H, W)."""
    if max_k <= 0:
        return []
    with torch.no_grad():
        prob = torch.sigmoid(heatmap.double())
        peak = F.max_pool2d(prob[None], 3, stride=1, padding=1)[0] == prob
        scores = torch.where(peak & (prob >= score_thresh), prob, torch.zeros_like(prob)).flatten()
        k = min(max_k, int((scores > 0).sum()))
        if k == 0:
            return []
        top = torch.topk(scores, k)
    H, W = heatmap.shape[-2:]
    xs, ys = grid.cell_centers()
    r = reg.detach().double().cpu().numpy()
    dets = []
    for s, flat in zip(top.values.tolist(), top.indices.tolist()):
        c, rem = divmod(flat, H * W)
        row, col = divmod(rem, W)
        v = r[:, row, col]
        yaw = float(wrap_angle(math.atan2(v[6], v[7])))
        size = tuple(float(x) for x in np.exp(np.clip(v[3:6], -10, 10)))
        box = Box3D((xs[col] + v[0], ys[row] + v[1], float(v[2])), size, yaw, int(c))
        dets.append((box, s))
    return nms(dets, nms_iou)


def _aligned_iou3d(a: Box3D, b: Box3D) -> float:
    inter = np.prod(np.minimum(a.size, b.size))
    return float(inter / (np.prod(a.size) + np.prod(b.size) - inter))


def _yaw_err(a: float, b: float) -> float:
    return abs(float(wrap_angle(a - b)))


def _match(preds, gts, cat: int, thresh: float):
    """Greedy score-ordered center-distance matching across all samples for one category.

    Returns (tp flags in score order, matched (pred, gt) pairs, n_gt).
    """
    flat = [(score, si, pi, box) for si, sample in enumerate(preds) for pi, (box, score) in enumerate(sample)
            if box.category == cat]
    flat.sort(key=lambda t: (-t[0], t[3].center, t[3].size, t[3].yaw))
    gt_by_sample = [[g for g in sample if g.category == cat] for sample in gts]
    n_gt = sum(len(g) for g in gt_by_sample)
    taken = [np.zeros(len(g), bool) for g in gt_by_sample]
    tp, pairs = [], []
    for score, si, pi, box in flat:
        best, best_d = -1, math.inf
        for gi, g in enumerate(gt_by_sample[si]):
            if taken[si][gi]:
                continue
            d = math.hypot(box.center[0] - g.center[0], box.center[1] - g.center[1])
            if d < best_d:
                best, best_d = gi, d
        if best >= 0 and best_d < thresh:
            taken[si][best] = True
            tp.append(True)
            pairs.append((box, gt_by_sample[si][best]))
        else:
            tp.append(False)
    return np.array(tp, dtype=bool), pairs, n_gt


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """101-point precision envelope above the recall floor, normalized by the precision floor."""
    if n_gt == 0:
        return float("nan") if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    prec = ctp / (ctp + cfp)
    rec = ctp / n_gt
    grid = np.linspace(0.0, 1.0, 101)
    env = np.array([prec[rec >= r - 1e-12].max() if np.any(rec >= r - 1e-12) else 0.0 for r in grid])
    env = env[int(round(100 * MIN_RECALL)) + 1:] - MIN_PRECISION
    env[env < 0] = 0.0
    return float(min(1.0, env.mean() / (1.0 - MIN_PRECISION)))


def compute_map_nds(preds: Sequence[Sequence[tuple[Box3D, float]]], gts: Sequence[Sequence[Box3D]],
                    n_categories: int = 3, thresholds: Sequence[float] = DIST_THRESHOLDS) -> DetectionMetrics:
    """``preds[s]`` / ``gts[s]`` hold sample ``s``'s scored predictions and GT boxes."""
    if len(preds) != len(gts):
        raise ValueError("prediction and GT sample counts differ")
    ap = {}
    for c in range(n_categories):
        for d in thresholds:
            tp, _, n_gt = _match(preds, gts, c, d)
            v = average_precision(tp, n_gt)
            if not math.isnan(v):
                ap[(c, d)] = v
    mAP = float(np.mean(list(ap.values()))) if ap else float("nan")

    ate, ase, aoe = [], [], []
    for c in range(n_categories):
        _, pairs, _ = _match(preds, gts, c, TP_THRESHOLD)
        if not pairs:
            continue
        ate.append(np.mean([math.hypot(p.center[0] - g.center[0], p.center[1] - g.center[1]) for p, g in pairs]))
        ase.append(np.mean([1.0 - _aligned_iou3d(p, g) for p, g in pairs]))
        aoe.append(np.mean([_yaw_err(p.yaw, g.yaw) for p, g in pairs]))
    mate, mase, maoe = (float(np.mean(x)) if x else 1.0 for x in (ate, ase, aoe))
    nds = float("nan") if math.isnan(mAP) else (5 * mAP + sum(1 - min(1.0, e) for e in (mate, mase, maoe))) / 8
    return DetectionMetrics(mAP, nds, mate, mase, maoe, ap)
