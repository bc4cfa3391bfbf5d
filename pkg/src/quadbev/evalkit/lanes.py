"""Lane decoding (confidence threshold, embedding clustering, polyline ordering) and F-score."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from quadbev.bevgeom import BevGridSpec
from quadbev.synthworld.rasterize import rasterize_lanes
from quadbev.synthworld.world import LanePolyline, World


@dataclass
class LaneMetrics:
    precision: float
    recall: float
    f1: float
    tp: int = 0
    n_pred: int = 0
    n_gt: int = 0


def _np(x):
    return x.detach().double().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x, dtype=np.float64)


def cluster_embeddings(emb: np.ndarray, order: np.ndarray, radius: float) -> np.ndarray:
    """Greedy agglomeration: each point joins the nearest running cluster mean within ``radius``."""
    labels = np.full(len(emb), -1, dtype=np.int64)
    sums: list[np.ndarray] = []
    counts: list[int] = []
    for i in order:
        if sums:
            means = np.stack(sums) / np.array(counts)[:, None]
            d = np.linalg.norm(means - emb[i], axis=1)
            j = int(np.argmin(d))
            if d[j] < radius:
                labels[i] = j
                sums[j] = sums[j] + emb[i]
                counts[j] += 1
                continue
        labels[i] = len(sums)
        sums.append(emb[i].copy())
        counts.append(1)
    return labels


def decode_lanes(conf, offset, embed, cls_logits, grid: BevGridSpec, conf_thresh: float = 0.5,
                 margin: float = 3.0, min_cells: int = 2) -> list[LanePolyline]:
    """One sample's lane rasters -> polylines in ego meters.

    conf/offset (H, W) logits and cell offsets, embed (E, H, W), cls_logits (C, H, W).
    """
    conf, offset, embed, cls_logits = (_np(a) for a in (conf, offset, embed, cls_logits))
    p = 1.0 / (1.0 + np.exp(-conf))
    rows, cols = np.nonzero(p > conf_thresh)
    if len(rows) == 0:
        return []
    score = p[rows, cols]
    order = np.lexsort((cols, rows, -score))  # confident cells seed clusters
    emb = embed[:, rows, cols].T
    labels = cluster_embeddings(emb, order, margin / 2)
    xs, ys = grid.cell_centers()
    cs = grid.cell_size
    lanes = []
    for lab in range(labels.max() + 1):
        sel = labels == lab
        if sel.sum() < min_cells:
            continue
        r, c = rows[sel], cols[sel]
        pts = np.stack([xs[c], ys[r]], axis=1)
        centered = pts - pts.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        axis = vt[0]
        off = offset[r, c] * cs
        if abs(axis[0]) >= abs(axis[1]):  # x-major: offset runs along y
            pts[:, 1] += off
            key = pts[:, 0]
        else:
            pts[:, 0] += off
            key = pts[:, 1]
        o = np.argsort(key, kind="stable")
        pts = pts[o]
        keep = np.ones(len(pts), bool)
        keep[1:] = np.any(np.diff(pts, axis=0) != 0, axis=1)
        pts = pts[keep]
        if len(pts) < 2:
            continue
        votes = np.bincount(cls_logits[:, r, c].argmax(axis=0), minlength=cls_logits.shape[0])
        lanes.append(LanePolyline(pts, int(votes.argmax()), lab))
    return lanes


def resample(points: np.ndarray, spacing: float) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(2, int(np.ceil(s[-1] / spacing)) + 1)
    t = np.linspace(0.0, s[-1], n)
    return np.stack([np.interp(t, s, points[:, 0]), np.interp(t, s, points[:, 1])], axis=1)


def point_polyline_distance(pts: np.ndarray, line: np.ndarray) -> np.ndarray:
    a, b = line[:-1], line[1:]
    ab = b - a
    denom = np.maximum((ab ** 2).sum(axis=1), 1e-300)
    ap = pts[:, None, :] - a[None]
    t = np.clip((ap * ab[None]).sum(-1) / denom, 0.0, 1.0)
    proj = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(pts[:, None, :] - proj, axis=-1).min(axis=1)


def lane_matches(pred: LanePolyline, gt: LanePolyline, tol: float = 0.5, coverage: float = 0.75,
                 spacing: float = 0.25) -> bool:
    pts = resample(pred.points, spacing)
    return bool(np.mean(point_polyline_distance(pts, gt.points) <= tol) >= coverage)


def match_count(preds: Sequence[LanePolyline], gts: Sequence[LanePolyline], **kw) -> int:
    """Size of a maximum one-to-one matching between compatible prediction/GT pairs."""
    if not preds or not gts:
        return 0
    ok = np.array([[lane_matches(p, g, **kw) for g in gts] for p in preds])
    r, c = linear_sum_assignment(-ok.astype(np.float64))
    return int(ok[r, c].sum())


def f_from_counts(tp: int, n_pred: int, n_gt: int) -> LaneMetrics:
    # an empty prediction set is vacuously precise, an empty GT set vacuously recalled
    prec = tp / n_pred if n_pred else 1.0
    rec = tp / n_gt if n_gt else 1.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return LaneMetrics(prec, rec, f1, tp, n_pred, n_gt)


def lane_fscore(preds: Sequence[Sequence[LanePolyline]], gts: Sequence[Sequence[LanePolyline]], tol: float = 0.5,
                coverage: float = 0.75) -> LaneMetrics:
    """Pooled precision/recall/F1 over samples."""
    tp = sum(match_count(p, g, tol=tol, coverage=coverage) for p, g in zip(preds, gts))
    return f_from_counts(tp, sum(len(p) for p in preds), sum(len(g) for g in gts))


def visible_lanes(world: World, grid: BevGridSpec, min_cells: int = 2) -> list[LanePolyline]:
    """GT lanes that leave at least ``min_cells`` cells in the lane raster."""
    _, _, inst, _ = rasterize_lanes(world, grid)
    ids, counts = np.unique(inst[inst >= 0], return_counts=True)
    seen = {int(i) for i, n in zip(ids, counts) if n >= min_cells}
    return [l for l in world.lanes if l.instance_id in seen]
