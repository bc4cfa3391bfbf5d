"""Decoders, metrics, discount factor and efficiency benchmark."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from quadbev.evalkit.bench import DiscountFactor, EfficiencyReport, discount_factor, efficiency_benchmark
from quadbev.evalkit.detection import DetectionMetrics, compute_map_nds, decode_detections, nms
from quadbev.evalkit.lanes import LaneMetrics, decode_lanes, lane_fscore, visible_lanes
from quadbev.evalkit.segmentation import (
    IouAccumulator,
    IouMetrics,
    map_iou,
    map_iou_accumulate,
    occ_miou,
    occ_miou_accumulate,
)
from quadbev.nets.model import TASKS, TaskHeadOutputs
from quadbev.synthworld.world import FREE, MAP_CATEGORIES

LOGIT_CAP = 12.0


@dataclass
class EvalReport:
    det: Optional[DetectionMetrics] = None
    map: Optional[IouMetrics] = None
    lane: Optional[LaneMetrics] = None
    occ: Optional[IouMetrics] = None
    n_samples: int = 0

    def summary(self) -> dict[str, float]:
        out = {}
        if self.det is not None:
            out.update({"det_mAP": self.det.mAP, "det_mAP@2m": self.det.ap_at(2.0), "det_NDS": self.det.nds,
                        "det_mATE": self.det.mATE, "det_mASE": self.det.mASE, "det_mAOE": self.det.mAOE})
        if self.map is not None:
            out["map_mIoU"] = self.map.mean
            out.update({f"map_IoU_{c}": v for c, v in self.map.per_category.items()})
        if self.lane is not None:
            out.update({"lane_precision": self.lane.precision, "lane_recall": self.lane.recall, "lane_F1": self.lane.f1})
        if self.occ is not None:
            out["occ_mIoU"] = self.occ.mean
            out.update({f"occ_IoU_{c}": v for c, v in self.occ.per_category.items()})
        return out

    def selection_score(self) -> float:
        vals = []
        for v in (self.det and self.det.mAP, self.map and self.map.mean, self.lane and self.lane.f1,
                  self.occ and self.occ.mean):
            vals.append(0.0 if v is None or math.isnan(v) else float(v))
        return float(np.mean(vals))


def _logit(p: torch.Tensor) -> torch.Tensor:
    return torch.logit(p.double().clamp(0, 1), eps=1e-9).clamp(-LOGIT_CAP, LOGIT_CAP)


def oracle_outputs(gt: dict[str, torch.Tensor], n_occ: int = FREE + 1, embed_dim: int = 4, margin: float = 3.0) -> TaskHeadOutputs:
    """Ground-truth rasters dressed up as head outputs (logit-inflated)."""
    inst = gt["lane_embed_id"]
    emb = torch.zeros(inst.shape[0], embed_dim, *inst.shape[1:], dtype=torch.float64)
    emb[:, 0] = inst.clamp(min=0).double() * margin * 2
    n_lane_cls = int(max(2, gt["lane_class"].max().item() + 1))
    cls = torch.nn.functional.one_hot(gt["lane_class"].clamp(min=0), n_lane_cls).permute(0, 3, 1, 2).double() * 2 * LOGIT_CAP
    occ = torch.nn.functional.one_hot(gt["occ_grid"].long(), n_occ).double() * 2 * LOGIT_CAP
    return TaskHeadOutputs(
        depth=_logit(gt["depth_bins"]),
        det_heatmap=_logit(gt["det_heatmap"]),
        det_reg=gt["det_reg"].double(),
        map=_logit(gt["map_masks"]),
        lane_conf=_logit(gt["lane_conf"])[:, None],
        lane_offset=gt["lane_offset"].double()[:, None],
        lane_embed=emb,
        lane_cls=cls,
        occ=occ,
    )


def gt_boxes(world, grid):
    W, H = grid.W_bev, grid.H_bev
    out = []
    for b in world.boxes:
        col, row = grid.point_to_cell(b.center[0], b.center[1])
        if 0 <= col < W and 0 <= row < H:
            out.append(b)
    return out


def evaluate_model(model, store, indices: Optional[Sequence[int]] = None, tasks: Sequence[str] = TASKS,
                   batch_size: int = 2, oracle: bool = False, score_thresh: float = 0.1) -> EvalReport:
    """Run the model (or the GT oracle) over ``store`` and pool every metric over the samples."""
    idx = list(range(len(store))) if indices is None else list(indices)
    grid = model.config.grid if model is not None else store.grid
    rep = EvalReport(n_samples=len(idx))
    det_pred, det_gt, lane_pred, lane_gt = [], [], [], []
    map_acc = IouAccumulator(range(len(MAP_CATEGORIES)))
    occ_acc = IouAccumulator(range(FREE + 1))
    was_training = model.training if model is not None else False
    if model is not None:
        model.eval()
    with torch.no_grad():
        for i in range(0, len(idx), batch_size):
            b = idx[i:i + batch_size]
            frames, gt = store.batch(b)
            out = oracle_outputs(gt) if oracle else model(frames, tasks=tasks)
            for k, si in enumerate(b):
                sample = store.records[si][0]
                if "det" in tasks:
                    det_pred.append(decode_detections(out.det_heatmap[k], out.det_reg[k], grid, score_thresh=score_thresh))
                    det_gt.append(gt_boxes(sample.world_ref, grid))
                if "lane" in tasks:
                    lane_pred.append(decode_lanes(out.lane_conf[k, 0], out.lane_offset[k, 0], out.lane_embed[k],
                                                  out.lane_cls[k], grid))
                    lane_gt.append(visible_lanes(sample.world_ref, grid))
            if "map" in tasks:
                map_iou_accumulate(map_acc, out.map, gt["map_masks"])
            if "occ" in tasks:
                occ_miou_accumulate(occ_acc, out.occ, gt["occ_grid"])
    if model is not None and was_training:
        model.train()
    if "det" in tasks:
        rep.det = compute_map_nds(det_pred, det_gt)
    if "map" in tasks:
        rep.map = map_acc.result()
    if "lane" in tasks:
        rep.lane = lane_fscore(lane_pred, lane_gt)
    if "occ" in tasks:
        rep.occ = occ_acc.result(exclude=(FREE,))
    return rep


def selection_score(model, store) -> float:
    """Checkpoint-selection metric: mean of mAP, map mIoU, lane F1 and occ mIoU."""
    return evaluate_model(model, store).selection_score()


__all__ = [
    "DetectionMetrics", "DiscountFactor", "EfficiencyReport", "EvalReport", "IouMetrics", "LaneMetrics",
    "compute_map_nds", "decode_detections", "decode_lanes", "discount_factor", "efficiency_benchmark",
    "evaluate_model", "lane_fscore", "map_iou", "nms", "occ_miou", "oracle_outputs", "selection_score",
]
