"""Task losses, their weighted combination and GradNorm weight adaptation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

COMPONENTS = ("det", "map", "lane", "occ", "depth")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # detection
    beta: float = 1.0  # map
    gamma: float = 1.0  # lane
    delta: float = 1.0  # occupancy
    epsilon: float = 1.0  # depth
    det_lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lane_lambdas: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        vals = [self.alpha, self.beta, self.gamma, self.delta, self.epsilon, *self.det_lambdas, *self.lane_lambdas]
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("loss weights must be finite and nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma, self.delta, self.epsilon], dtype=np.float64)


def _bce_excess(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Elementwise BCE minus its minimum over logits (the target's entropy).

    Same gradient as plain BCE; reaches zero on perfect soft-target predictions.
    """
    bce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    t = target.clamp(1e-12, 1 - 1e-12)
    ent = -(t * t.log() + (1 - t) * (1 - t).log())
    ent = torch.where((target <= 0) | (target >= 1), torch.zeros_like(ent), ent)
    return bce - ent


def detection_loss(out: Mapping[str, torch.Tensor], gt: Mapping[str, torch.Tensor],
                   lambdas: Sequence[float] = (1.0, 1.0, 1.0)) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Heatmap BCE + masked L1 box regression + axis-aligned BEV IoU loss."""
    hm, reg = out["det_heatmap"], out["det_reg"]
    if hm.shape != gt["det_heatmap"].shape or reg.shape != gt["det_reg"].shape:
        raise ValueError(f"detection shape mismatch: {tuple(hm.shape)} vs {tuple(gt['det_heatmap'].shape)}")
    l_cls = _bce_excess(hm, gt["det_heatmap"]).mean()

    mask = gt["det_mask"] > 0  # (B, H, W)
    n = int(mask.sum())
    if n == 0:
        zero = reg.sum() * 0.0
        l_reg, l_iou = zero, zero
    else:
        p = reg.permute(0, 2, 3, 1)[mask]  # (n, 8)
        t = gt["det_reg"].permute(0, 2, 3, 1)[mask]
        l_reg = (p - t).abs().sum(dim=1).mean()
        l_iou = (1.0 - aligned_bev_iou(p, t)).mean()
    total = lambdas[0] * l_cls + lambdas[1] * l_reg + lambdas[2] * l_iou
    return total, {"cls": l_cls, "reg": l_reg, "iou": l_iou}


def aligned_bev_iou(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Axis-aligned BEV IoU between regression vectors (dx, dy, z, log w, log l, ...).

    Extent along x is ``l``, along y is ``w``; yaw is ignored.
    """
    def bounds(r):
        w, l = r[:, 3].exp(), r[:, 4].exp()
        return r[:, 0] - l / 2, r[:, 0] + l / 2, r[:, 1] - w / 2, r[:, 1] + w / 2, w * l

    px0, px1, py0, py1, pa = bounds(pred)
    tx0, tx1, ty0, ty1, ta = bounds(target)
    ix = (torch.minimum(px1, tx1) - torch.maximum(px0, tx0)).clamp(min=0)
    iy = (torch.minimum(py1, ty1) - torch.maximum(py0, ty0)).clamp(min=0)
    inter = ix * iy
    return inter / (pa + ta - inter)


def focal_loss(logits: torch.Tensor, target: torch.Tensor, gamma: float = 2.0, alpha: Optional[float] = 0.25) -> torch.Tensor:
    """Mean binary focal loss; ``alpha=None`` disables class balancing."""
    ce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * target + (1 - p) * (1 - target)
    loss = ce * (1 - p_t) ** gamma
    if alpha is not None:
        loss = (alpha * target + (1 - alpha) * (1 - target)) * loss
    return loss.mean()


def map_loss(logits: torch.Tensor, masks: torch.Tensor, gamma: float = 2.0, alpha: Optional[float] = 0.25) -> torch.Tensor:
    if logits.shape != masks.shape:
        raise ValueError(f"map shape mismatch: {tuple(logits.shape)} vs {tuple(masks.shape)}")
    return focal_loss(logits, masks, gamma, alpha)


def push_pull(embed: torch.Tensor, inst: torch.Tensor, margin: float) -> tuple[torch.Tensor, torch.Tensor, int, int]:
    """Summed pull and push terms for one sample plus the instance and pair counts.

    ``embed`` is (E, H, W), ``inst`` (H, W) with -1 for background.
    """
    ids = [int(i) for i in torch.unique(inst) if i >= 0]
    zero = embed.sum() * 0.0
    if not ids:
        return zero, zero, 0, 0
    means, pull = [], zero
    for i in ids:
        e = embed[:, inst == i]  # (E, n)
        mu = e.mean(dim=1, keepdim=True)
        pull = pull + ((e - mu) ** 2).sum(dim=0).mean()
        means.append(mu[:, 0])
    push, pairs = zero, 0
    for a in range(len(means)):
        for b in range(a + 1, len(means)):
            d = torch.linalg.vector_norm(means[a] - means[b])
            push = push + F.relu(margin - d) ** 2
            pairs += 1
    return pull, push, len(ids), pairs


def lane_loss(out: Mapping[str, torch.Tensor], gt: Mapping[str, torch.Tensor],
              lambdas: Sequence[float] = (1.0, 1.0, 1.0, 1.0), margin: float = 3.0) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    conf = out["lane_conf"][:, 0]
    if conf.shape != gt["lane_conf"].shape:
        raise ValueError("lane shape mismatch")
    l_conf = F.binary_cross_entropy_with_logits(conf, gt["lane_conf"])
    on = gt["lane_conf"] > 0
    zero = conf.sum() * 0.0
    if on.any():
        l_off = ((out["lane_offset"][:, 0][on] - gt["lane_offset"][on]) ** 2).mean()
        cls_logits = out["lane_cls"].permute(0, 2, 3, 1)[on]
        l_cls = F.cross_entropy(cls_logits, gt["lane_class"][on].long())
    else:
        l_off, l_cls = zero, zero
    pull_sum, push_sum, n_inst, n_pairs = zero, zero, 0, 0
    for b in range(conf.shape[0]):
        pl, ps, ni, npair = push_pull(out["lane_embed"][b], gt["lane_embed_id"][b], margin)
        pull_sum, push_sum = pull_sum + pl, push_sum + ps
        n_inst, n_pairs = n_inst + ni, n_pairs + npair
    pull = pull_sum / n_inst if n_inst else zero
    push = push_sum / n_pairs if n_pairs else zero
    l_emb = pull + push
    total = lambdas[0] * l_conf + lambdas[1] * l_off + lambdas[2] * l_emb + lambdas[3] * l_cls
    return total, {"conf": l_conf, "offset": l_off, "emb": l_emb, "pull": pull, "push": push, "cls": l_cls}


def occ_loss(logits: torch.Tensor, occ_grid: torch.Tensor) -> torch.Tensor:
    """Mean voxel cross-entropy; logits (B, H, W, n_z, C), labels (B, H, W, n_z)."""
    if logits.shape[:-1] != occ_grid.shape:
        raise ValueError("occupancy shape mismatch")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), occ_grid.reshape(-1).long())


def depth_loss(logits: torch.Tensor, bins: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Per-bin BCE over pixels with a one-hot target; returns (loss, any_valid).

    ``logits`` and ``bins`` are (..., D, H_feat, W_feat).
    """
    if logits.shape != bins.shape:
        raise ValueError("depth shape mismatch")
    valid = bins.sum(dim=-3) > 0
    if not valid.any():
        return logits.sum() * 0.0, False
    bce = F.binary_cross_entropy_with_logits(logits, bins, reduction="none")
    per_pixel = bce.mean(dim=-3)
    return per_pixel[valid].mean(), True


# ---------------------------------------------------------------------- combination


@dataclass
class LossReport:
    losses: dict[str, float]
    weights: dict[str, float]
    combined: float
    grad_norms: dict[str, float] = field(default_factory=dict)
    step: int = 0
    stage: str = ""
    total: Optional[torch.Tensor] = None  # graph-carrying combined loss
    warnings: list[str] = field(default_factory=list)

    CSV_HEADER = (["step"] + [f"loss_{c}" for c in COMPONENTS] + [f"w_{c}" for c in COMPONENTS]
                  + ["combined"] + [f"gnorm_{c}" for c in COMPONENTS] + ["stage"])

    def csv_row(self) -> list:
        return ([self.step] + [self.losses.get(c, 0.0) for c in COMPONENTS] + [self.weights.get(c, 0.0) for c in COMPONENTS]
                + [self.combined] + [self.grad_norms.get(c, float("nan")) for c in COMPONENTS] + [self.stage])


def combine(parts: Mapping[str, torch.Tensor], weights, step: int = 0) -> LossReport:
    """``sum_i w_i * L_i`` over the components present in ``parts``.

    ``weights`` may be a LossWeights, a GradNormState or any length-5 sequence
    ordered as (det, map, lane, occ, depth).
    """
    if isinstance(weights, LossWeights):
        w = weights.as_array()
    elif isinstance(weights, GradNormState):
        w = weights.weights
    else:
        w = np.asarray(weights, dtype=np.float64)
    total = None
    for i, c in enumerate(COMPONENTS):
        if c in parts:
            term = float(w[i]) * parts[c]
            total = term if total is None else total + term
    if total is None:
        raise ValueError("no loss components given")
    return LossReport(
        losses={c: float(parts[c].detach()) for c in COMPONENTS if c in parts},
        weights={c: float(w[i]) for i, c in enumerate(COMPONENTS)},
        combined=float(total.detach()),
        step=step,
        total=total,
    )


@dataclass(frozen=True)
class GradNormState:
    weights: np.ndarray = field(default_factory=lambda: np.ones(5))
    initial_losses: Optional[np.ndarray] = None
    alpha: float = 1.5
    lr: float = 0.025
    include_depth: bool = True
    min_weight: float = 1e-4
    warnings: tuple[str, ...] = ()

    @property
    def active(self) -> np.ndarray:
        # depth is the last component; leaving it out freezes its weight
        n = len(self.weights)
        return np.arange(n) if self.include_depth else np.arange(n - 1)

    def to_dict(self) -> dict:
        return {"weights": np.asarray(self.weights, dtype=np.float64),
                "initial_losses": None if self.initial_losses is None else np.asarray(self.initial_losses, dtype=np.float64),
                "alpha": self.alpha, "lr": self.lr, "include_depth": self.include_depth,
                "min_weight": self.min_weight, "warnings": list(self.warnings)}

    @classmethod
    def from_dict(cls, d: dict) -> "GradNormState":
        il = d.get("initial_losses")
        return cls(np.asarray(d["weights"], dtype=np.float64), None if il is None else np.asarray(il, dtype=np.float64),
                   d["alpha"], d["lr"], d["include_depth"], d["min_weight"], tuple(d.get("warnings", ())))


def _renormalize(w: np.ndarray, total: float, floor: float) -> np.ndarray:
    """Scale to ``sum == total`` keeping every entry >= floor."""
    w = np.maximum(w, floor)
    fixed = np.zeros(len(w), dtype=bool)
    for _ in range(len(w) + 1):
        free = ~fixed
        budget = total - floor * fixed.sum()
        scaled = w.copy()
        scaled[free] = w[free] * budget / w[free].sum()
        low = free & (scaled < floor)
        if not low.any():
            scaled[fixed] = floor
            return scaled
        fixed |= low
    raise RuntimeError("renormalization did not converge")


def gradnorm_update(state: GradNormState, losses: Sequence[float], grad_norms: Sequence[float]) -> GradNormState:
    """One GradNorm step on the task weights.

    ``grad_norms[i]`` is the norm of the gradient of ``w_i * L_i`` with respect
    to the shared reference parameters. Targets are held constant.
    """
    idx = state.active
    n = len(idx)
    L = np.asarray(losses, dtype=np.float64)[idx]
    G = np.asarray(grad_norms, dtype=np.float64)[idx]
    w_all = np.asarray(state.weights, dtype=np.float64).copy()
    w = w_all[idx]
    warnings = list(state.warnings)

    init = state.initial_losses
    if init is None:
        init = np.asarray(losses, dtype=np.float64).copy()
    L0 = np.asarray(init, dtype=np.float64)[idx].copy()
    bad = ~(L0 > 0)
    if bad.any():
        warnings.append(f"nonpositive initial loss for {[COMPONENTS[i] for i in idx[bad]]}; using 1.0")
        L0[bad] = 1.0

    rel = L / L0
    mean_rel = rel.mean()
    r = rel / mean_rel if mean_rel > 0 else np.ones(n)
    target = G.mean() * r ** state.alpha
    unweighted = G / w  # d G_i / d w_i
    grad = np.sign(G - target) * unweighted
    w_new = _renormalize(w - state.lr * grad, float(n), state.min_weight)
    w_all[idx] = w_new
    full_init = np.asarray(init, dtype=np.float64).copy()
    full_init[idx] = L0
    return replace(state, weights=w_all, initial_losses=full_init, warnings=tuple(warnings))


def shared_grad_norms(parts: Mapping[str, torch.Tensor], weights: np.ndarray, shared: torch.Tensor) -> np.ndarray:
    """``||d(w_i L_i)/d shared||_2`` per component; zero for components not reaching ``shared``."""
    out = np.zeros(5)
    for i, c in enumerate(COMPONENTS):
        if c not in parts or not parts[c].requires_grad:
            continue
        (g,) = torch.autograd.grad(parts[c], shared, retain_graph=True, allow_unused=True)
        if g is not None:
            out[i] = float(weights[i]) * float(torch.linalg.vector_norm(g))
    return out


def task_losses(outputs, gt: Mapping[str, torch.Tensor], tasks: Sequence[str] = ("det", "map", "lane", "occ", "depth"),
                weights: LossWeights = LossWeights(), margin: float = 3.0) -> dict[str, torch.Tensor]:
    """Raw component losses for a TaskHeadOutputs batch."""
    parts: dict[str, torch.Tensor] = {}
    if "det" in tasks:
        parts["det"], _ = detection_loss(outputs.task_parts("det"), gt, weights.det_lambdas)
    if "map" in tasks:
        parts["map"] = map_loss(outputs.map, gt["map_masks"])
    if "lane" in tasks:
        parts["lane"], _ = lane_loss(outputs.task_parts("lane"), gt, weights.lane_lambdas, margin)
    if "occ" in tasks:
        parts["occ"] = occ_loss(outputs.occ, gt["occ_grid"])
    if "depth" in tasks:
        parts["depth"], _ = depth_loss(outputs.depth, gt["depth_bins"])
    return parts
