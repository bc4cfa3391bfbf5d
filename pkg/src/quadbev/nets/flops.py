"""Closed-form multiply-accumulate counts per module group."""
from __future__ import annotations

from typing import Union

from quadbev.nets.model import HEAD_OF, TASKS, ModelConfig, ModuleGroup


def conv_macs(h_out: int, w_out: int, c_in: int, c_out: int, k: int) -> int:
    return h_out * w_out * c_out * k * k * c_in


def _backbone(cfg: ModelConfig) -> int:
    w, h = cfg.image_size
    c, total = 3, 0
    for width in cfg.backbone_widths:
        h, w = (h + 1) // 2, (w + 1) // 2
        total += conv_macs(h, w, c, width, 3) + conv_macs(h, w, width, width, 3)
        c = width
    total += conv_macs(h, w, c, cfg.context_channels, 1)
    return total * cfg.n_cameras


def _depth(cfg: ModelConfig) -> int:
    hf, wf = cfg.feat_size
    c = cfg.backbone_widths[-1]
    return (conv_macs(hf, wf, c, c, 1) + conv_macs(hf, wf, c, cfg.grid.n_depth_bins, 3)) * cfg.n_cameras


def _bev_encoder(cfg: ModelConfig) -> int:
    H, W = cfg.grid.H_bev, cfg.grid.W_bev
    c_in = cfg.context_channels * (1 + cfg.t_hist)
    b = cfg.bev_channels
    h2, w2 = (H + 1) // 2, (W + 1) // 2
    return (conv_macs(H, W, c_in, b, 3) + 2 * conv_macs(h2, w2, b, b, 3) + conv_macs(H, W, 2 * b, b, 3))


def _head(cfg: ModelConfig, task: str) -> int:
    H, W = cfg.grid.H_bev, cfg.grid.W_bev
    b, h = cfg.bev_channels, cfg.head_channels
    enc = conv_macs(H, W, b, h, 3) + 2 * conv_macs(H, W, h, h, 3)
    out_ch = {
        "det": cfg.c_det + 8,
        "map": cfg.c_map,
        "lane": 2 + cfg.embed_dim + cfg.c_lane_cls,
    }
    if task == "occ":
        return enc + conv_macs(H, W, h, cfg.occ_mlp_hidden, 1) + conv_macs(H, W, cfg.occ_mlp_hidden, cfg.grid.n_z * cfg.c_occ, 1)
    return enc + conv_macs(H, W, h, out_ch[task], 1)


def flops_count(cfg: ModelConfig, mode: Union[str, tuple[str, str]] = "quad") -> dict[ModuleGroup, int]:
    """MACs per group for ``"quad"`` or ``("single", task)``.

    The extractor is counted once per forward; cached history rasters cost nothing.
    View projection and temporal fusion are parameter-free and contribute zero.
    """
    counts = {
        ModuleGroup.backbone: _backbone(cfg),
        ModuleGroup.depth_estimator: _depth(cfg),
        ModuleGroup.view_projector: 0,
        ModuleGroup.temporal_fusor: 0,
        ModuleGroup.bev_encoder: _bev_encoder(cfg),
    }
    if mode == "quad":
        tasks = TASKS
    elif isinstance(mode, tuple) and mode[0] == "single" and mode[1] in TASKS:
        tasks = (mode[1],)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    for t in TASKS:
        counts[HEAD_OF[t]] = _head(cfg, t) if t in tasks else 0
    return counts


def total_macs(cfg: ModelConfig, mode="quad") -> int:
    return sum(flops_count(cfg, mode).values())


def baseline_macs(cfg: ModelConfig) -> int:
    """Four independent single-task models run back to back."""
    return sum(total_macs(cfg, ("single", t)) for t in TASKS)


def quad_ratio(cfg: ModelConfig) -> float:
    return total_macs(cfg, "quad") / baseline_macs(cfg)
