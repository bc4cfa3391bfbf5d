"""Shared camera-to-BEV extractor with four task heads."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from quadbev.bevgeom import (
    BevGridSpec,
    CameraModel,
    EgoPose,
    build_frustum,
    lift_and_splat,
    splat_geometry,
    temporal_concat,
    warp_bev,
)


class ModuleGroup(str, enum.Enum):
    backbone = "backbone"
    depth_estimator = "depth_estimator"
    view_projector = "view_projector"
    temporal_fusor = "temporal_fusor"
    bev_encoder = "bev_encoder"
    head_det = "head_det"
    head_map = "head_map"
    head_lane = "head_lane"
    head_occ = "head_occ"


TASKS = ("det", "map", "lane", "occ")
HEAD_OF = {t: ModuleGroup(f"head_{t}") for t in TASKS}
EXTRACTOR_GROUPS = (ModuleGroup.backbone, ModuleGroup.depth_estimator, ModuleGroup.bev_encoder)
PARAMETRIC_GROUPS = EXTRACTOR_GROUPS + tuple(HEAD_OF.values())


@dataclass(frozen=True)
class ModelConfig:
    backbone_widths: tuple[int, int, int] = (16, 32, 64)
    context_channels: int = 16
    bev_channels: int = 32
    head_channels: int = 16
    occ_mlp_hidden: int = 32
    n_cameras: int = 4
    image_size: tuple[int, int] = (128, 64)  # (width, height)
    grid: BevGridSpec = field(default_factory=BevGridSpec)
    feature_stride: int = 8
    t_hist: int = 3
    c_det: int = 3
    c_map: int = 3
    c_lane_cls: int = 2
    c_occ: int = 5
    embed_dim: int = 4
    zero_init_last_norm: bool = False
    seed: int = 0

    def __post_init__(self):
        widths = [*self.backbone_widths, self.context_channels, self.bev_channels, self.head_channels, self.occ_mlp_hidden]
        if min(widths) <= 0:
            raise ValueError("all channel widths must be positive")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if len(self.backbone_widths) != 3 or 2 ** 3 != self.feature_stride:
            raise ValueError("backbone has three stride-2 stages; feature_stride must be 8")

    @property
    def feat_size(self) -> tuple[int, int]:
        return self.image_size[1] // self.feature_stride, self.image_size[0] // self.feature_stride

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["grid"] = BevGridSpec.from_dict(d["grid"])
        for k in ("backbone_widths", "image_size"):
            d[k] = tuple(d[k])
        return cls(**d)


def conv_bn(c_in: int, c_out: int, k: int = 3, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Three stride-2 stages plus a 1x1 context projection."""

    def __init__(self, widths, context_channels, zero_init_last_norm=False):
        super().__init__()
        layers, c = [], 3
        for w in widths:
            layers += [conv_bn(c, w, 3, 2), conv_bn(w, w, 3, 1)]
            c = w
        self.stages = nn.Sequential(*layers)
        self.context = nn.Conv2d(c, context_channels, 1, bias=False)
        self.context_norm = nn.BatchNorm2d(context_channels)
        if zero_init_last_norm:
            nn.init.zeros_(self.context_norm.weight)

    def forward(self, x):
        feats = self.stages(x)
        return feats, self.context_norm(self.context(feats))


class DepthNet(nn.Module):
    def __init__(self, c_in, n_bins):
        super().__init__()
        self.reduce = conv_bn(c_in, c_in, 1)
        self.out = nn.Conv2d(c_in, n_bins, 3, padding=1)

    def forward(self, x):
        return self.out(self.reduce(x))


class BevEncoder(nn.Module):
    """Full-resolution stage and a half-resolution stage merged by the final conv."""

    def __init__(self, c_in, c):
        super().__init__()
        self.stage1 = conv_bn(c_in, c)
        self.stage2 = nn.Sequential(conv_bn(c, c, 3, 2), conv_bn(c, c))
        self.final = nn.Conv2d(2 * c, c, 3, padding=1, bias=False)
        self.final_norm = nn.BatchNorm2d(c)

    def forward(self, x):
        a = self.stage1(x)
        b = F.interpolate(self.stage2(a), size=a.shape[-2:], mode="bilinear", align_corners=False)
        return F.relu(self.final_norm(self.final(torch.cat([a, b], dim=1))))

    @property
    def shared_reference(self) -> nn.Parameter:
        return self.final.weight


def head_encoder(c_in, c):
    return nn.Sequential(conv_bn(c_in, c), conv_bn(c, c), conv_bn(c, c))


class DetHead(nn.Module):
    def __init__(self, c_in, c, n_cls):
        super().__init__()
        self.encoder = head_encoder(c_in, c)
        self.heatmap = nn.Conv2d(c, n_cls, 1)
        self.reg = nn.Conv2d(c, 8, 1)
        nn.init.constant_(self.heatmap.bias, -2.19)

    def forward(self, x):
        f = self.encoder(x)
        return {"det_heatmap": self.heatmap(f), "det_reg": self.reg(f)}


class MapHead(nn.Module):
    def __init__(self, c_in, c, n_cls):
        super().__init__()
        self.encoder = head_encoder(c_in, c)
        self.out = nn.Conv2d(c, n_cls, 1)

    def forward(self, x):
        return {"map": self.out(self.encoder(x))}


class LaneHead(nn.Module):
    def __init__(self, c_in, c, n_cls, embed_dim):
        super().__init__()
        self.encoder = head_encoder(c_in, c)
        self.conf = nn.Conv2d(c, 1, 1)
        self.offset = nn.Conv2d(c, 1, 1)
        self.embed = nn.Conv2d(c, embed_dim, 1)
        self.cls = nn.Conv2d(c, n_cls, 1)
        nn.init.constant_(self.conf.bias, -2.19)

    def forward(self, x):
        f = self.encoder(x)
        return {"lane_conf": self.conf(f), "lane_offset": self.offset(f), "lane_embed": self.embed(f), "lane_cls": self.cls(f)}


class OccHead(nn.Module):
    """Convolutional encoder then a per-cell two-layer MLP producing ``n_z * C`` logits."""

    def __init__(self, c_in, c, hidden, n_z, n_cls):
        super().__init__()
        self.encoder = head_encoder(c_in, c)
        self.mlp = nn.Sequential(nn.Conv2d(c, hidden, 1), nn.ReLU(inplace=True), nn.Conv2d(hidden, n_z * n_cls, 1))
        self.n_z, self.n_cls = n_z, n_cls

    def forward(self, x):
        return {"occ": occ_to_voxels(self.mlp(self.encoder(x)), self.n_z, self.n_cls)}


def occ_to_voxels(x: torch.Tensor, n_z: int, n_cls: int) -> torch.Tensor:
    """(B, n_z*C, H, W) -> (B, H, W, n_z, C)."""
    B, _, H, W = x.shape
    return x.reshape(B, n_z, n_cls, H, W).permute(0, 3, 4, 1, 2)


def voxels_to_occ(v: torch.Tensor) -> torch.Tensor:
    B, H, W, n_z, n_cls = v.shape
    return v.permute(0, 3, 4, 1, 2).reshape(B, n_z * n_cls, H, W)


@dataclass
class TaskHeadOutputs:
    depth: torch.Tensor  # (B, N_cam, D, H_feat, W_feat) logits
    det_heatmap: Optional[torch.Tensor] = None
    det_reg: Optional[torch.Tensor] = None
    map: Optional[torch.Tensor] = None
    lane_conf: Optional[torch.Tensor] = None
    lane_offset: Optional[torch.Tensor] = None
    lane_embed: Optional[torch.Tensor] = None
    lane_cls: Optional[torch.Tensor] = None
    occ: Optional[torch.Tensor] = None  # (B, H, W, n_z, C)
    shared_bev: Optional[torch.Tensor] = None

    def task_parts(self, task: str) -> dict[str, torch.Tensor]:
        keys = {"det": ("det_heatmap", "det_reg"), "map": ("map",),
                "lane": ("lane_conf", "lane_offset", "lane_embed", "lane_cls"), "occ": ("occ",)}[task]
        return {k: getattr(self, k) for k in keys}


@dataclass(eq=False)
class FrameInput:
    """One timestamped multiview frame as fed to the network."""

    images: torch.Tensor  # (N_cam, 3, H, W)
    cameras: Sequence[CameraModel]
    pose: EgoPose
    history: list["FrameInput"] = field(default_factory=list)  # newest first


class QuadBEV(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        g = config.grid
        cb = config.backbone_widths
        self.groups = nn.ModuleDict({
            ModuleGroup.backbone.value: Backbone(cb, config.context_channels, config.zero_init_last_norm),
            ModuleGroup.depth_estimator.value: DepthNet(cb[-1], g.n_depth_bins),
            ModuleGroup.bev_encoder.value: BevEncoder(config.context_channels * (1 + config.t_hist), config.bev_channels),
            ModuleGroup.head_det.value: DetHead(config.bev_channels, config.head_channels, config.c_det),
            ModuleGroup.head_map.value: MapHead(config.bev_channels, config.head_channels, config.c_map),
            ModuleGroup.head_lane.value: LaneHead(config.bev_channels, config.head_channels, config.c_lane_cls, config.embed_dim),
            ModuleGroup.head_occ.value: OccHead(config.bev_channels, config.head_channels, config.occ_mlp_hidden, g.n_z, config.c_occ),
        })
        self._init_weights(config.seed)
        self._geometry_cache: dict[bytes, tuple] = {}

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters()):
            mod_name = name.rsplit(".", 1)[0]
            module = self.get_submodule(mod_name)
            if isinstance(module, (nn.Conv2d, nn.Linear)) and name.endswith("weight"):
                fan_in = p[0].numel()
                bound = 1.0 / np.sqrt(fan_in)
                with torch.no_grad():
                    p.copy_(torch.rand(p.shape, generator=gen) * 2 * bound - bound)
            elif isinstance(module, (nn.Conv2d, nn.Linear)) and name.endswith("bias"):
                if module in (self.group("head_det").heatmap, self.group("head_lane").conf):
                    continue
                fan_in = module.weight[0].numel()
                bound = 1.0 / np.sqrt(fan_in)
                with torch.no_grad():
                    p.copy_(torch.rand(p.shape, generator=gen) * 2 * bound - bound)

    def group(self, g) -> nn.Module:
        return self.groups[ModuleGroup(g).value]

    def group_parameters(self, g) -> list[nn.Parameter]:
        g = ModuleGroup(g)
        if g.value not in self.groups:
            return []
        return list(self.groups[g.value].parameters())

    def parameter_groups(self) -> dict[ModuleGroup, list[nn.Parameter]]:
        return {g: self.group_parameters(g) for g in ModuleGroup}

    @property
    def shared_reference(self) -> nn.Parameter:
        return self.group("bev_encoder").shared_reference

    # ----------------------------------------------------------------- extractor

    def _geometry(self, cam: CameraModel):
        key = cam.key()
        if key not in self._geometry_cache:
            fr = build_frustum(cam, self.config.grid, self.config.feature_stride)
            self._geometry_cache[key] = (fr, splat_geometry(fr, cam, self.config.grid))
        return self._geometry_cache[key]

    def backbone_forward(self, images: torch.Tensor):
        """(N, 3, H, W) -> (features, context)."""
        s = self.config.feature_stride
        if images.shape[-1] % s or images.shape[-2] % s:
            raise ValueError(f"image size {tuple(images.shape[-2:])} not divisible by {s}")
        return self.group("backbone")(images)

    def depth_head_forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.group("depth_estimator")(features)

    def pooled_bev(self, images: torch.Tensor, cameras: Sequence[CameraModel]):
        """Per-frame lift-splat; returns raw BEV (C_ctx, H, W) and depth logits (N, D, Hf, Wf)."""
        feats, ctx = self.backbone_forward(images)
        depth_logits = self.depth_head_forward(feats)
        probs = depth_logits.softmax(dim=1)
        g = self.config.grid
        bev = ctx.new_zeros(ctx.shape[1], g.H_bev, g.W_bev)
        for i, cam in enumerate(cameras):
            fr, geom = self._geometry(cam)
            bev = bev + lift_and_splat(ctx[i], probs[i], fr, cam, g, geometry=geom)
        return bev, depth_logits

    def extract_bev(self, frames: Sequence[FrameInput], history_grad: bool = False):
        """Shared BEV map (B, C_bev, H, W) and depth logits (B, N, D, Hf, Wf)."""
        raws, depths = [], []
        for fr in frames:
            if len(fr.history) > self.config.t_hist:
                raise ValueError(f"history length {len(fr.history)} exceeds t_hist={self.config.t_hist}")
            raw, depth = self.pooled_bev(fr.images, fr.cameras)
            hist = []
            for past in fr.history:
                with torch.set_grad_enabled(history_grad and torch.is_grad_enabled()):
                    past_raw, _ = self.pooled_bev(past.images, past.cameras)
                hist.append(warp_bev(past_raw, past.pose, fr.pose, self.config.grid))
            raws.append(temporal_concat(raw, hist, self.config.t_hist))
            depths.append(depth)
        shared = self.group("bev_encoder")(torch.stack(raws))
        return shared, torch.stack(depths)

    # ----------------------------------------------------------------- heads

    def head_forward(self, task: str, shared_bev: torch.Tensor) -> dict[str, torch.Tensor]:
        return self.group(HEAD_OF[task])(shared_bev)

    def forward(self, frames: Sequence[FrameInput], tasks: Sequence[str] = TASKS, history_grad: bool = False) -> TaskHeadOutputs:
        shared, depth = self.extract_bev(frames, history_grad=history_grad)
        return self.forward_heads(shared, depth, tasks)

    def forward_heads(self, shared: torch.Tensor, depth: torch.Tensor, tasks: Sequence[str] = TASKS) -> TaskHeadOutputs:
        out = TaskHeadOutputs(depth=depth, shared_bev=shared)
        for t in tasks:
            for k, v in self.head_forward(t, shared).items():
                setattr(out, k, v)
        return out

    def set_group_mode(self, frozen: Sequence) -> None:
        """Train mode everywhere except the frozen groups (eval mode for their norm statistics)."""
        self.train()
        for g in frozen:
            g = ModuleGroup(g)
            if g.value in self.groups:
                self.groups[g.value].eval()
