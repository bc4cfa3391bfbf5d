"""Ground-truth rasters for all four heads plus per-camera depth bins."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from quadbev.bevgeom import BevGridSpec, CameraModel
from quadbev.synthworld.world import (
    DET_CATEGORIES,
    FREE,
    GROUND,
    MAP_CATEGORIES,
    World,
)


@dataclass(eq=False)
class GtRasters:
    det_heatmap: np.ndarray  # (C_det, H, W)
    det_reg: np.ndarray  # (8, H, W): dx, dy (m), z, log w, log l, log h, sin yaw, cos yaw
    det_mask: np.ndarray  # (H, W)
    map_masks: np.ndarray  # (C_map, H, W)
    lane_conf: np.ndarray  # (H, W)
    lane_offset: np.ndarray  # (H, W) cells, across the lane's major axis
    lane_embed_id: np.ndarray  # (H, W) int32, -1 off-lane
    lane_class: np.ndarray  # (H, W) int32, -1 off-lane
    occ_grid: np.ndarray  # (H, W, n_z) int32
    depth_bins: np.ndarray  # (N_cam, D, H_feat, W_feat)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def gaussian_sigma(size, cell_size: float) -> float:
    w, l = size[0], size[1]
    return max(1.0, min(w, l) / (3.0 * cell_size))


def _draw_heatmap(hm: np.ndarray, col: int, row: int, sigma: float) -> None:
    H, W = hm.shape
    r = int(math.ceil(3 * sigma))
    r0, r1 = max(0, row - r), min(H, row + r + 1)
    c0, c1 = max(0, col - r), min(W, col + r + 1)
    jj, ii = np.meshgrid(np.arange(c0, c1) - col, np.arange(r0, r1) - row)
    g = np.exp(-(ii ** 2 + jj ** 2) / (2 * sigma ** 2))
    np.maximum(hm[r0:r1, c0:c1], g, out=hm[r0:r1, c0:c1])


def rasterize_lanes(world: World, grid: BevGridSpec):
    """Per-column (or per-row) lane cells with sub-cell offsets in ``[-0.5, 0.5)``."""
    H, W = grid.H_bev, grid.W_bev
    conf = np.zeros((H, W), np.float32)
    offset = np.zeros((H, W), np.float32)
    inst = np.full((H, W), -1, np.int32)
    cls = np.full((H, W), -1, np.int32)
    xs, ys = grid.cell_centers()
    cs = grid.cell_size
    for lane in world.lanes:
        p = lane.points
        span = np.abs(p[-1] - p[0])
        major = 0 if span[0] >= span[1] else 1  # 0: x-major, 1: y-major
        minor = 1 - major
        order = np.argsort(p[:, major], kind="stable")
        a, b = p[order, major], p[order, minor]
        centers = xs if major == 0 else ys
        sel = (centers >= a[0]) & (centers <= a[-1])
        for k in np.flatnonzero(sel):
            v = np.interp(centers[k], a, b)
            lo = grid.y_range[0] if minor == 1 else grid.x_range[0]
            j = int(math.floor((v - lo) / cs))
            n_minor = H if minor == 1 else W
            if not 0 <= j < n_minor:
                continue
            off = (v - (lo + (j + 0.5) * cs)) / cs
            r, c = (j, k) if major == 0 else (k, j)
            conf[r, c] = 1.0
            offset[r, c] = off
            inst[r, c] = lane.instance_id
            cls[r, c] = lane.category
    return conf, offset, inst, cls


def depth_to_bins(depth: np.ndarray, grid: BevGridSpec, stride: int) -> np.ndarray:
    """One-hot bins from the minimum positive depth of each stride block."""
    h, w = depth.shape
    blocks = depth.reshape(h // stride, stride, w // stride, stride).transpose(0, 2, 1, 3).reshape(h // stride, w // stride, -1)
    pos = np.where(blocks > 0, blocks, np.inf).min(axis=-1)
    idx = grid.depth_to_bin(np.where(np.isfinite(pos), pos, 0.0))
    out = np.zeros((grid.n_depth_bins, h // stride, w // stride), np.float32)
    vv, uu = np.nonzero(idx >= 0)
    out[idx[vv, uu], vv, uu] = 1.0
    return out


def rasterize_gt(world: World, grid: BevGridSpec, cameras: list[CameraModel] | None = None,
                 depth_gt: np.ndarray | None = None, feature_stride: int = 8) -> GtRasters:
    """Build every training target from an ego-frame world."""
    H, W = grid.H_bev, grid.W_bev
    cs = grid.cell_size
    xs, ys = grid.cell_centers()

    hm = np.zeros((len(DET_CATEGORIES), H, W), np.float32)
    reg = np.zeros((8, H, W), np.float32)
    mask = np.zeros((H, W), np.float32)
    for box in world.boxes:
        col, row = grid.point_to_cell(box.center[0], box.center[1])
        col, row = int(col), int(row)
        if not (0 <= col < W and 0 <= row < H):
            continue
        _draw_heatmap(hm[box.category], col, row, gaussian_sigma(box.size, cs))
        hm[box.category, row, col] = 1.0
        w, l, h = box.size
        reg[:, row, col] = [
            box.center[0] - xs[col], box.center[1] - ys[row], box.center[2],
            math.log(w), math.log(l), math.log(h), math.sin(box.yaw), math.cos(box.yaw),
        ]
        mask[row, col] = 1.0

    gx, gy = np.meshgrid(xs, ys)
    maps = np.stack([world.map_contains(c, gx, gy) for c in range(len(MAP_CATEGORIES))]).astype(np.float32)

    lane_conf, lane_offset, lane_inst, lane_cls = rasterize_lanes(world, grid)

    zc = grid.z_centers()
    occ = np.full((H, W, grid.n_z), FREE, np.int32)
    ground_layer = int(math.floor((world.ground_elevation - grid.z_range[0]) / grid.z_size))
    if 0 <= ground_layer < grid.n_z:
        occ[:, :, ground_layer] = GROUND
    vox = np.stack(np.broadcast_arrays(gx[..., None], gy[..., None], zc[None, None, :]), axis=-1)
    for box in world.boxes:
        inside = box.contains(vox)
        occ[inside] = box.category

    if depth_gt is not None and cameras is not None:
        bins = np.stack([depth_to_bins(d, grid, feature_stride) for d in depth_gt])
    else:
        bins = np.zeros((0, grid.n_depth_bins, 0, 0), np.float32)

    return GtRasters(hm, reg, mask, maps, lane_conf, lane_offset, lane_inst, lane_cls, occ, bins)
