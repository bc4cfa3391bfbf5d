"""Flat-shaded ray casting of a World into multiview images with exact depth."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from quadbev.bevgeom import BevGridSpec, CameraModel, EgoPose
from quadbev.synthworld.world import World

SKY = np.array([0.55, 0.75, 0.95])
GRASS = np.array([0.25, 0.45, 0.20])
MAP_COLORS = np.array([[0.30, 0.30, 0.32], [0.62, 0.56, 0.50], [0.85, 0.72, 0.10]])
LANE_COLORS = np.array([[0.97, 0.97, 0.97], [0.80, 0.85, 0.95]])
BOX_COLORS = np.array([[0.85, 0.12, 0.10], [0.10, 0.25, 0.90], [0.95, 0.55, 0.05]])
# shading factor for faces hit along local x, y, z
FACE_SHADE = np.array([0.85, 0.65, 1.0])
LANE_PAINT_HALF_WIDTH = 0.15


@dataclass(eq=False)
class Sample:
    images: np.ndarray  # (N_cam, 3, H, W) float32 in [0, 1]
    depth_gt: np.ndarray  # (N_cam, H, W) float32 meters, 0 = no hit
    cameras: list[CameraModel]
    ego_pose: EgoPose
    world_ref: World  # geometry in the current ego frame
    sequence_id: int = 0
    frame_index: int = 0


def camera_rays(cam: CameraModel):
    """Ego-frame ray origin and per-pixel directions scaled so camera-z = 1."""
    w, h = cam.image_size
    K = cam.intrinsics
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    d_cam = np.stack([(uu - K[0, 2]) / K[0, 0], (vv - K[1, 2]) / K[1, 1], np.ones_like(uu)], axis=-1)
    R = cam.cam_to_ego[:3, :3]
    dirs = np.einsum("ij,hwj->hwi", R, d_cam)
    return cam.cam_to_ego[:3, 3].copy(), dirs


def _ground_color(world: World, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    col = np.broadcast_to(GRASS, x.shape + (3,)).copy()
    for cat in range(len(world.map_layers)):  # later categories paint over earlier ones
        m = world.map_contains(cat, x, y)
        col[m] = MAP_COLORS[cat]
    for lane in world.lanes:
        pts = lane.points
        best = np.full(x.shape, np.inf)
        for a, b in zip(pts[:-1], pts[1:]):
            ab = b - a
            t = np.clip(((x - a[0]) * ab[0] + (y - a[1]) * ab[1]) / (ab @ ab), 0.0, 1.0)
            d = np.hypot(x - (a[0] + t * ab[0]), y - (a[1] + t * ab[1]))
            best = np.minimum(best, d)
        col[best < LANE_PAINT_HALF_WIDTH] = LANE_COLORS[lane.category]
    return col


def _cast(world: World, origin: np.ndarray, dirs: np.ndarray):
    """Returns depth (0 = miss) and color arrays for rays (..., 3)."""
    shape = dirs.shape[:-1]
    t_best = np.full(shape, np.inf)
    color = np.broadcast_to(SKY, shape + (3,)).copy()

    dz = dirs[..., 2]
    down = dz < 0
    t_ground = np.where(down, (world.ground_elevation - origin[2]) / np.where(down, dz, -1.0), np.inf)
    hit_g = down & (t_ground > 0)
    t_best = np.where(hit_g, t_ground, t_best)

    for box in world.boxes:
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        o = origin - np.array(box.center)
        lo_ = np.array([c * o[0] + s * o[1], -s * o[0] + c * o[1], o[2]])
        ld = np.stack([c * dirs[..., 0] + s * dirs[..., 1], -s * dirs[..., 0] + c * dirs[..., 1], dirs[..., 2]], axis=-1)
        w, l, h = box.size
        half = np.array([l / 2, w / 2, h / 2])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / ld
            ta = (-half - lo_) * inv
            tb = (half - lo_) * inv
        tmin = np.minimum(ta, tb)
        tmax = np.maximum(ta, tb)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        t_near = tmin.max(axis=-1)
        t_far = tmax.min(axis=-1)
        face = tmin.argmax(axis=-1)
        hit = (t_near <= t_far) & (t_near > 0) & (t_near < t_best)
        t_best = np.where(hit, t_near, t_best)
        color[hit] = BOX_COLORS[box.category] * FACE_SHADE[face[hit]][:, None]
        hit_g &= ~hit

    if hit_g.any():
        pts = origin + t_best[hit_g][:, None] * dirs[hit_g]
        color[hit_g] = _ground_color(world, pts[:, 0], pts[:, 1])
    depth = np.where(np.isfinite(t_best), t_best, 0.0)
    return depth, color


def render_sample(world: World, cameras: list[CameraModel], ego_pose: EgoPose, grid: BevGridSpec | None = None,
                  sequence_id: int = 0, frame_index: int = 0) -> Sample:
    """Ray-cast every camera of the rig at ``ego_pose``.

    ``world`` is expressed in the sequence frame; the returned sample keeps a
    copy transformed into the current ego frame. Depth is measured along the
    camera z-axis.
    """
    if not cameras:
        raise ValueError("at least one camera is required")
    local = world.to_ego(ego_pose)
    sizes = {c.image_size for c in cameras}
    if len(sizes) != 1:
        raise ValueError("all cameras must share image_size")
    images, depths = [], []
    for cam in cameras:
        origin, dirs = camera_rays(cam)
        depth, color = _cast(local, origin, dirs)
        images.append(np.clip(color, 0.0, 1.0).transpose(2, 0, 1))
        depths.append(depth)
    return Sample(
        images=np.stack(images).astype(np.float32),
        depth_gt=np.stack(depths).astype(np.float32),
        cameras=list(cameras),
        ego_pose=ego_pose,
        world_ref=local,
        sequence_id=sequence_id,
        frame_index=frame_index,
    )
