"""Camera and BEV-grid geometry.

Conventions used throughout the package:

* Ego frame: x forward, y left, z up (meters).
* Camera frame: x right, y down, z forward (OpenCV style).
* Pixel ``(i, j)`` has its center at continuous coordinate ``(i, j)``; a
  feature pixel ``u`` at stride ``s`` covers full-resolution pixels
  ``[u*s, (u+1)*s)`` and its center is ``u*s + (s-1)/2``.
* BEV rasters are indexed ``[..., row, col]`` with ``row`` along y and ``col``
  along x. Cell intervals are half-open ``[min, max)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F


class GeometryError(ValueError):
    """Raised when a geometric contract is violated."""


def _check_rigid(mat: np.ndarray, name: str) -> None:
    if mat.shape != (4, 4):
        raise GeometryError(f"{name} must be 4x4, got {mat.shape}")
    rot = mat[:3, :3]
    if np.abs(rot.T @ rot - np.eye(3)).max() >= 1e-6:
        raise GeometryError(f"{name} rotation block is not orthonormal")
    if not np.allclose(mat[3], [0.0, 0.0, 0.0, 1.0]):
        raise GeometryError(f"{name} last row must be (0, 0, 0, 1)")


@dataclass(frozen=True)
class BevGridSpec:
    x_range: tuple[float, float] = (-16.0, 16.0)
    y_range: tuple[float, float] = (-16.0, 16.0)
    cell_size: float = 0.5
    z_range: tuple[float, float] = (-2.0, 4.0)
    n_z: int = 8
    depth_range: tuple[float, float] = (1.0, 30.0)
    n_depth_bins: int = 16

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range):
            span = (hi - lo) / self.cell_size
            if hi <= lo or abs(span - round(span)) > 1e-9:
                raise GeometryError("grid extent must be a positive multiple of cell_size")
        if self.depth_range[0] <= 0 or self.depth_range[1] <= self.depth_range[0]:
            raise GeometryError("depth_range must satisfy 0 < d_min < d_max")
        if self.n_depth_bins < 2:
            raise GeometryError("n_depth_bins must be >= 2")
        if self.n_z < 1 or self.z_range[1] <= self.z_range[0]:
            raise GeometryError("invalid z layering")

    @property
    def W_bev(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell_size))

    @property
    def H_bev(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell_size))

    @property
    def z_size(self) -> float:
        return (self.z_range[1] - self.z_range[0]) / self.n_z

    @property
    def depth_step(self) -> float:
        return (self.depth_range[1] - self.depth_range[0]) / self.n_depth_bins

    def bin_centers(self) -> np.ndarray:
        d0 = self.depth_range[0]
        return d0 + (np.arange(self.n_depth_bins) + 0.5) * self.depth_step

    def depth_to_bin(self, depth: np.ndarray) -> np.ndarray:
        """Bin index per depth, -1 where outside ``[d_min, d_max)``."""
        depth = np.asarray(depth, dtype=np.float64)
        idx = np.floor((depth - self.depth_range[0]) / self.depth_step).astype(np.int64)
        ok = (depth >= self.depth_range[0]) & (depth < self.depth_range[1])
        return np.where(ok, np.clip(idx, 0, self.n_depth_bins - 1), -1)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """``(xs, ys)`` 1-D arrays of column and row center coordinates."""
        xs = self.x_range[0] + (np.arange(self.W_bev) + 0.5) * self.cell_size
        ys = self.y_range[0] + (np.arange(self.H_bev) + 0.5) * self.cell_size
        return xs, ys

    def z_centers(self) -> np.ndarray:
        return self.z_range[0] + (np.arange(self.n_z) + 0.5) * self.z_size

    def point_to_cell(self, x, y):
        """Column/row indices (may fall outside the raster)."""
        col = np.floor((np.asarray(x) - self.x_range[0]) / self.cell_size).astype(np.int64)
        row = np.floor((np.asarray(y) - self.y_range[0]) / self.cell_size).astype(np.int64)
        return col, row

    def to_dict(self) -> dict:
        return {
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "cell_size": self.cell_size,
            "z_range": list(self.z_range),
            "n_z": self.n_z,
            "depth_range": list(self.depth_range),
            "n_depth_bins": self.n_depth_bins,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BevGridSpec":
        return cls(
            x_range=tuple(d["x_range"]),
            y_range=tuple(d["y_range"]),
            cell_size=float(d["cell_size"]),
            z_range=tuple(d["z_range"]),
            n_z=int(d["n_z"]),
            depth_range=tuple(d["depth_range"]),
            n_depth_bins=int(d["n_depth_bins"]),
        )


@dataclass(frozen=True, eq=False)
class CameraModel:
    intrinsics: np.ndarray
    cam_to_ego: np.ndarray
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        T = np.asarray(self.cam_to_ego, dtype=np.float64)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "cam_to_ego", T)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if K.shape != (3, 3) or K[0, 0] <= 0 or K[1, 1] <= 0 or K[0, 1] != 0:
            raise GeometryError("intrinsics must be a zero-skew pinhole matrix with positive focals")
        _check_rigid(T, "cam_to_ego")
        if min(self.image_size) <= 0:
            raise GeometryError("image_size entries must be positive")

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def key(self) -> bytes:
        return self.intrinsics.tobytes() + self.cam_to_ego.tobytes() + bytes(str(self.image_size), "ascii")


@dataclass(frozen=True, eq=False)
class EgoPose:
    ego_to_global: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        T = np.asarray(self.ego_to_global, dtype=np.float64)
        object.__setattr__(self, "ego_to_global", T)
        _check_rigid(T, "ego_to_global")
        if not np.isfinite(self.timestamp):
            raise GeometryError("timestamp must be finite")

    @classmethod
    def from_xy_yaw(cls, x: float, y: float, yaw: float, timestamp: float = 0.0) -> "EgoPose":
        return cls(rigid_transform(yaw, (x, y, 0.0)), timestamp)


@dataclass(frozen=True, eq=False)
class Frustum:
    points_cam: np.ndarray  # (D, H_feat, W_feat, 3)
    feature_stride: int = field(default=1)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.points_cam.shape[:3]


def rigid_transform(yaw: float, translation: Sequence[float], pitch: float = 0.0) -> np.ndarray:
    """4x4 transform with rotation ``Rz(yaw) @ Ry(pitch)``."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    T = np.eye(4)
    T[:3, :3] = rz @ ry
    T[:3, 3] = translation
    return T


def invert_rigid(T: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    R = T[:3, :3]
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def build_frustum(cam: CameraModel, grid: BevGridSpec, feature_stride: int) -> Frustum:
    """Camera-frame 3D point for every (depth bin, feature pixel) pair."""
    s = int(feature_stride)
    w, h = cam.image_size
    if s <= 0 or w % s or h % s:
        raise GeometryError(f"image size {cam.image_size} not divisible by stride {feature_stride}")
    us = np.arange(w // s) * s + (s - 1) / 2.0
    vs = np.arange(h // s) * s + (s - 1) / 2.0
    uu, vv = np.meshgrid(us, vs)  # (H_feat, W_feat)
    K = cam.intrinsics
    rays = np.stack([(uu - K[0, 2]) / K[0, 0], (vv - K[1, 2]) / K[1, 1], np.ones_like(uu)], axis=-1)
    depths = grid.bin_centers()
    pts = depths[:, None, None, None] * rays[None]
    return Frustum(points_cam=pts, feature_stride=s)


def splat_geometry(frustum: Frustum, cam: CameraModel, grid: BevGridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Flat BEV cell index and in-range mask for every frustum point.

    Both returned arrays are flattened in ``(D, H_feat, W_feat)`` order.
    """
    pts = frustum.points_cam.reshape(-1, 3)
    R, t = cam.cam_to_ego[:3, :3], cam.cam_to_ego[:3, 3]
    ego = pts @ R.T + t
    col, row = grid.point_to_cell(ego[:, 0], ego[:, 1])
    ok = (
        (col >= 0) & (col < grid.W_bev) & (row >= 0) & (row < grid.H_bev)
        & (ego[:, 2] >= grid.z_range[0]) & (ego[:, 2] < grid.z_range[1])
    )
    flat = np.where(ok, row * grid.W_bev + col, 0)
    return flat, ok


def lift_and_splat(
    features: torch.Tensor,
    depth_probs: torch.Tensor,
    frustum: Frustum,
    cam: CameraModel,
    grid: BevGridSpec,
    geometry: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> torch.Tensor:
    """Sum-pool depth-weighted camera features into BEV cells.

    ``features`` is ``(C, H_feat, W_feat)``, ``depth_probs`` is
    ``(D, H_feat, W_feat)``. Returns ``(C, H_bev, W_bev)``.
    """
    D, hf, wf = frustum.shape
    if features.dim() != 3 or tuple(features.shape[1:]) != (hf, wf):
        raise GeometryError(f"features shape {tuple(features.shape)} does not match frustum {(hf, wf)}")
    if tuple(depth_probs.shape) != (D, hf, wf):
        raise GeometryError(f"depth_probs shape {tuple(depth_probs.shape)} does not match frustum {(D, hf, wf)}")
    flat, ok = geometry if geometry is not None else splat_geometry(frustum, cam, grid)
    C = features.shape[0]
    keep = torch.from_numpy(np.flatnonzero(ok))
    idx = torch.from_numpy(flat[ok])
    contrib = depth_probs.reshape(D, 1, hf * wf) * features.reshape(1, C, hf * wf)
    contrib = contrib.permute(1, 0, 2).reshape(C, D * hf * wf)
    out = features.new_zeros(C, grid.H_bev * grid.W_bev)
    out = out.index_add(1, idx, contrib.index_select(1, keep))
    return out.reshape(C, grid.H_bev, grid.W_bev)


def relative_transform(past_pose: EgoPose, current_pose: EgoPose) -> np.ndarray:
    """Maps current-ego coordinates to past-ego coordinates."""
    return invert_rigid(past_pose.ego_to_global) @ current_pose.ego_to_global


def warp_bev(past_bev: torch.Tensor, past_pose: EgoPose, current_pose: EgoPose, grid: BevGridSpec) -> torch.Tensor:
    """Resample a past BEV raster into the current ego frame (bilinear, zero fill)."""
    squeeze = past_bev.dim() == 3
    x = past_bev[None] if squeeze else past_bev
    if tuple(x.shape[-2:]) != (grid.H_bev, grid.W_bev):
        raise GeometryError("BEV raster shape does not match grid")
    T = relative_transform(past_pose, current_pose)
    xs, ys = grid.cell_centers()
    gx, gy = np.meshgrid(xs, ys)
    q = np.stack([gx, gy, np.zeros_like(gx), np.ones_like(gx)], axis=-1) @ T.T
    nx = (q[..., 0] - grid.x_range[0]) / (grid.x_range[1] - grid.x_range[0]) * 2.0 - 1.0
    ny = (q[..., 1] - grid.y_range[0]) / (grid.y_range[1] - grid.y_range[0]) * 2.0 - 1.0
    sample = torch.from_numpy(np.stack([nx, ny], axis=-1)).to(x.dtype)[None].expand(x.shape[0], -1, -1, -1)
    out = F.grid_sample(x, sample, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out[0] if squeeze else out


def temporal_concat(current_bev: torch.Tensor, aligned_history: Sequence[torch.Tensor], t_hist: int) -> torch.Tensor:
    """Channel-stack current raster then history newest-to-oldest, zero-padding to ``t_hist`` slots."""
    if len(aligned_history) > t_hist:
        raise GeometryError(f"{len(aligned_history)} history rasters exceed t_hist={t_hist}")
    spatial = tuple(current_bev.shape[-2:])
    for h in aligned_history:
        if tuple(h.shape[-2:]) != spatial or h.shape[:-2] != current_bev.shape[:-2]:
            raise GeometryError("history raster shape mismatch")
    pads = [torch.zeros_like(current_bev)] * (t_hist - len(aligned_history))
    return torch.cat([current_bev, *aligned_history, *pads], dim=-3)
