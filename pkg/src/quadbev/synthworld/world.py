"""Procedural scene layout: road strips, lane lines, static boxes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from quadbev.bevgeom import EgoPose, rigid_transform

DET_CATEGORIES = ("car", "pedestrian", "barrier")
MAP_CATEGORIES = ("drivable", "walkway", "divider")
LANE_CATEGORIES = ("solid", "dashed")
GROUND = len(DET_CATEGORIES)
FREE = GROUND + 1
OCC_CATEGORIES = DET_CATEGORIES + ("ground", "free")

# nominal (w, l, h) per detection category
BOX_SIZES = {0: (1.9, 4.4, 1.6), 1: (0.8, 0.8, 1.8), 2: (0.6, 2.0, 1.0)}


class GenerationError(RuntimeError):
    pass


def wrap_angle(a):
    """Wrap into [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # (w, l, h); l runs along the heading
    yaw: float
    category: int

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError("box size entries must be positive")
        if not -math.pi <= self.yaw < math.pi:
            raise ValueError(f"yaw {self.yaw} outside [-pi, pi)")

    def bev_corners(self) -> np.ndarray:
        w, l, _ = self.size
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[l, w], [l, -w], [-l, -w], [-l, w]]) / 2.0
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center[:2])

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Boolean mask of 3D points (..., 3) inside the box."""
        d = np.asarray(pts, dtype=np.float64) - np.array(self.center)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        lx = c * d[..., 0] + s * d[..., 1]
        ly = -s * d[..., 0] + c * d[..., 1]
        w, l, h = self.size
        return (np.abs(lx) <= l / 2) & (np.abs(ly) <= w / 2) & (np.abs(d[..., 2]) <= h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.yaw, self.category], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box3D":
        a = [float(v) for v in a]
        return cls(tuple(a[0:3]), tuple(a[3:6]), a[6], int(a[7]))


@dataclass(frozen=True, eq=False)
class LanePolyline:
    points: np.ndarray  # (P, 2)
    category: int
    instance_id: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError("lane needs at least two 2-D points")
        if np.any(np.all(np.diff(pts, axis=0) == 0, axis=1)):
            raise ValueError("consecutive lane points must be distinct")


@dataclass(frozen=True, eq=False)
class MapRegion:
    """Convex region: all half-planes ``a*x + b*y + c > 0`` hold."""

    halfplanes: np.ndarray  # (k, 3)

    def contains(self, x, y) -> np.ndarray:
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        inside = np.ones(np.broadcast(x, y).shape, dtype=bool)
        for a, b, c in self.halfplanes:
            inside &= a * x + b * y + c > 0
        return inside


@dataclass(frozen=True, eq=False)
class World:
    boxes: list[Box3D]
    lanes: list[LanePolyline]
    map_layers: list[list[MapRegion]]  # indexed by map category
    ground_elevation: float = 0.0
    ego_speed: float = 0.0
    ego_yaw_rate: float = 0.0

    def map_contains(self, category: int, x, y) -> np.ndarray:
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        out = np.zeros(np.broadcast(x, y).shape, dtype=bool)
        for region in self.map_layers[category]:
            out |= region.contains(x, y)
        return out

    def ego_pose(self, frame_index: int, dt: float = 0.5) -> EgoPose:
        t = frame_index * dt
        v, w = self.ego_speed, self.ego_yaw_rate
        if abs(w) < 1e-9:
            x, y = v * t, 0.0
        else:
            x, y = v / w * math.sin(w * t), v / w * (1.0 - math.cos(w * t))
        return EgoPose(rigid_transform(w * t, (x, y, 0.0)), t)

    def transformed(self, T: np.ndarray) -> "World":
        """Copy of the world with geometry mapped through the rigid transform ``T``."""
        R2, t2 = T[:2, :2], T[:2, 3]
        dyaw = math.atan2(T[1, 0], T[0, 0])
        boxes = []
        for b in self.boxes:
            c = T @ np.array([*b.center, 1.0])
            boxes.append(replace(b, center=tuple(float(v) for v in c[:3]), yaw=float(wrap_angle(b.yaw + dyaw))))
        lanes = [LanePolyline(l.points @ R2.T + t2, l.category, l.instance_id) for l in self.lanes]
        # a.(R q + t) + c  ->  (R^T a).q + (a.t + c)
        layers = []
        for regions in self.map_layers:
            new = []
            for r in regions:
                ab = r.halfplanes[:, :2]
                hp = np.column_stack([ab @ R2, ab @ t2 + r.halfplanes[:, 2]])
                new.append(MapRegion(hp))
            layers.append(new)
        return World(boxes, lanes, layers, self.ground_elevation, self.ego_speed, self.ego_yaw_rate)

    def to_ego(self, pose: EgoPose) -> "World":
        from quadbev.bevgeom import invert_rigid

        return self.transformed(invert_rigid(pose.ego_to_global))


@dataclass(frozen=True)
class GenSpec:
    x_range: tuple[float, float] = (-16.0, 16.0)
    y_range: tuple[float, float] = (-16.0, 16.0)
    n_boxes: int = 6
    n_lanes: int = 3
    category_probs: tuple[float, ...] = (0.5, 0.25, 0.25)
    road_half_width: tuple[float, float] = (3.5, 5.5)
    walkway_width: tuple[float, float] = (2.0, 3.5)
    divider_half_width: float = 0.5
    road_heading: tuple[float, float] = (-0.3, 0.3)
    road_offset: tuple[float, float] = (-1.5, 1.5)
    ego_speed: tuple[float, float] = (0.0, 3.0)
    ego_yaw_rate: tuple[float, float] = (-0.15, 0.15)
    n_frames: int = 4
    margin: float = 1.0
    box_gap: float = 0.3
    ego_clearance: float = 2.0
    max_retries: int = 200

    def __post_init__(self):
        for name in ("road_half_width", "walkway_width", "road_heading", "road_offset", "ego_speed", "ego_yaw_rate"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"empty range for {name}")
        if self.n_boxes < 0 or self.n_lanes < 0:
            raise ValueError("counts must be nonnegative")


def _f32(v: float) -> float:
    return float(np.float32(v))


def _strip(p0, normal, lo, hi) -> MapRegion:
    """Region ``lo < n.(p - p0) < hi``."""
    nx, ny = normal
    off = nx * p0[0] + ny * p0[1]
    return MapRegion(np.array([[nx, ny, -off - lo], [-nx, -ny, off + hi]], dtype=np.float64))


def _clip_line(p0, u, xr, yr, eps=1e-6):
    """Parameter interval of ``p0 + t*u`` inside the open rectangle (Liang-Barsky)."""
    t0, t1 = -np.inf, np.inf
    for k, (lo, hi) in enumerate((xr, yr)):
        lo, hi = lo + eps, hi - eps
        if abs(u[k]) < 1e-12:
            if not lo <= p0[k] <= hi:
                return None
            continue
        a, b = (lo - p0[k]) / u[k], (hi - p0[k]) / u[k]
        t0, t1 = max(t0, min(a, b)), min(t1, max(a, b))
    return (t0, t1) if t1 > t0 else None


def _sat_overlap(ca: np.ndarray, cb: np.ndarray) -> bool:
    """Separating-axis test for two convex quads (corner arrays)."""
    for poly in (ca, cb):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = ca @ axis, cb @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


def _point_segment_dist(p, a, b) -> float:
    ab = b - a
    t = 0.0 if not ab.any() else float(np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0))
    return float(np.linalg.norm(p - (a + t * ab)))


def generate_world(seed: int, spec: GenSpec = GenSpec()) -> World:
    """Deterministic random scene in the frame of the sequence's first ego pose."""
    rng = np.random.default_rng(seed)
    half_w = _f32(rng.uniform(*spec.road_half_width))
    walk_w = _f32(rng.uniform(*spec.walkway_width))
    heading = _f32(rng.uniform(*spec.road_heading))
    offset = _f32(rng.uniform(*spec.road_offset))
    speed = _f32(rng.uniform(*spec.ego_speed))
    yaw_rate = _f32(rng.uniform(*spec.ego_yaw_rate))

    u = np.array([math.cos(heading), math.sin(heading)])
    n = np.array([-u[1], u[0]])
    p0 = np.array([0.0, offset])

    drivable = [_strip(p0, n, -half_w, half_w)]
    walkway = [_strip(p0, n, half_w, half_w + walk_w), _strip(p0, n, -half_w - walk_w, -half_w)]
    divider = [_strip(p0, n, -spec.divider_half_width, spec.divider_half_width)]
    layers = [drivable, walkway, divider]

    lanes = []
    if spec.n_lanes:
        inner = half_w - 0.3
        offsets = [0.0] if spec.n_lanes == 1 else np.linspace(-inner, inner, spec.n_lanes)
        for i, s in enumerate(offsets):
            start = p0 + s * n
            span = _clip_line(start, u, spec.x_range, spec.y_range)
            if span is None:
                continue
            ts = np.linspace(span[0], span[1], max(2, int((span[1] - span[0]) // 4.0) + 2))
            pts = (start[None] + ts[:, None] * u[None]).astype(np.float32).astype(np.float64)
            outer = i in (0, len(offsets) - 1)
            lanes.append(LanePolyline(pts, 0 if outer else 1, i))

    probe = World([], [], layers, 0.0, speed, yaw_rate)
    path = [probe.ego_pose(k).ego_to_global[:2, 3] for k in range(spec.n_frames)]

    boxes: list[Box3D] = []
    corners: list[np.ndarray] = []
    probs = np.asarray(spec.category_probs, dtype=np.float64)
    probs = probs / probs.sum()
    for _ in range(spec.n_boxes):
        for _attempt in range(spec.max_retries):
            cat = int(rng.choice(len(probs), p=probs))
            base = np.array(BOX_SIZES[cat])
            size = tuple(_f32(v) for v in base * rng.uniform(0.9, 1.1, size=3))
            cx = rng.uniform(spec.x_range[0] + spec.margin, spec.x_range[1] - spec.margin)
            cy = rng.uniform(spec.y_range[0] + spec.margin, spec.y_range[1] - spec.margin)
            if cat == 0:
                if not probe.map_contains(0, cx, cy):
                    continue
                yaw = heading + (math.pi if rng.random() < 0.5 else 0.0) + rng.normal(0.0, 0.1)
            else:
                if cat == 1 and not probe.map_contains(1, cx, cy):
                    continue
                yaw = rng.uniform(-math.pi, math.pi)
            yaw = _f32(float(wrap_angle(yaw)))
            if yaw >= math.pi:
                yaw = _f32(-math.pi)
            box = Box3D((_f32(cx), _f32(cy), _f32(size[2] / 2)), size, yaw, cat)
            bc = box.bev_corners()
            lo = np.array([spec.x_range[0], spec.y_range[0]]) + 0.5
            hi = np.array([spec.x_range[1], spec.y_range[1]]) - 0.5
            if (bc < lo).any() or (bc > hi).any():
                continue
            reach = max(size[0], size[1]) / 2 + spec.ego_clearance
            centre = np.array([cx, cy])
            if any(_point_segment_dist(centre, path[k], path[k + 1]) < reach for k in range(len(path) - 1)):
                continue
            if np.linalg.norm(centre - path[0]) < reach:
                continue
            grown = Box3D(box.center, (size[0] + spec.box_gap, size[1] + spec.box_gap, size[2]), yaw, cat).bev_corners()
            if any(_sat_overlap(grown, c) for c in corners):
                continue
            if any(np.linalg.norm(centre - np.array(b.center[:2])) < 1.0 for b in boxes):
                continue
            boxes.append(box)
            corners.append(bc)
            break
        else:
            raise GenerationError(f"box placement failed after {spec.max_retries} retries (seed={seed})")
    return World(boxes, lanes, layers, 0.0, speed, yaw_rate)
