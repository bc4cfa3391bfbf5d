"""Camera rigs for the synthetic world."""
from __future__ import annotations

import math

import numpy as np

from quadbev.bevgeom import CameraModel

# camera axes (x right, y down, z forward) expressed in ego axes (x fwd, y left, z up)
CAM_AXES = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def _snap(m: np.ndarray) -> np.ndarray:
    m = m.copy()
    m[np.abs(m) < 1e-12] = 0.0
    return m


def make_camera(
    yaw: float,
    position=(0.0, 0.0, 1.6),
    pitch: float = math.radians(15.0),
    image_size=(128, 64),
    hfov: float = math.radians(90.0),
) -> CameraModel:
    """Pinhole camera looking along ``yaw``, tilted down by ``pitch``."""
    w, h = image_size
    f = (w / 2) / math.tan(hfov / 2)
    K = np.array([[f, 0.0, (w - 1) / 2], [0.0, f, (h - 1) / 2], [0.0, 0.0, 1.0]])
    cy, sy = _snap(np.array([math.cos(yaw)]))[0], _snap(np.array([math.sin(yaw)]))[0]
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    cp, sp = math.cos(pitch), math.sin(pitch)
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    T = np.eye(4)
    T[:3, :3] = _snap(rz @ ry @ CAM_AXES)
    T[:3, 3] = position
    return CameraModel(K, T, (w, h))


def default_rig(image_size=(128, 64), n_cameras: int = 4) -> list[CameraModel]:
    """Evenly spaced surround cameras. Four at desk scale, six at full size."""
    cams = []
    for k in range(n_cameras):
        yaw = 2 * math.pi * k / n_cameras
        if yaw > math.pi:
            yaw -= 2 * math.pi
        offset = 0.5
        pos = (offset * math.cos(yaw), offset * math.sin(yaw), 1.6)
        pos = tuple(float(v) for v in _snap(np.array(pos)))
        hfov = math.radians(90.0 if n_cameras <= 4 else 70.0)
        cams.append(make_camera(yaw, pos, image_size=image_size, hfov=hfov))
    return cams
