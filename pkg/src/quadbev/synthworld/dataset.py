"""Dataset directory: a JSON ``manifest`` plus one ``seq<S>_frame<F>.qbev`` record per sample."""
from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from quadbev import arraycodec
from quadbev.arraycodec import BadMagicError, RecordError, TruncatedRecordError, VersionMismatchError
from quadbev.bevgeom import BevGridSpec, CameraModel, EgoPose
from quadbev.synthworld.rasterize import GtRasters, rasterize_gt
from quadbev.synthworld.render import Sample, render_sample
from quadbev.synthworld.rig import default_rig
from quadbev.synthworld.world import (
    DET_CATEGORIES,
    LANE_CATEGORIES,
    MAP_CATEGORIES,
    OCC_CATEGORIES,
    Box3D,
    GenSpec,
    LanePolyline,
    MapRegion,
    World,
    generate_world,
)

log = logging.getLogger(__name__)

MAGIC = b"QBEV"
FORMAT_VERSION = 1
MANIFEST = "manifest"


class DatasetError(RuntimeError):
    pass


class CountMismatchError(DatasetError):
    pass


class CorruptRecordError(DatasetError):
    def __init__(self, record: str, cause: Exception):
        super().__init__(f"{record}: {cause}")
        self.record = record
        self.cause = cause


class DatasetVersionError(DatasetError):
    pass


def record_name(sequence_id: int, frame_index: int) -> str:
    return f"seq{sequence_id}_frame{frame_index}.qbev"


def camera_to_dict(cam: CameraModel) -> dict:
    return {"intrinsics": cam.intrinsics.tolist(), "cam_to_ego": cam.cam_to_ego.tolist(), "image_size": list(cam.image_size)}


def camera_from_dict(d: dict) -> CameraModel:
    return CameraModel(np.array(d["intrinsics"]), np.array(d["cam_to_ego"]), tuple(d["image_size"]))


def _world_arrays(world: World) -> dict[str, np.ndarray]:
    boxes = np.array([b.as_array() for b in world.boxes], dtype=np.float64).reshape(-1, 8)
    lane_pts = np.concatenate([l.points for l in world.lanes]) if world.lanes else np.zeros((0, 2))
    lane_meta = np.array([[len(l.points), l.category, l.instance_id] for l in world.lanes], dtype=np.int32).reshape(-1, 3)
    regions = []
    for cat, regs in enumerate(world.map_layers):
        for rid, r in enumerate(regs):
            for hp in r.halfplanes:
                regions.append([cat, rid, *hp])
    return {
        "world/boxes": boxes,
        "world/lane_points": lane_pts.astype(np.float64),
        "world/lane_meta": lane_meta,
        "world/regions": np.array(regions, dtype=np.float64).reshape(-1, 5),
        "world/scalars": np.array([world.ground_elevation, world.ego_speed, world.ego_yaw_rate], dtype=np.float64),
    }


def _world_from_arrays(a: dict[str, np.ndarray], n_map: int) -> World:
    boxes = [Box3D.from_array(row) for row in a["world/boxes"]]
    lanes, start = [], 0
    for n, cat, iid in a["world/lane_meta"]:
        lanes.append(LanePolyline(a["world/lane_points"][start:start + n], int(cat), int(iid)))
        start += n
    layers: list[list[MapRegion]] = [[] for _ in range(n_map)]
    regs = a["world/regions"]
    for cat in range(n_map):
        rows = regs[regs[:, 0] == cat]
        for rid in np.unique(rows[:, 1]):
            layers[cat].append(MapRegion(rows[rows[:, 1] == rid][:, 2:].copy()))
    g, v, w = a["world/scalars"]
    return World(boxes, lanes, layers, float(g), float(v), float(w))


def sample_to_arrays(sample: Sample, gt: GtRasters) -> dict[str, np.ndarray]:
    arrays = {
        "images": sample.images.astype(np.float32, copy=False),
        "depth_gt": sample.depth_gt.astype(np.float32, copy=False),
        "cam/intrinsics": np.stack([c.intrinsics for c in sample.cameras]),
        "cam/cam_to_ego": np.stack([c.cam_to_ego for c in sample.cameras]),
        "cam/image_size": np.array([c.image_size for c in sample.cameras], dtype=np.int32),
        "ego/ego_to_global": sample.ego_pose.ego_to_global,
        "ego/timestamp": np.array([sample.ego_pose.timestamp], dtype=np.float64),
        "ids": np.array([sample.sequence_id, sample.frame_index], dtype=np.int32),
    }
    arrays.update(_world_arrays(sample.world_ref))
    for name, arr in gt.arrays().items():
        arrays[f"gt/{name}"] = arr
    return arrays


def arrays_to_sample(a: dict[str, np.ndarray]) -> tuple[Sample, GtRasters]:
    cams = [CameraModel(K, T, tuple(int(v) for v in s)) for K, T, s in zip(a["cam/intrinsics"], a["cam/cam_to_ego"], a["cam/image_size"])]
    pose = EgoPose(a["ego/ego_to_global"], float(a["ego/timestamp"][0]))
    world = _world_from_arrays(a, len(MAP_CATEGORIES))
    sample = Sample(a["images"], a["depth_gt"], cams, pose, world, int(a["ids"][0]), int(a["ids"][1]))
    gt = GtRasters(**{k[3:]: v for k, v in a.items() if k.startswith("gt/")})
    return sample, gt


def encode_record(sample: Sample, gt: GtRasters) -> bytes:
    return arraycodec.encode(MAGIC, FORMAT_VERSION, sample_to_arrays(sample, gt))


def read_record(path: Path) -> tuple[Sample, GtRasters]:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            arrays = arraycodec.decode(f, MAGIC, FORMAT_VERSION)
            if f.read(1):
                raise RecordError("trailing bytes after last array")
    except VersionMismatchError as e:
        raise DatasetVersionError(f"{path.name}: {e}") from e
    except (BadMagicError, TruncatedRecordError, RecordError) as e:
        raise CorruptRecordError(path.name, e) from e
    return arrays_to_sample(arrays)


def write_dataset(records: Iterable[tuple[Sample, GtRasters]], path, grid: BevGridSpec, feature_stride: int,
                  extra: dict | None = None) -> dict:
    """Write records and a manifest; returns the manifest dict."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    rig = None
    digest = hashlib.sha256()
    for sample, gt in sorted(records, key=lambda r: (r[0].sequence_id, r[0].frame_index)):
        name = record_name(sample.sequence_id, sample.frame_index)
        blob = encode_record(sample, gt)
        (root / name).write_bytes(blob)
        digest.update(hashlib.sha256(blob).digest())
        entries.append({"file": name, "sequence_id": sample.sequence_id, "frame_index": sample.frame_index,
                        "timestamp": sample.ego_pose.timestamp})
        if rig is None:
            rig = [camera_to_dict(c) for c in sample.cameras]
    manifest = {
        "format": "QBEV",
        "format_version": FORMAT_VERSION,
        "grid": grid.to_dict(),
        "feature_stride": feature_stride,
        "rig": rig or [],
        "categories": {"det": DET_CATEGORIES, "map": MAP_CATEGORIES, "lane": LANE_CATEGORIES, "occ": OCC_CATEGORIES},
        "n_samples": len(entries),
        "n_sequences": len({e["sequence_id"] for e in entries}),
        "records": entries,
        "records_sha256": digest.hexdigest(),
    }
    if extra:
        manifest.update(extra)
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return manifest


def read_manifest(path) -> dict:
    root = Path(path)
    mf = root / MANIFEST
    if not mf.exists():
        raise DatasetError(f"no manifest in {root}")
    manifest = json.loads(mf.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetVersionError(f"manifest format version {manifest.get('format_version')}, expected {FORMAT_VERSION}")
    present = sorted(p.name for p in root.glob("*.qbev"))
    if len(present) != manifest["n_samples"] or len(manifest["records"]) != manifest["n_samples"]:
        raise CountMismatchError(f"manifest lists {manifest['n_samples']} records, directory has {len(present)}")
    return manifest


def read_dataset(path) -> Iterator[tuple[Sample, GtRasters]]:
    """Yield (Sample, GtRasters) grouped by sequence with ascending frame index."""
    root = Path(path)
    manifest = read_manifest(root)
    for entry in sorted(manifest["records"], key=lambda e: (e["sequence_id"], e["frame_index"])):
        yield read_record(root / entry["file"])


def dataset_hash(path) -> str:
    return read_manifest(path)["records_sha256"]


def generate_samples(seed: int, n_sequences: int, frames_per_sequence: int = 4, spec: GenSpec | None = None,
                     cameras: list[CameraModel] | None = None, grid: BevGridSpec | None = None,
                     feature_stride: int = 8) -> list[tuple[Sample, GtRasters]]:
    """Render ``n_sequences`` sequences of 2 Hz frames with full ground truth."""
    grid = grid or BevGridSpec()
    spec = spec or GenSpec(x_range=grid.x_range, y_range=grid.y_range, n_frames=frames_per_sequence)
    cameras = cameras or default_rig()
    out = []
    for s in range(n_sequences):
        world = generate_world(seed * 100003 + s, spec)
        for k in range(frames_per_sequence):
            pose = world.ego_pose(k)
            pose = EgoPose(pose.ego_to_global, pose.timestamp)
            sample = render_sample(world, cameras, pose, grid, sequence_id=s, frame_index=k)
            gt = rasterize_gt(sample.world_ref, grid, cameras, sample.depth_gt, feature_stride)
            out.append((sample, gt))
        log.debug("rendered sequence %d", s)
    return out


def gen_spec_dict(spec: GenSpec) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}
