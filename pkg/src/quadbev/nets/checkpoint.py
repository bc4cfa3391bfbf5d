"""QBCK checkpoint files: model weights, optimizer state, GradNorm state and RNG state.

Layout: ``"QBCK" | u32 version | u32 stage id | named arrays``. Non-array
metadata (config, optimizer hyperparameters, epoch) travels as a UTF-8 JSON
blob stored in the ``meta/json`` byte array.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from quadbev import arraycodec
from quadbev.nets.model import ModelConfig, QuadBEV

MAGIC = b"QBCK"
VERSION = 1
STAGE_IDS = {"none": 0, "pretrain": 1, "warmup": 2, "e2e": 3}
STAGE_NAMES = {v: k for k, v in STAGE_IDS.items()}


class CheckpointError(RuntimeError):
    pass


@dataclass
class CheckpointBundle:
    model_config: ModelConfig
    state_dict: dict[str, torch.Tensor]
    stage: str = "none"
    epoch: int = 0
    optimizer_state: Optional[dict] = None
    gradnorm_state: Optional[dict] = None
    rng_state: Optional[dict] = None
    meta: dict[str, Any] = field(default_factory=dict)

    def build_model(self) -> QuadBEV:
        model = QuadBEV(self.model_config)
        model.load_state_dict(self.state_dict)
        return model

    @classmethod
    def from_model(cls, model: QuadBEV, **kw) -> "CheckpointBundle":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(model.config, state, **kw)


def _tensor_to_np(t: torch.Tensor) -> np.ndarray:
    t = t.detach().cpu()
    if t.dtype == torch.bool:
        return t.to(torch.uint8).numpy()
    return t.numpy().copy()


def _optimizer_arrays(opt_state: dict) -> tuple[dict[str, np.ndarray], dict]:
    arrays, dtypes = {}, {}
    for idx, st in opt_state["state"].items():
        for k, v in st.items():
            name = f"optim/{idx}/{k}"
            if torch.is_tensor(v):
                arrays[name] = _tensor_to_np(v)
                dtypes[name] = str(v.dtype)
            else:
                arrays[name] = np.array([v], dtype=np.float64)
                dtypes[name] = "python"
    return arrays, {"param_groups": opt_state["param_groups"], "dtypes": dtypes}


def encode_checkpoint(bundle: CheckpointBundle) -> bytes:
    arrays: dict[str, np.ndarray] = {}
    for k, v in bundle.state_dict.items():
        arrays[f"param/{k}"] = _tensor_to_np(v)
    meta = {
        "model_config": bundle.model_config.to_dict(),
        "stage": bundle.stage,
        "epoch": bundle.epoch,
        "meta": bundle.meta,
        "state_dtypes": {k: str(v.dtype) for k, v in bundle.state_dict.items()},
    }
    if bundle.optimizer_state is not None:
        opt_arrays, opt_meta = _optimizer_arrays(bundle.optimizer_state)
        arrays.update(opt_arrays)
        meta["optimizer"] = opt_meta
    if bundle.gradnorm_state is not None:
        gn = dict(bundle.gradnorm_state)
        for key in ("weights", "initial_losses"):
            if gn.get(key) is not None:
                arrays[f"gradnorm/{key}"] = np.asarray(gn.pop(key), dtype=np.float64)
        meta["gradnorm"] = gn
    if bundle.rng_state is not None:
        rng = dict(bundle.rng_state)
        if "torch" in rng:
            arrays["rng/torch"] = _tensor_to_np(rng.pop("torch"))
        meta["rng"] = rng
    arrays["meta/json"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    header = struct.pack("<I", STAGE_IDS[bundle.stage])
    return arraycodec.encode(MAGIC, VERSION, arrays, header=header)


def save_checkpoint(bundle: CheckpointBundle, path) -> str:
    """Write the checkpoint and return its sha256 hex digest."""
    blob = encode_checkpoint(bundle)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_checkpoint(path, expected_hash: Optional[str] = None) -> CheckpointBundle:
    blob = Path(path).read_bytes()
    if expected_hash is not None and hashlib.sha256(blob).hexdigest() != expected_hash:
        raise CheckpointError(f"{path}: hash does not match the recorded value")
    f = io.BytesIO(blob)
    try:
        arraycodec.read_header(f, MAGIC, VERSION)
        stage_id = arraycodec.read_u32(f, "stage id")
        arrays = arraycodec.decode_arrays(f)
    except arraycodec.RecordError as e:
        raise CheckpointError(f"{path}: {e}") from e
    meta = json.loads(arrays.pop("meta/json").tobytes().decode("utf-8"))
    if STAGE_NAMES.get(stage_id) != meta["stage"]:
        raise CheckpointError(f"{path}: header stage id {stage_id} disagrees with metadata")

    def to_tensor(a: np.ndarray, dtype: str) -> torch.Tensor:
        t = torch.from_numpy(a.copy())
        return t.to(torch.bool) if dtype == "torch.bool" else t

    state = {k[len("param/"):]: to_tensor(v, meta["state_dtypes"][k[len("param/"):]])
             for k, v in arrays.items() if k.startswith("param/")}
    opt_state = None
    if "optimizer" in meta:
        st: dict[int, dict] = {}
        for name, dt in meta["optimizer"]["dtypes"].items():
            _, idx, key = name.split("/", 2)
            v = arrays[name]
            st.setdefault(int(idx), {})[key] = float(v[0]) if dt == "python" else torch.from_numpy(v.copy())
        opt_state = {"state": st, "param_groups": meta["optimizer"]["param_groups"]}
    gn = None
    if "gradnorm" in meta:
        gn = dict(meta["gradnorm"])
        for key in ("weights", "initial_losses"):
            if f"gradnorm/{key}" in arrays:
                gn[key] = arrays[f"gradnorm/{key}"]
    rng = None
    if "rng" in meta:
        rng = dict(meta["rng"])
        if "rng/torch" in arrays:
            rng["torch"] = torch.from_numpy(arrays["rng/torch"].copy())
    return CheckpointBundle(
        model_config=ModelConfig.from_dict(meta["model_config"]),
        state_dict=state,
        stage=meta["stage"],
        epoch=meta["epoch"],
        optimizer_state=opt_state,
        gradnorm_state=gn,
        rng_state=rng,
        meta=meta.get("meta", {}),
    )
