"""Three-phase progressive training: map pretraining, rotating head warm-up, end-to-end with GradNorm."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from quadbev import losses
from quadbev.bevgeom import BevGridSpec
from quadbev.nets.checkpoint import CheckpointBundle, file_hash, load_checkpoint, save_checkpoint
from quadbev.nets.model import (
    EXTRACTOR_GROUPS,
    HEAD_OF,
    PARAMETRIC_GROUPS,
    TASKS,
    FrameInput,
    ModelConfig,
    ModuleGroup,
    QuadBEV,
)

log = logging.getLogger(__name__)

STAGES = ("pretrain", "warmup", "e2e")
ABLATIONS = ("baseline", "map-pretrain", "warm-up", "backbone-finetune", "high-lane-weights", "gradient-weighting")


class TrainingError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage


# ---------------------------------------------------------------------- configs


@dataclass(frozen=True)
class StageConfig:
    stage: str
    base_lr: float
    epochs: int
    weight_decay: float = 1e-2
    aux_lr: Optional[float] = None  # warmup only
    backbone_lr: Optional[float] = None  # e2e only; None = base_lr
    frozen: tuple[str, ...] = ()
    rotation: tuple[str, ...] = ()
    tasks: tuple[str, ...] = TASKS
    depth_supervision: bool = True
    gradnorm_enabled: bool = False
    gradnorm_interval: int = 1
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = 0.025
    gradnorm_include_depth: bool = True
    loss_weights: tuple[float, float, float, float, float] = (1.0, 1.0, 1.0, 1.0, 1.0)
    batch_size: int = 2
    grad_clip: float = 35.0
    select_best: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        for g in self.frozen:
            ModuleGroup(g)
        for t in (*self.rotation, *self.tasks):
            if t not in TASKS:
                raise ValueError(f"unknown task {t!r}")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "StageConfig":
        kv = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
        out = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            v = kv[f.name]
            default = f.default
            if f.name in ("frozen", "rotation", "tasks"):
                out[f.name] = tuple(x for x in v.split(",") if x)
            elif f.name == "loss_weights":
                out[f.name] = tuple(float(x) for x in v.split(","))
            elif v == "None":
                out[f.name] = None
            elif isinstance(default, bool):
                out[f.name] = v.lower() in ("1", "true", "yes")
            elif isinstance(default, int) and f.name not in ("base_lr",):
                out[f.name] = int(v)
            elif f.name == "stage":
                out[f.name] = v
            else:
                out[f.name] = float(v)
        unknown = set(kv) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown stage config keys {sorted(unknown)}")
        return cls(**out)


@dataclass(frozen=True)
class ScheduleConfig:
    name: str
    stages: tuple[StageConfig, ...]
    model: ModelConfig = field(default_factory=ModelConfig)

    def describe(self) -> dict:
        return {"name": self.name, "model": self.model.to_dict(), "stages": [asdict(s) for s in self.stages]}

    def with_seed(self, seed: int) -> "ScheduleConfig":
        return replace(self, stages=tuple(replace(s, seed=seed) for s in self.stages), model=replace(self.model, seed=seed))

    def subset(self, stage_numbers: Sequence[int]) -> "ScheduleConfig":
        keep = [s for s in self.stages if STAGES.index(s.stage) + 1 in stage_numbers]
        return replace(self, stages=tuple(keep))


WARMUP_FROZEN = tuple(g.value for g in EXTRACTOR_GROUPS)
PRETRAIN_FROZEN = ("head_det", "head_lane", "head_occ")


def _schedule(name, model, batch, seed, lrs, epochs, *, pretrain=True, warmup=True, backbone_ratio=0.1,
              gradnorm=True, weights=(1.0, 1.0, 1.0, 1.0, 1.0)) -> ScheduleConfig:
    (lr1, wd), (lr2, aux2), lr3 = lrs
    e1, e2, e3 = epochs
    stages = []
    if pretrain:
        stages.append(StageConfig("pretrain", lr1, e1, weight_decay=wd, frozen=PRETRAIN_FROZEN, tasks=("map",),
                                  batch_size=batch, seed=seed))
    if warmup:
        stages.append(StageConfig("warmup", lr2, e2, weight_decay=wd, aux_lr=aux2, frozen=WARMUP_FROZEN,
                                  rotation=TASKS, batch_size=batch, seed=seed))
    stages.append(StageConfig("e2e", lr3, e3, weight_decay=wd, backbone_lr=lr3 * backbone_ratio,
                              gradnorm_enabled=gradnorm, loss_weights=weights, batch_size=batch, seed=seed))
    return ScheduleConfig(name, tuple(stages), replace(model, seed=seed))


def paper_schedule(seed: int = 0) -> ScheduleConfig:
    """Published hyperparameters: AdamW, batch 8, 704x256 input."""
    model = ModelConfig(image_size=(704, 256), n_cameras=6)
    return _schedule("paper", model, 8, seed, ((1e-4, 1e-2), (2e-4, 2e-5), 1e-4), (20, 10, 10))


DESK_LRS = ((2e-3, 1e-2), (4e-3, 4e-4), 2e-3)
DESK_EPOCHS = (8, 4, 8)


def desk_schedule(seed: int = 0) -> ScheduleConfig:
    return _schedule("desk", ModelConfig(), 2, seed, DESK_LRS, DESK_EPOCHS)


def ablation_schedule(name: str, seed: int = 0) -> ScheduleConfig:
    """One configuration per loss-profile ablation panel, built on the desk preset."""
    m = ModelConfig()
    kw = dict(batch=2, seed=seed, lrs=DESK_LRS, epochs=DESK_EPOCHS)
    if name == "baseline":
        return _schedule(name, m, pretrain=False, warmup=False, backbone_ratio=1.0, gradnorm=False, **kw)
    if name == "map-pretrain":
        return _schedule(name, m, warmup=False, backbone_ratio=1.0, gradnorm=False, **kw)
    if name == "warm-up":
        return _schedule(name, m, backbone_ratio=1.0, gradnorm=False, **kw)
    if name == "backbone-finetune":
        return _schedule(name, m, gradnorm=False, **kw)
    if name == "high-lane-weights":
        return _schedule(name, m, gradnorm=False, weights=(1.0, 1.0, 4.0, 1.0, 1.0), **kw)
    if name == "gradient-weighting":
        return _schedule(name, m, **kw)
    raise ValueError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")


def single_task_schedule(task: str, seed: int = 0) -> ScheduleConfig:
    """Single-task baseline: extractor plus one head trained from scratch."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    e3 = sum(DESK_EPOCHS)  # same sample budget as the full schedule
    stage = StageConfig("e2e", DESK_LRS[2], e3, backbone_lr=DESK_LRS[2], tasks=(task,), batch_size=2, seed=seed,
                        frozen=tuple(HEAD_OF[t].value for t in TASKS if t != task))
    return ScheduleConfig(f"single:{task}", (stage,), replace(ModelConfig(), seed=seed))


def resolve_preset(preset: str, seed: int = 0) -> ScheduleConfig:
    if preset == "paper":
        return paper_schedule(seed)
    if preset == "desk":
        return desk_schedule(seed)
    if preset.startswith("ablation:"):
        return ablation_schedule(preset.split(":", 1)[1], seed)
    if preset.startswith("single:"):
        return single_task_schedule(preset.split(":", 1)[1], seed)
    raise ValueError(f"unknown preset {preset!r}")


# ---------------------------------------------------------------------- data


class FrameStore:
    """Indexable view over (Sample, GtRasters) records with per-sequence temporal history."""

    def __init__(self, records, t_hist: int = 3, grid: Optional[BevGridSpec] = None):
        self.records = list(records)
        self.t_hist = t_hist
        self.grid = grid or BevGridSpec()
        self._pos = {(s.sequence_id, s.frame_index): i for i, (s, _) in enumerate(self.records)}
        self._images: dict[int, torch.Tensor] = {}

    def __len__(self):
        return len(self.records)

    def _img(self, i: int) -> torch.Tensor:
        if i not in self._images:
            self._images[i] = torch.from_numpy(np.ascontiguousarray(self.records[i][0].images))
        return self._images[i]

    def frame_input(self, i: int) -> FrameInput:
        s = self.records[i][0]
        hist = []
        for k in range(1, self.t_hist + 1):
            j = self._pos.get((s.sequence_id, s.frame_index - k))
            if j is None:
                break
            p = self.records[j][0]
            hist.append(FrameInput(self._img(j), p.cameras, p.ego_pose))
        return FrameInput(self._img(i), s.cameras, s.ego_pose, hist)

    def gt_batch(self, idx: Sequence[int]) -> dict[str, torch.Tensor]:
        gts = [self.records[i][1] for i in idx]
        out = {}
        for k in gts[0].arrays():
            t = torch.from_numpy(np.stack([getattr(g, k) for g in gts]))
            out[k] = t.long() if t.dtype == torch.int32 else t
        return out

    def batch(self, idx: Sequence[int]):
        return [self.frame_input(i) for i in idx], self.gt_batch(idx)

    def epoch_batches(self, batch_size: int, seed: int, stage: str, epoch: int) -> list[list[int]]:
        rng = np.random.default_rng([seed, STAGES.index(stage), epoch])
        order = rng.permutation(len(self.records)).tolist()
        return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


# ---------------------------------------------------------------------- training


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    slot: Optional[str] = None
    best_score: dict[str, float] = field(default_factory=dict)
    gradnorm: Optional[losses.GradNormState] = None


@dataclass
class StageResult:
    bundle: CheckpointBundle
    reports: list[losses.LossReport]
    lr_log: list[dict]
    best_score: float
    best_epoch: int


def group_checksums(model: QuadBEV) -> dict[str, str]:
    import hashlib
    out = {}
    for g in PARAMETRIC_GROUPS:
        h = hashlib.sha256()
        for p in model.group_parameters(g):
            h.update(p.detach().cpu().numpy().tobytes())
        for name, b in model.group(g).named_buffers():
            h.update(b.detach().cpu().numpy().tobytes())
        out[g.value] = h.hexdigest()
    return out


def _make_optimizer(model: QuadBEV, cfg: StageConfig) -> torch.optim.AdamW:
    frozen = {ModuleGroup(g) for g in cfg.frozen}
    param_groups = []
    for g in PARAMETRIC_GROUPS:
        params = model.group_parameters(g)
        trainable = g not in frozen
        for p in params:
            p.requires_grad_(trainable)
        if not trainable:
            continue
        lr = cfg.base_lr
        if g == ModuleGroup.backbone and cfg.stage == "e2e" and cfg.backbone_lr is not None:
            lr = cfg.backbone_lr
        param_groups.append({"params": params, "lr": lr, "weight_decay": cfg.weight_decay, "group": g.value})
    if not param_groups:
        raise TrainingError(cfg.stage, "every parameter group is frozen")
    return torch.optim.AdamW(param_groups, lr=cfg.base_lr, weight_decay=cfg.weight_decay)


def set_rotation_lrs(opt: torch.optim.Optimizer, cfg: StageConfig, primary: str) -> None:
    aux = cfg.aux_lr if cfg.aux_lr is not None else cfg.base_lr / 10
    for pg in opt.param_groups:
        pg["lr"] = cfg.base_lr if pg["group"] == HEAD_OF[primary].value else aux


def _rng_state() -> dict:
    return {"torch": torch.get_rng_state()}


def run_stage(model: QuadBEV, store: FrameStore, cfg: StageConfig, val_store: Optional[FrameStore] = None,
              step0: int = 0, on_step: Optional[Callable[[dict], None]] = None,
              history_grad: bool = False) -> StageResult:
    """Train one stage in place and return the best-scoring weights for it."""
    from quadbev import evalkit

    if len(store) == 0:
        raise TrainingError(cfg.stage, "dataset is empty")
    torch.manual_seed(cfg.seed * 7919 + STAGES.index(cfg.stage))
    opt = _make_optimizer(model, cfg)
    frozen = [ModuleGroup(g) for g in cfg.frozen]
    extractor_frozen = all(g in frozen for g in EXTRACTOR_GROUPS)
    gn: Optional[losses.GradNormState] = None
    if cfg.gradnorm_enabled:
        gn = losses.GradNormState(weights=np.ones(5), alpha=cfg.gradnorm_alpha, lr=cfg.gradnorm_lr,
                                  include_depth=cfg.gradnorm_include_depth)
    weights = np.asarray(cfg.loss_weights, dtype=np.float64)
    if cfg.stage == "warmup":
        slots = [(t, e) for t in cfg.rotation for e in range(cfg.epochs)]
    else:
        slots = [(None, e) for e in range(cfg.epochs)]

    reports, lr_log = [], []
    best_score, best_epoch, best_state = -math.inf, -1, None
    step = step0
    for epoch, (slot, _) in enumerate(slots):
        if slot is not None:
            set_rotation_lrs(opt, cfg, slot)
        model.set_group_mode(frozen)
        for idx in store.epoch_batches(cfg.batch_size, cfg.seed, cfg.stage, epoch):
            frames, gt = store.batch(idx)
            if extractor_frozen:
                with torch.no_grad():
                    shared, depth = model.extract_bev(frames)
            else:
                shared, depth = model.extract_bev(frames, history_grad=history_grad)
            out = model.forward_heads(shared, depth, cfg.tasks)
            tasks = cfg.tasks + (("depth",) if cfg.depth_supervision else ())
            parts = losses.task_losses(out, gt, tasks)
            w = gn.weights if gn is not None else weights
            rep = losses.combine(parts, w, step=step)
            rep.stage = cfg.stage
            if gn is not None and (step - step0) % cfg.gradnorm_interval == 0:
                G = losses.shared_grad_norms(parts, w, model.shared_reference)
                rep.grad_norms = {c: float(G[i]) for i, c in enumerate(losses.COMPONENTS)}
            opt.zero_grad(set_to_none=True)
            if rep.total.requires_grad:
                rep.total.backward()
                params = [p for pg in opt.param_groups for p in pg["params"]]
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
            lr_log.append({"step": step, "stage": cfg.stage, "slot": slot,
                           **{pg["group"]: pg["lr"] for pg in opt.param_groups}})
            if gn is not None and rep.grad_norms:
                L = [rep.losses.get(c, 0.0) for c in losses.COMPONENTS]
                G = [rep.grad_norms[c] for c in losses.COMPONENTS]
                gn = losses.gradnorm_update(gn, L, G)
                rep.warnings = list(gn.warnings)
            rep.total = None
            reports.append(rep)
            if on_step is not None:
                on_step({"step": step, "stage": cfg.stage, "slot": slot, "optimizer": opt, "model": model, "report": rep})
            step += 1
        if cfg.select_best:
            score = evalkit.selection_score(model, val_store or store)
            log.info("%s epoch %d: selection score %.4f", cfg.stage, epoch, score)
            if score > best_score:
                best_score, best_epoch = score, epoch
                best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    for p in model.parameters():
        p.requires_grad_(True)
    bundle = CheckpointBundle.from_model(
        model, stage=cfg.stage, epoch=len(slots),
        optimizer_state=opt.state_dict(),
        gradnorm_state=gn.to_dict() if gn is not None else None,
        rng_state=_rng_state(),
        meta={"best_epoch": best_epoch, "best_score": best_score if best_state is not None else None,
              "last_step": step},
    )
    return StageResult(bundle, reports, lr_log, best_score, best_epoch)


def stage1_pretrain(model, store, cfg, **kw) -> StageResult:
    if cfg.stage != "pretrain":
        raise TrainingError(cfg.stage, "stage1 expects a pretrain config")
    return run_stage(model, store, cfg, **kw)


def stage2_warmup(model, store, cfg, **kw) -> StageResult:
    if cfg.stage != "warmup":
        raise TrainingError(cfg.stage, "stage2 expects a warmup config")
    return run_stage(model, store, cfg, **kw)


def stage3_e2e(model, store, cfg, **kw) -> StageResult:
    if cfg.stage != "e2e":
        raise TrainingError(cfg.stage, "stage3 expects an e2e config")
    return run_stage(model, store, cfg, **kw)


@dataclass
class ScheduleResult:
    bundle: CheckpointBundle
    reports: list[losses.LossReport]
    lr_log: list[dict]
    checkpoints: dict[str, str]  # stage -> path
    hashes: dict[str, str]
    manifest: dict


def write_loss_log(reports: Sequence[losses.LossReport], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(losses.LossReport.CSV_HEADER)
        for r in reports:
            w.writerow(r.csv_row())


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        for k, v in r.items():
            if k != "stage":
                r[k] = float(v)
    return rows


def run_schedule(schedule: ScheduleConfig, store: FrameStore, out_dir=None, val_store: Optional[FrameStore] = None,
                 init: Optional[CheckpointBundle] = None, on_step=None, dataset_hash: Optional[str] = None) -> ScheduleResult:
    """Run every stage in order; each stage starts from the previous stage's best checkpoint."""
    torch.use_deterministic_algorithms(True, warn_only=True)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model = init.build_model() if init is not None else QuadBEV(schedule.model)
    reports, lr_log, ckpts, hashes = [], [], {}, {}
    chain = []
    bundle = init or CheckpointBundle.from_model(model)
    step = 0
    for i, cfg in enumerate(schedule.stages):
        log.info("stage %s: %d epochs, base lr %g", cfg.stage, cfg.epochs, cfg.base_lr)
        if i > 0 and out is not None:
            prev = schedule.stages[i - 1].stage
            try:
                bundle = load_checkpoint(ckpts[prev], expected_hash=hashes[prev])
            except Exception as e:  # noqa: BLE001
                raise TrainingError(cfg.stage, f"cannot load {prev} checkpoint: {e}") from e
            model = bundle.build_model()
            chain.append({"stage": cfg.stage, "loaded": ckpts[prev], "sha256": hashes[prev]})
        try:
            res = run_stage(model, store, cfg, val_store=val_store, step0=step, on_step=on_step)
        except TrainingError:
            raise
        except Exception as e:  # noqa: BLE001
            raise TrainingError(cfg.stage, str(e)) from e
        step = res.bundle.meta["last_step"]
        bundle = res.bundle
        reports += res.reports
        lr_log += res.lr_log
        if out is not None:
            path = out / f"stage{STAGES.index(cfg.stage) + 1}_{cfg.stage}.qbck"
            hashes[cfg.stage] = save_checkpoint(bundle, path)
            ckpts[cfg.stage] = str(path)
            (out / f"stage{STAGES.index(cfg.stage) + 1}_{cfg.stage}.cfg").write_text(cfg.to_text())
    manifest = {
        "schedule": schedule.describe(),
        "checkpoints": ckpts,
        "checkpoint_sha256": hashes,
        "chain": chain,
        "dataset_sha256": dataset_hash,
        "steps": step,
    }
    if out is not None:
        write_loss_log(reports, out / "loss_log.csv")
        (out / "schedule_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return ScheduleResult(bundle, reports, lr_log, ckpts, hashes, manifest)


def final_half_variance(reports_or_rows, stage: str = "e2e") -> float:
    """Variance of the combined loss over the last half of the given stage's steps."""
    vals = []
    for r in reports_or_rows:
        st = r.stage if isinstance(r, losses.LossReport) else r["stage"]
        if st == stage:
            vals.append(r.combined if isinstance(r, losses.LossReport) else r["combined"])
    if len(vals) < 2:
        raise ValueError(f"not enough {stage} steps to compute a variance")
    tail = np.asarray(vals[len(vals) // 2:], dtype=np.float64)
    return float(tail.var())
