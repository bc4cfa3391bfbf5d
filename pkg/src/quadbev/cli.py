"""``quadbev`` command line: gen-data, train, eval, bench, report."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from quadbev import __version__

log = logging.getLogger("quadbev")

STAGE_NUMBERS = {"pretrain": 1, "warmup": 2, "e2e": 3}
SCORE_KEYS = {"det": "det_mAP", "map": "map_mIoU", "lane": "lane_F1", "occ": "occ_mIoU"}

# published pretraining-task ablation (rows: pretraining task; columns det, map, lane, occ)
REFERENCE_ABLATION = {
    "Baseline": (45.6, 55.7, 57.8, 36.3),
    "Det": (44.3, 54.8, 55.2, 36.5),
    "Map": (45.4, 56.4, 58.4, 37.6),
    "Lane": (44.8, 55.3, 55.5, 33.4),
    "Occ": (45.2, 47.7, 49.3, 37.9),
}
REFERENCE_DISCOUNT = {"Det": 0.917, "Map": 1.055, "Lane": 0.861, "Occ": 0.756}


class CliError(Exception):
    def __init__(self, code: str, msg: str):
        super().__init__(msg)
        self.code = code


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", message)


# ---------------------------------------------------------------------- helpers


def _write_csv(path, rows: list[dict], header=None) -> None:
    header = header or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _write_run_manifest(out: Path, command: str, config: dict, artifacts: list[str], **extra) -> None:
    manifest = {"tool": "quadbev", "version": __version__, "command": command, "config": config,
                "artifacts": sorted(artifacts), **extra}
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def _load_store(data_dir, t_hist: int = 3):
    from quadbev.bevgeom import BevGridSpec
    from quadbev.synthworld import dataset as ds
    from quadbev.trainer import FrameStore

    try:
        manifest = ds.read_manifest(data_dir)
        records = list(ds.read_dataset(data_dir))
    except (ds.DatasetError, OSError) as e:
        raise CliError("E_DATASET", f"{data_dir}: {e}") from e
    if not records:
        raise CliError("E_DATASET", f"{data_dir}: dataset is empty")
    return FrameStore(records, t_hist, BevGridSpec.from_dict(manifest["grid"])), manifest


def split_by_sequence(store, val_fraction: float = 0.2) -> tuple[list[int], list[int]]:
    """Deterministic train/val split: sequences ranked by hash of their id, the last fifth held out."""
    seqs = sorted({s.sequence_id for s, _ in store.records},
                  key=lambda q: hashlib.sha256(f"sequence-{q}".encode()).hexdigest())
    n_val = math.ceil(len(seqs) * val_fraction) if len(seqs) > 1 else 0
    val = set(seqs[len(seqs) - n_val:])
    tr = [i for i, (s, _) in enumerate(store.records) if s.sequence_id not in val]
    va = [i for i, (s, _) in enumerate(store.records) if s.sequence_id in val]
    return tr, va


def _substore(store, idx):
    from quadbev.trainer import FrameStore
    return FrameStore([store.records[i] for i in idx], store.t_hist, store.grid)


def hyperparameter_lines(schedule) -> list[str]:
    lines = [f"preset = {schedule.name}", f"input = {schedule.model.image_size[0]}x{schedule.model.image_size[1]}",
             f"cameras = {schedule.model.n_cameras}", "optimizer = AdamW"]
    for s in schedule.stages:
        p = f"stage{STAGE_NUMBERS[s.stage]}.{s.stage}"
        lines += [f"{p}.lr = {s.base_lr:g}", f"{p}.weight_decay = {s.weight_decay:g}", f"{p}.batch_size = {s.batch_size}"]
        if s.stage == "warmup":
            lines += [f"{p}.aux_lr = {s.aux_lr:g}", f"{p}.epochs_per_task = {s.epochs}",
                      f"{p}.rotation = {','.join(s.rotation)}", f"{p}.frozen = {','.join(s.frozen)}"]
        else:
            lines.append(f"{p}.epochs = {s.epochs}")
        if s.stage == "e2e":
            lines += [f"{p}.backbone_lr = {s.backbone_lr:g}", f"{p}.gradnorm = {s.gradnorm_enabled}",
                      f"{p}.loss_weights = {','.join(f'{w:g}' for w in s.loss_weights)}"]
    return lines


# ---------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    from quadbev.bevgeom import BevGridSpec
    from quadbev.synthworld import GenSpec, default_rig, generate_samples, write_dataset
    from quadbev.synthworld.dataset import gen_spec_dict

    if args.samples is not None:
        if args.samples % args.frames:
            raise CliError("E_USAGE", f"--samples {args.samples} is not a multiple of --frames {args.frames}")
        n_seq = args.samples // args.frames
    else:
        n_seq = args.sequences
    if n_seq < 1:
        raise CliError("E_USAGE", "need at least one sequence")
    grid = BevGridSpec()
    if args.preset == "paperish":
        cams = default_rig((704, 256), n_cameras=6)
    else:
        cams = default_rig()
    spec = GenSpec(x_range=grid.x_range, y_range=grid.y_range, n_frames=args.frames)
    records = generate_samples(args.seed, n_seq, args.frames, spec, cams, grid)
    out = Path(args.out)
    manifest = write_dataset(records, out, grid, 8, extra={"seed": args.seed, "preset": args.preset,
                                                           "gen_spec": gen_spec_dict(spec)})
    print(f"wrote {manifest['n_samples']} samples ({n_seq} sequences) to {out} sha256={manifest['records_sha256']}")
    return 0


def cmd_train(args) -> int:
    from quadbev.nets.checkpoint import CheckpointError, load_checkpoint
    from quadbev.trainer import TrainingError, resolve_preset

    try:
        schedule = resolve_preset(args.preset, args.seed)
    except ValueError as e:
        raise CliError("E_USAGE", str(e)) from e
    try:
        stages = sorted({int(s) for s in args.stages.split(",")})
    except ValueError as e:
        raise CliError("E_USAGE", f"bad --stages {args.stages!r}") from e
    if not set(stages) <= {1, 2, 3}:
        raise CliError("E_USAGE", f"stages must be drawn from 1,2,3, got {args.stages}")
    schedule = schedule.subset(stages)
    if not schedule.stages:
        raise CliError("E_USAGE", f"preset {args.preset} has none of stages {args.stages}")
    if args.epochs_scale != 1.0:
        schedule = replace(schedule, stages=tuple(replace(s, epochs=max(1, round(s.epochs * args.epochs_scale)))
                                                  for s in schedule.stages))
    for line in hyperparameter_lines(schedule):
        print(line)
    sys.stdout.flush()
    if args.dry_run:
        return 0
    if args.data is None:
        raise CliError("E_USAGE", "--data is required unless --dry-run")

    full = resolve_preset(args.preset, args.seed)
    init = None
    if schedule.stages[0].stage != full.stages[0].stage:
        if args.init is None:
            raise CliError("E_CHECKPOINT", f"stage {schedule.stages[0].stage} needs --init with the previous stage checkpoint")
    if args.init is not None:
        try:
            init = load_checkpoint(args.init)
        except (CheckpointError, OSError) as e:
            raise CliError("E_CHECKPOINT", f"{args.init}: {e}") from e

    store, manifest = _load_store(args.data, schedule.model.t_hist)
    cam0 = store.records[0][0].cameras
    if tuple(cam0[0].image_size) != tuple(schedule.model.image_size) or len(cam0) != schedule.model.n_cameras:
        raise CliError("E_CONFIG", f"dataset rig {len(cam0)}x{tuple(cam0[0].image_size)} does not match preset input "
                                   f"{schedule.model.n_cameras}x{schedule.model.image_size}")
    tr, va = split_by_sequence(store)
    if args.no_split or not va:
        train_store, val_store = store, None
    else:
        train_store, val_store = _substore(store, tr), _substore(store, va)

    out = Path(args.out)
    from quadbev.trainer import run_schedule
    try:
        res = run_schedule(schedule, train_store, out, val_store=val_store, init=init,
                           dataset_hash=manifest["records_sha256"])
    except TrainingError as e:
        raise CliError("E_TRAIN", str(e)) from e
    artifacts = [str(out / "loss_log.csv"), str(out / "schedule_manifest.json"), *res.checkpoints.values()]
    artifacts += [str(p) for p in out.glob("stage*.cfg")]
    _write_run_manifest(out, "train", {"preset": args.preset, "stages": stages, "schedule": schedule.describe(),
                                       "data": str(args.data)}, artifacts, seeds={"seed": args.seed},
                        dataset_sha256=manifest["records_sha256"], checkpoint_sha256=res.hashes,
                        final_checkpoint=list(res.checkpoints.values())[-1])
    print(f"final checkpoint {list(res.checkpoints.values())[-1]}")
    return 0


def _metric_blocks(summary: dict) -> str:
    blocks = []
    for task in ("det", "map", "lane", "occ"):
        items = [(k, v) for k, v in summary.items() if k.startswith(task + "_")]
        if items:
            blocks.append(f"[{task}]\n" + "\n".join(f"{k} = {v:.6f}" for k, v in items))
    return "\n\n".join(blocks) + "\n"


def cmd_eval(args) -> int:
    from quadbev import evalkit
    from quadbev.nets.checkpoint import CheckpointError, load_checkpoint

    tasks = tuple(t for t in args.tasks.split(",") if t)
    bad = [t for t in tasks if t not in SCORE_KEYS]
    if bad or not tasks:
        raise CliError("E_USAGE", f"unknown tasks {bad}")
    store, manifest = _load_store(args.data)
    model = None
    if not args.oracle:
        if args.ckpt is None:
            raise CliError("E_USAGE", "--ckpt is required unless --oracle")
        try:
            model = load_checkpoint(args.ckpt).build_model()
        except (CheckpointError, OSError) as e:
            raise CliError("E_CHECKPOINT", f"{args.ckpt}: {e}") from e
    tr, va = split_by_sequence(store)
    idx = {"val": va, "train": tr, "all": list(range(len(store)))}[args.split]
    if not idx:
        raise CliError("E_DATASET", f"split {args.split!r} is empty")
    rep = evalkit.evaluate_model(model, store, idx, tasks=tasks, oracle=args.oracle)
    summary = rep.summary()
    text = _metric_blocks(summary)
    print(text, end="")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(text)
    _write_csv(out / "metrics.csv", [{"metric": k, "value": v} for k, v in summary.items()], ["metric", "value"])
    _write_run_manifest(out, "eval", {"tasks": tasks, "split": args.split, "oracle": args.oracle, "ckpt": args.ckpt,
                                      "data": str(args.data)},
                        [str(out / "metrics.txt"), str(out / "metrics.csv")], dataset_sha256=manifest["records_sha256"])
    return 0


def cmd_bench(args) -> int:
    from quadbev import evalkit
    from quadbev.nets.checkpoint import CheckpointError, load_checkpoint
    from quadbev.nets.model import ModelConfig, QuadBEV
    from quadbev.synthworld import default_rig, generate_samples
    from quadbev.trainer import FrameStore

    if args.repeats < 1:
        raise CliError("E_USAGE", "--repeats must be >= 1")
    if args.ckpt:
        try:
            model = load_checkpoint(args.ckpt).build_model()
        except (CheckpointError, OSError) as e:
            raise CliError("E_CHECKPOINT", f"{args.ckpt}: {e}") from e
    else:
        model = QuadBEV(ModelConfig())
    cfg = model.config
    if args.data:
        store, _ = _load_store(args.data, cfg.t_hist)
    else:
        cams = default_rig(cfg.image_size, cfg.n_cameras)
        store = FrameStore(generate_samples(0, 1, cfg.t_hist + 1, cameras=cams, grid=cfg.grid), cfg.t_hist, cfg.grid)
    frames = [store.frame_input(len(store) - 1)]
    rep = evalkit.efficiency_benchmark(model, frames, repeats=args.repeats, warmup=args.warmup)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "efficiency.csv", rep.rows(), ["mode", "macs", "latency_ms_mean", "latency_ms_sd"])
    qm, qs = rep.quad_latency
    bm, bs = rep.baseline_latency
    print(f"MACs quad={rep.quad_macs} baselines={rep.baseline_macs} ratio={rep.mac_ratio:.4f}")
    print(f"latency quad={qm:.1f}±{qs:.1f} ms baselines={bm:.1f}±{bs:.1f} ms")
    _write_run_manifest(out, "bench", {"ckpt": args.ckpt, "repeats": args.repeats, "model": cfg.to_dict()},
                        [str(out / "efficiency.csv")])
    return 0


def _run_scores(run: Path):
    p = run / "metrics.csv"
    if not p.exists():
        return None
    with open(p, newline="") as f:
        vals = {r["metric"]: float(r["value"]) for r in csv.DictReader(f)}
    scores = [vals.get(SCORE_KEYS[t]) for t in ("det", "map", "lane", "occ")]
    return None if any(s is None for s in scores) else scores


def _run_name(run: Path) -> str:
    m = run / "run_manifest.json"
    if m.exists():
        cfg = json.loads(m.read_text()).get("config", {})
        if "preset" in cfg:
            return cfg["preset"]
    return run.name


def cmd_report(args) -> int:
    from quadbev import evalkit, plotting
    from quadbev.trainer import ABLATIONS, final_half_variance, read_loss_log

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for r in args.runs:
        run = Path(r)
        log_path = run / "loss_log.csv"
        if not log_path.exists():
            raise CliError("E_MISSING_LOSS_LOG", f"{log_path} not found")
        runs.append((run, _run_name(run), read_loss_log(log_path)))

    artifacts = []
    var_rows = []
    for run, name, rows in runs:
        png = out / f"{run.name}_loss.png"
        plotting.loss_curve(rows, png, title=f"{name} ({run.name})")
        curve_csv = out / f"{run.name}_loss.csv"
        _write_csv(curve_csv, [{"step": int(r["step"]), "stage": r["stage"], "combined": r["combined"]} for r in rows],
                   ["step", "stage", "combined"])
        artifacts += [str(png), str(curve_csv)]
        try:
            var = final_half_variance(rows, stage=rows[-1]["stage"] if rows else "e2e")
        except ValueError:
            var = float("nan")
        var_rows.append({"run": run.name, "preset": name, "final_half_variance": var, "steps": len(rows),
                         "min_combined": min((r["combined"] for r in rows), default=float("nan"))})
    _write_csv(out / "variance.csv", var_rows, ["run", "preset", "final_half_variance", "steps", "min_combined"])
    artifacts.append(str(out / "variance.csv"))

    # per-preset mean variance over seeds
    by_preset: dict[str, list[float]] = {}
    for r in var_rows:
        by_preset.setdefault(r["preset"], []).append(r["final_half_variance"])
    _write_csv(out / "variance_by_preset.csv",
               [{"preset": p, "n_runs": len(v), "mean_final_half_variance": float(np.mean(v))} for p, v in by_preset.items()],
               ["preset", "n_runs", "mean_final_half_variance"])
    artifacts.append(str(out / "variance_by_preset.csv"))

    if len(runs) > 1:
        order = {f"ablation:{a}": i for i, a in enumerate(ABLATIONS)}
        panels = sorted(runs, key=lambda r: (order.get(r[1], len(order)), r[0].name))
        layout = plotting.panel_grid([(f"{n} ({run.name})", rows) for run, n, rows in panels], out / "loss_panels.png")
        _write_csv(out / "loss_panels.csv", [{"panel": i, "run": run.name, "preset": n, "grid_rows": layout[0],
                                               "grid_cols": layout[1]} for i, (run, n, _) in enumerate(panels)],
                   ["panel", "run", "preset", "grid_rows", "grid_cols"])
        artifacts += [str(out / "loss_panels.png"), str(out / "loss_panels.csv")]

    disc_rows = []
    base = REFERENCE_ABLATION["Baseline"]
    for name, scores in REFERENCE_ABLATION.items():
        d = evalkit.discount_factor(scores, base)
        disc_rows.append({"source": "reference", "name": name, "det": scores[0], "map": scores[1], "lane": scores[2],
                          "occ": scores[3], "discount": d.cumulative})
    baselines = {}
    for run, name, _ in runs:
        if name.startswith("single:"):
            s = _run_scores(run)
            if s is not None:
                t = name.split(":", 1)[1]
                baselines[t] = s[("det", "map", "lane", "occ").index(t)]
    if len(baselines) == 4:
        base_scores = [baselines[t] for t in ("det", "map", "lane", "occ")]
        for run, name, _ in runs:
            s = _run_scores(run)
            if s is None or name.startswith("single:"):
                continue
            if all(b > 0 for b in base_scores):
                d = evalkit.discount_factor(s, base_scores).cumulative
            else:
                d = float("nan")
            disc_rows.append({"source": "run", "name": f"{name} ({run.name})", "det": s[0], "map": s[1], "lane": s[2],
                              "occ": s[3], "discount": d})
    _write_csv(out / "discount.csv", disc_rows, ["source", "name", "det", "map", "lane", "occ", "discount"])
    artifacts.append(str(out / "discount.csv"))
    _write_run_manifest(out, "report", {"runs": [str(r[0]) for r in runs]}, artifacts)
    print(f"report for {len(runs)} run(s) written to {out}")
    return 0


# ---------------------------------------------------------------------- entry point


def build_parser() -> Parser:
    p = Parser(prog="quadbev", description="Multitask BEV perception on synthetic driving scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples", type=int, help="total frames (multiple of --frames)")
    g.add_argument("--sequences", type=int, default=4)
    g.add_argument("--frames", type=int, default=4, help="frames per sequence")
    g.add_argument("--preset", choices=("desk", "paperish"), default="desk")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the staged training schedule")
    t.add_argument("--data")
    t.add_argument("--stages", default="1,2,3")
    t.add_argument("--preset", default="desk", help="paper | desk | ablation:<name> | single:<task>")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default="runs/train")
    t.add_argument("--init", help="checkpoint to start from when skipping earlier stages")
    t.add_argument("--epochs-scale", type=float, default=1.0, help="multiply every stage's epoch count")
    t.add_argument("--no-split", action="store_true", help="train and select on the full dataset")
    t.add_argument("--dry-run", action="store_true", help="print the resolved hyperparameters and exit")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--tasks", default="det,map,lane,occ")
    e.add_argument("--split", choices=("val", "train", "all"), default="val")
    e.add_argument("--oracle", action="store_true", help="score ground truth fed through the decoders")
    e.add_argument("--out", default="runs/eval")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="MACs and latency: quad vs four single-task models")
    b.add_argument("--ckpt")
    b.add_argument("--data")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--out", default="runs/bench")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="loss curves, variance and discount tables")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", default="runs/report")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")
        return args.func(args)
    except CliError as e:
        msg = str(e).replace("\n", " ")
        print(f"quadbev: error {e.code}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
