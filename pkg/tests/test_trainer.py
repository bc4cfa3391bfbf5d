import hashlib

import numpy as np
import pytest
from dataclasses import replace

from quadbev.nets import QuadBEV
from quadbev.nets.checkpoint import load_checkpoint
from quadbev.trainer import (
    ABLATIONS,
    FrameStore,
    StageConfig,
    TrainingError,
    ablation_schedule,
    desk_schedule,
    final_half_variance,
    group_checksums,
    paper_schedule,
    read_loss_log,
    resolve_preset,
    run_schedule,
    stage1_pretrain,
    stage2_warmup,
    stage3_e2e,
)

HEADS = ("head_det", "head_map", "head_lane", "head_occ")
EXTRACTOR = ("backbone", "depth_estimator", "bev_encoder")


@pytest.fixture(scope="module")
def small_store(desk_records):
    # two sequences of two frames keep the stage tests quick
    recs = [r for r in desk_records if r[0].sequence_id < 2 and r[0].frame_index < 2]
    return FrameStore(recs)


def _stage(sch, name, **kw):
    cfg = [s for s in sch.stages if s.stage == name][0]
    return replace(cfg, **kw)


def test_paper_preset_echo():
    s1, s2, s3 = paper_schedule().stages
    assert (s1.stage, s1.base_lr, s1.weight_decay, s1.epochs) == ("pretrain", 1e-4, 1e-2, 20)
    assert (s2.stage, s2.base_lr, s2.aux_lr, s2.epochs) == ("warmup", 2e-4, 2e-5, 10)
    assert (s3.stage, s3.base_lr, s3.backbone_lr, s3.epochs) == ("e2e", 1e-4, pytest.approx(1e-5), 10)
    assert set(s2.frozen) == set(EXTRACTOR)
    assert s2.rotation == ("det", "map", "lane", "occ")
    assert s3.gradnorm_enabled and not s3.frozen
    assert abs(s2.aux_lr - s2.base_lr / 10) < 1e-15
    assert paper_schedule().model.image_size == (704, 256)
    assert all(s.batch_size == 8 for s in paper_schedule().stages)


def test_desk_preset_ratios():
    s1, s2, s3 = desk_schedule().stages
    assert (s1.epochs, s2.epochs, s3.epochs) == (8, 4, 8)
    assert abs(s2.aux_lr - s2.base_lr / 10) < 1e-15
    assert abs(s3.backbone_lr - s3.base_lr / 10) < 1e-15


def test_stage_config_text_roundtrip():
    for s in paper_schedule().stages + desk_schedule().stages:
        assert StageConfig.from_text(s.to_text()) == s
    with pytest.raises(ValueError):
        StageConfig.from_text("stage = e2e\nbase_lr = 1e-3\nepochs = 1\nbogus = 3\n")
    with pytest.raises(ValueError):
        StageConfig("e2e", 1e-3, 1, frozen=("not_a_group",))


def test_ablation_presets():
    for name in ABLATIONS:
        assert ablation_schedule(name).name == name
    base = ablation_schedule("baseline")
    assert [s.stage for s in base.stages] == ["e2e"]
    e2e = base.stages[0]
    assert not e2e.gradnorm_enabled and e2e.loss_weights == (1.0,) * 5 and e2e.backbone_lr == e2e.base_lr
    assert [s.stage for s in ablation_schedule("map-pretrain").stages] == ["pretrain", "e2e"]
    assert ablation_schedule("gradient-weighting").stages == desk_schedule().stages
    with pytest.raises(ValueError):
        ablation_schedule("nope")
    with pytest.raises(ValueError):
        resolve_preset("ablation:nope")


def test_empty_dataset_raises():
    sch = desk_schedule()
    with pytest.raises(TrainingError) as ei:
        stage3_e2e(QuadBEV(sch.model), FrameStore([]), sch.stages[2])
    assert ei.value.stage == "e2e"
    with pytest.raises(TrainingError):
        stage1_pretrain(QuadBEV(sch.model), FrameStore([]), sch.stages[2])


def test_stage1_leaves_other_heads_untouched(small_store):
    sch = desk_schedule()
    model = QuadBEV(sch.model)
    before = group_checksums(model)
    stage1_pretrain(model, small_store, _stage(sch, "pretrain", epochs=1))
    after = group_checksums(model)
    for g in ("head_det", "head_lane", "head_occ"):
        assert before[g] == after[g]
    assert before["head_map"] != after["head_map"] and before["backbone"] != after["backbone"]


def test_stage1_map_loss_halves(desk_records):
    sch = desk_schedule()
    res = stage1_pretrain(QuadBEV(sch.model), FrameStore(desk_records), _stage(sch, "pretrain"))
    L = np.array([r.losses["map"] for r in res.reports])
    steps_per_epoch = len(L) // sch.stages[0].epochs
    assert L[-steps_per_epoch:].mean() < 0.5 * L[0]


def test_stage2_freezing_and_rotation(small_store):
    sch = desk_schedule()
    cfg = _stage(sch, "warmup", epochs=1)
    model = QuadBEV(sch.model)
    before = group_checksums(model)
    seen = []

    def on_step(info):
        lrs = {pg["group"]: pg["lr"] for pg in info["optimizer"].param_groups}
        seen.append((info["slot"], lrs))

    stage2_warmup(model, small_store, cfg, on_step=on_step)
    after = group_checksums(model)
    for g in EXTRACTOR:
        assert before[g] == after[g], g
    assert [s for s, _ in seen[::len(seen) // 4]] == list(cfg.rotation)
    for slot, lrs in seen:
        assert set(lrs) == set(HEADS)  # frozen groups are not in the optimizer
        at_base = [g for g in HEADS if lrs[g] == cfg.base_lr]
        at_aux = [g for g in HEADS if abs(lrs[g] - cfg.base_lr / 10) < 1e-15]
        assert at_base == [f"head_{slot}"] and len(at_aux) == 3


def test_stage3_weights_and_lrs(small_store):
    sch = desk_schedule()
    cfg = _stage(sch, "e2e", epochs=2)
    lrs = []
    res = stage3_e2e(QuadBEV(sch.model), small_store, cfg,
                     on_step=lambda i: lrs.append({pg["group"]: pg["lr"] for pg in i["optimizer"].param_groups}))
    assert all(v == 1.0 for v in res.reports[0].weights.values())
    for r in res.reports:
        assert abs(sum(r.weights.values()) - 5) < 1e-6
        assert abs(r.combined - sum(r.weights[c] * r.losses[c] for c in r.losses)) < 1e-4 * max(1.0, r.combined)
        assert set(r.grad_norms) == {"det", "map", "lane", "occ", "depth"}
    assert any(abs(sum(r.weights.values()) - 5) < 1e-6 and max(r.weights.values()) != 1.0 for r in res.reports[1:])
    for d in lrs:
        assert d["backbone"] == pytest.approx(cfg.base_lr / 10)
        assert all(d[g] == cfg.base_lr for g in d if g != "backbone")
    gn = res.bundle.gradnorm_state
    assert gn is not None and abs(np.sum(gn["weights"]) - 5) < 1e-6


def _tiny_schedule(seed):
    sch = desk_schedule(seed)
    return replace(sch, stages=tuple(replace(s, epochs=1) for s in sch.stages))


def test_run_schedule_deterministic_and_chained(small_store, tmp_path):
    sch = _tiny_schedule(7)
    a = run_schedule(sch, small_store, tmp_path / "a")
    b = run_schedule(sch, small_store, tmp_path / "b")
    fa = (tmp_path / "a" / "stage3_e2e.qbck").read_bytes()
    fb = (tmp_path / "b" / "stage3_e2e.qbck").read_bytes()
    assert hashlib.sha256(fa).hexdigest() == hashlib.sha256(fb).hexdigest()
    assert [r.combined for r in a.reports] == [r.combined for r in b.reports]

    # each stage recorded the hash of the checkpoint it loaded
    chain = a.manifest["chain"]
    assert [c["stage"] for c in chain] == ["warmup", "e2e"]
    assert chain[0]["sha256"] == a.hashes["pretrain"] and chain[1]["sha256"] == a.hashes["warmup"]
    load_checkpoint(a.checkpoints["warmup"], expected_hash=a.hashes["warmup"])

    rows = read_loss_log(tmp_path / "a" / "loss_log.csv")
    assert len(rows) == len(a.reports)
    assert [r["step"] for r in rows] == sorted(r["step"] for r in rows)
    assert {r["stage"] for r in rows} == {"pretrain", "warmup", "e2e"}
    assert final_half_variance(rows) >= 0

    c = run_schedule(_tiny_schedule(8), small_store)
    assert [r.combined for r in c.reports] != [r.combined for r in a.reports]


def test_baseline_runs_e2e_only(small_store):
    sch = ablation_schedule("baseline", seed=1)
    sch = replace(sch, stages=(replace(sch.stages[0], epochs=1),))
    res = run_schedule(sch, small_store)
    assert {r.stage for r in res.reports} == {"e2e"}
    assert all(r.weights == dict.fromkeys(r.weights, 1.0) for r in res.reports)
    assert all(not r.grad_norms for r in res.reports)


def test_final_half_variance():
    rows = [{"stage": "e2e", "combined": v} for v in (9.0, 9.0, 1.0, 3.0)]
    assert final_half_variance(rows) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        final_half_variance([{"stage": "pretrain", "combined": 1.0}])
