import itertools
import math

import numpy as np
import pytest
import torch

from quadbev.bevgeom import BevGridSpec
from quadbev.evalkit import (
    compute_map_nds,
    decode_detections,
    decode_lanes,
    discount_factor,
    efficiency_benchmark,
    evaluate_model,
    lane_fscore,
    map_iou,
    nms,
    occ_miou,
    oracle_outputs,
)
from quadbev.evalkit import gt_boxes
from quadbev.evalkit.detection import average_precision
from quadbev.evalkit.lanes import f_from_counts, lane_matches, visible_lanes
from quadbev.nets import ModelConfig, QuadBEV
from quadbev.nets.flops import flops_count
from quadbev.nets.model import EXTRACTOR_GROUPS
from quadbev.synthworld import FREE, Box3D, LanePolyline
from quadbev.trainer import FrameStore

GRID = BevGridSpec()


# ---------------------------------------------------------------- oracles

def ap_oracle(preds, gts, thr, min_recall=0.1, min_precision=0.1):
    """Score-ordered greedy matching then a literal 101-point envelope."""
    items = sorted(((s, i, b) for i, sample in enumerate(preds) for b, s in sample), key=lambda t: -t[0])
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return None if not items else 0.0
    used = set()
    hits = []
    for s, i, b in items:
        cands = [(math.dist(b.center[:2], g.center[:2]), j) for j, g in enumerate(gts[i]) if (i, j) not in used]
        cands = [c for c in cands if c[0] < thr]
        if cands:
            used.add((i, min(cands)[1]))
            hits.append(1)
        else:
            hits.append(0)
    curve = []
    for k in range(1, len(hits) + 1):
        tp = sum(hits[:k])
        curve.append((tp / n_gt, tp / k))
    total = 0.0
    levels = [r / 100 for r in range(101) if r / 100 > min_recall + 1e-9]
    for r in levels:
        ps = [p for rr, p in curve if rr >= r - 1e-12]
        total += max(0.0, (max(ps) if ps else 0.0) - min_precision)
    return total / len(levels) / (1 - min_precision)


def iou_oracle(pred, tgt):
    inter = union = 0
    for a, b in zip(pred.ravel().tolist(), tgt.ravel().tolist()):
        inter += a and b
        union += a or b
    return inter / union if union else None


def max_matching_oracle(ok):
    """Largest one-to-one matching by enumerating injective assignments."""
    n_p, n_g = ok.shape
    best = 0
    if n_p <= n_g:
        for perm in itertools.permutations(range(n_g), n_p):
            best = max(best, sum(ok[i, perm[i]] for i in range(n_p)))
    else:
        for perm in itertools.permutations(range(n_p), n_g):
            best = max(best, sum(ok[perm[j], j] for j in range(n_g)))
    return best


def _rand_box(rng, cat):
    return Box3D((float(rng.uniform(-5, 5)), float(rng.uniform(-5, 5)), 0.8), (1.8, 4.0, 1.5),
                 float(rng.uniform(-3, 3)), cat)


def _jitter(rng, b, sigma):
    return Box3D((b.center[0] + float(rng.normal(0, sigma)), b.center[1] + float(rng.normal(0, sigma)), b.center[2]),
                 b.size, b.yaw, b.category)


# ---------------------------------------------------------------- detection

@pytest.fixture(scope="module")
def store(desk_records):
    return FrameStore(desk_records[:4])


def test_decode_inverts_rasterize(store):
    frames, gt = store.batch([0, 1, 2, 3])
    out = oracle_outputs(gt)
    n_checked = 0
    for k in range(4):
        world = store.records[k][0].world_ref
        dets = decode_detections(out.det_heatmap[k], out.det_reg[k], GRID, score_thresh=0.5)
        boxes = gt_boxes(world, GRID)
        assert len(dets) == len(boxes)
        for b in boxes:
            d = min(dets, key=lambda t: math.dist(t[0].center, b.center))[0]
            assert d.category == b.category
            assert max(abs(p - q) for p, q in zip(d.center, b.center)) < 1e-3
            assert max(abs(p - q) for p, q in zip(d.size, b.size)) < 1e-3
            assert abs(math.remainder(d.yaw - b.yaw, 2 * math.pi)) < 1e-3
            n_checked += 1
    assert n_checked > 0


def test_nms_and_empty():
    a = Box3D((0.0, 0.0, 0.0), (2.0, 4.0, 1.5), 0.0, 0)
    b = Box3D((0.2, 0.0, 0.0), (2.0, 4.0, 1.5), 0.0, 0)
    c = Box3D((0.2, 0.0, 0.0), (2.0, 4.0, 1.5), 0.0, 1)  # other category, kept
    kept = nms([(a, 0.6), (b, 0.9), (c, 0.5)])
    assert [s for _, s in kept] == [0.9, 0.5]
    hm = torch.full((3, 8, 8), -10.0)
    reg = torch.zeros(8, 8, 8)
    assert decode_detections(hm, reg, GRID) == []
    hm[0, 3, 3] = 5.0
    assert decode_detections(hm, reg, GRID, max_k=0) == []
    assert len(decode_detections(hm, reg, GRID)) == 1


def test_perfect_detection_metrics():
    rng = np.random.default_rng(0)
    gts = [[_rand_box(rng, c % 3) for c in range(4)] for _ in range(3)]
    preds = [[(b, 0.9) for b in sample] for sample in gts]
    m = compute_map_nds(preds, gts)
    assert m.mAP == 1.0 and m.nds == 1.0
    assert m.mATE == 0 and m.mASE < 1e-12 and m.mAOE == 0


def test_hand_ap_instance():
    g = Box3D((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0, 0)
    near = Box3D((0.3, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0, 0)
    far = Box3D((10.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0, 0)
    m = compute_map_nds([[(near, 0.9), (far, 0.8)]], [[g]], n_categories=1)
    assert m.ap[(0, 0.5)] == 1.0
    # the false positive ranks first: precision 1/2 at full recall everywhere
    m = compute_map_nds([[(near, 0.8), (far, 0.9)]], [[g]], n_categories=1)
    assert abs(m.ap[(0, 0.5)] - (0.5 - 0.1) / 0.9) < 1e-12
    assert abs(m.ap[(0, 0.5)] - ap_oracle([[(near, 0.8), (far, 0.9)]], [[g]], 0.5)) < 1e-12


def test_ap_edge_cases():
    assert math.isnan(average_precision(np.zeros(0, bool), 0))
    assert average_precision(np.ones(2, bool), 0) == 0.0
    assert average_precision(np.zeros(0, bool), 3) == 0.0


@pytest.mark.parametrize("seed", range(24))
def test_ap_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n_samples = int(rng.integers(1, 3))
    gts, preds = [], []
    for _ in range(n_samples):
        g = [_rand_box(rng, 0) for _ in range(int(rng.integers(0, 4)))]
        p = [(_jitter(rng, b, 0.8), float(rng.uniform(0.1, 1))) for b in g if rng.random() < 0.8]
        p += [(_rand_box(rng, 0), float(rng.uniform(0.1, 1))) for _ in range(int(rng.integers(0, 3)))]
        gts.append(g)
        preds.append(p)
    m = compute_map_nds(preds, gts, n_categories=1)
    for thr in (0.5, 1.0, 2.0, 4.0):
        want = ap_oracle(preds, gts, thr)
        if want is None:
            assert (0, thr) not in m.ap
        else:
            assert abs(m.ap[(0, thr)] - want) < 1e-9


def test_detection_ordering_invariance():
    rng = np.random.default_rng(3)
    gts = [[_rand_box(rng, c % 3) for c in range(5)] for _ in range(2)]
    preds = [[(_jitter(rng, b, 0.5), float(rng.uniform(0.2, 1))) for b in s] for s in gts]
    a = compute_map_nds(preds, gts)
    b = compute_map_nds([list(reversed(p)) for p in preds], [list(reversed(g)) for g in gts])
    assert a.ap == b.ap and a.nds == b.nds


# ---------------------------------------------------------------- segmentation

def test_map_iou_cases():
    m = torch.tensor([[[1.0, 1.0], [0.0, 0.0]]])
    assert map_iou(m * 20 - 10, m).mean == 1.0
    assert map_iou(10 - m * 20, m).mean == 0.0
    pred = torch.tensor([[[1.0, 1.0], [0.0, 0.0]]]) * 20 - 10
    tgt = torch.tensor([[[1.0, 0.0], [1.0, 0.0]]])
    assert abs(map_iou(pred, tgt).mean - 1 / 3) < 1e-12
    # an empty union is left out of the mean
    two = torch.stack([tgt[0], torch.zeros(2, 2)])
    r = map_iou(torch.stack([pred[0], -10 * torch.ones(2, 2)]), two)
    assert math.isnan(r.per_category[1]) and abs(r.mean - 1 / 3) < 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_map_iou_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 3, 8, 8))
    masks = (rng.random((2, 3, 8, 8)) < rng.uniform(0, 0.6)).astype(np.float64)
    r = map_iou(logits, masks)
    vals = []
    for c in range(3):
        want = iou_oracle(logits[:, c] > 0, masks[:, c] > 0.5)
        if want is None:
            assert math.isnan(r.per_category[c])
        else:
            assert abs(r.per_category[c] - want) < 1e-9
            vals.append(want)
    assert abs(r.mean - np.mean(vals)) < 1e-9


def test_occ_cases():
    K = FREE + 1
    grid = torch.tensor([[[[0, FREE], [1, FREE]], [[FREE, 2], [FREE, FREE]]]])  # 8 voxels
    onehot = torch.nn.functional.one_hot(grid, K).double()
    assert occ_miou(onehot, grid).mean == 1.0
    all_free = torch.nn.functional.one_hot(torch.full_like(grid, FREE), K).double()
    r = occ_miou(all_free, grid)
    assert r.per_category[0] == r.per_category[1] == r.per_category[2] == 0.0 and r.mean == 0.0
    # hand case: predict category 0 for every voxel that is not free in the target
    pred = grid.clone()
    pred[grid != FREE] = 0
    r = occ_miou(torch.nn.functional.one_hot(pred, K).double(), grid)
    assert r.per_category[0] == 1 / 3 and r.per_category[1] == 0.0 and r.per_category[2] == 0.0
    assert r.per_category[FREE] == 1.0


@pytest.mark.parametrize("seed", range(20))
def test_occ_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    K = FREE + 1
    logits = rng.normal(size=(1, 4, 4, 2, K))
    grid = rng.integers(0, K, size=(1, 4, 4, 2))
    r = occ_miou(logits, grid)
    pred = logits.argmax(-1)
    vals = []
    for c in range(K):
        want = iou_oracle(pred == c, grid == c)
        if want is None:
            assert math.isnan(r.per_category[c])
            continue
        assert abs(r.per_category[c] - want) < 1e-9
        if c != FREE:
            vals.append(want)
    assert abs(r.mean - np.mean(vals)) < 1e-9


# ---------------------------------------------------------------- lanes

def _line(x0, y0, x1, y1, iid=0):
    return LanePolyline(np.array([[x0, y0], [x1, y1]], dtype=np.float64), 0, iid)


def test_lane_hand_cases():
    g1, g2 = _line(0, 0, 10, 0, 0), _line(0, 3.5, 10, 3.5, 1)
    m = lane_fscore([[_line(0, 0.2, 10, 0.2)]], [[g1, g2]])
    assert (m.precision, m.recall) == (1.0, 0.5) and abs(m.f1 - 2 / 3) < 1e-12
    m = lane_fscore([[]], [[g1]])
    assert m.recall == 0 and m.f1 == 0
    assert f_from_counts(0, 0, 0).f1 == 1.0
    # a prediction covering only half of its own points near the GT fails the 75% rule
    assert not lane_matches(_line(5, 0, 15, 0), g1)
    assert lane_matches(_line(0, 0.45, 10, 0.45), g1) and not lane_matches(_line(0, 0.6, 10, 0.6), g1)


@pytest.mark.parametrize("seed", range(20))
def test_lane_f1_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    gts, preds = [], []
    for _ in range(2):
        g = [_line(0, y, 10, y + rng.uniform(-1, 1), i) for i, y in enumerate(rng.uniform(-8, 8, int(rng.integers(0, 4))))]
        p = []
        for lane in g:
            if rng.random() < 0.7:
                pts = lane.points + rng.normal(0, 0.3, size=(2, 2))
                p.append(LanePolyline(pts, 0, len(p)))
        for _ in range(int(rng.integers(0, 3))):
            p.append(_line(0, rng.uniform(-8, 8), 10, rng.uniform(-8, 8), len(p)))
        gts.append(g)
        preds.append(p)
    m = lane_fscore(preds, gts)
    tp = 0
    for p, g in zip(preds, gts):
        if p and g:
            ok = np.array([[lane_matches(a, b) for b in g] for a in p])
            tp += max_matching_oracle(ok)
    n_p, n_g = sum(map(len, preds)), sum(map(len, gts))
    P = tp / n_p if n_p else 1.0
    R = tp / n_g if n_g else 1.0
    F = 2 * P * R / (P + R) if P + R else 0.0
    assert abs(m.f1 - F) < 1e-9 and abs(m.precision - P) < 1e-9 and abs(m.recall - R) < 1e-9
    rev = lane_fscore([list(reversed(x)) for x in preds], [list(reversed(x)) for x in gts])
    assert rev.f1 == m.f1


def test_lane_decode_gt_rasters(store):
    _, gt = store.batch([0, 1, 2, 3])
    out = oracle_outputs(gt)
    preds, gts = [], []
    for k in range(4):
        preds.append(decode_lanes(out.lane_conf[k, 0], out.lane_offset[k, 0], out.lane_embed[k], out.lane_cls[k], GRID))
        gts.append(visible_lanes(store.records[k][0].world_ref, GRID))
    assert sum(map(len, gts)) > 0
    assert lane_fscore(preds, gts).f1 == 1.0


def test_oracle_eval_is_perfect(store):
    s = evaluate_model(None, store, oracle=True).summary()
    for k in ("det_mAP", "det_NDS", "map_mIoU", "lane_F1", "occ_mIoU"):
        assert s[k] == pytest.approx(1.0, abs=1e-6), k  # float32 regression rasters


# ---------------------------------------------------------------- discount and efficiency

def test_discount_factor():
    base = (45.6, 55.7, 57.8, 36.3)
    d = discount_factor((45.4, 56.4, 58.4, 37.6), base)
    assert abs(d.cumulative - 1.055) < 5e-4
    assert abs(d.cumulative - math.prod(d.ratios)) < 1e-9
    assert discount_factor(base, base).cumulative == 1.0
    with pytest.raises(ValueError):
        discount_factor((1, 1), (1, 0))


def test_efficiency_ratio():
    cfg = ModelConfig()
    single = flops_count(cfg, ("single", "det"))
    extractor = sum(v for g, v in single.items() if g in EXTRACTOR_GROUPS)
    assert extractor / sum(single.values()) >= 0.6
    model = QuadBEV(ModelConfig(backbone_widths=(4, 4, 4), context_channels=3, bev_channels=4, n_cameras=2,
                                  image_size=(32, 16)))
    rep = efficiency_benchmark(model, [], repeats=0)
    assert rep.mac_ratio < 1
    rep = efficiency_benchmark(QuadBEV(cfg), [], repeats=0)
    assert rep.mac_ratio <= 0.55
    assert rep.mac_ratio == pytest.approx(rep.quad_macs / sum(rep.single_macs.values()))
