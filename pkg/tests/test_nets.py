import copy

import numpy as np
import pytest
import torch

from quadbev.bevgeom import BevGridSpec, lift_and_splat
from quadbev.nets import checkpoint as ckpt
from quadbev.nets.flops import baseline_macs, conv_macs, flops_count, quad_ratio, total_macs
from quadbev.nets.model import (
    EXTRACTOR_GROUPS,
    PARAMETRIC_GROUPS,
    TASKS,
    FrameInput,
    ModelConfig,
    ModuleGroup,
    QuadBEV,
    occ_to_voxels,
    voxels_to_occ,
)
from quadbev.synthworld import default_rig

from helpers import central_fd_check

TOY_GRID = BevGridSpec(x_range=(-4.0, 4.0), y_range=(-4.0, 4.0), cell_size=1.0, z_range=(-1.0, 3.0), n_z=2,
                       depth_range=(1.0, 9.0), n_depth_bins=4)


def toy_config(**kw):
    base = dict(backbone_widths=(4, 4, 4), context_channels=3, bev_channels=4, head_channels=3, occ_mlp_hidden=4,
                n_cameras=2, image_size=(32, 16), grid=TOY_GRID, t_hist=1, embed_dim=2, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def toy_frames(cfg, n=1, seed=0, dtype=torch.float32, history=True):
    g = torch.Generator().manual_seed(seed)
    cams = default_rig(cfg.image_size, cfg.n_cameras)
    from quadbev.bevgeom import EgoPose
    frames = []
    for _ in range(n):
        img = torch.rand(cfg.n_cameras, 3, cfg.image_size[1], cfg.image_size[0], generator=g, dtype=dtype)
        hist = []
        if history:
            past = torch.rand(img.shape, generator=g, dtype=dtype)
            hist = [FrameInput(past, cams, EgoPose.from_xy_yaw(-0.5, 0.0, 0.0))]
        frames.append(FrameInput(img, cams, EgoPose.from_xy_yaw(0.0, 0.0, 0.05), hist))
    return frames


def randomize_norms(model, seed=0):
    """Move BatchNorm affine terms and statistics off their init values.

    At init every empty BEV cell sits exactly on a ReLU kink, where one-sided
    autograd derivatives and central differences legitimately disagree.
    """
    g = torch.Generator().manual_seed(seed)
    for mod in model.modules():
        if isinstance(mod, torch.nn.BatchNorm2d):
            with torch.no_grad():
                n = mod.num_features
                mod.weight.copy_(0.5 + torch.rand(n, generator=g))
                mod.bias.copy_(torch.randn(n, generator=g) * 0.3)
                mod.running_mean.copy_(torch.randn(n, generator=g) * 0.1)
                mod.running_var.copy_(0.5 + torch.rand(n, generator=g))
    return model


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(bev_channels=0)
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=1)


def test_backbone_shape_zero_images():
    cfg = toy_config(zero_init_last_norm=True)
    m = QuadBEV(cfg).eval()
    feats, ctx = m.backbone_forward(torch.zeros(2, 3, 16, 32))
    assert feats.shape == (2, 4, 2, 4)
    assert ctx.shape == (2, 3, 2, 4)
    assert torch.isfinite(feats).all() and torch.isfinite(ctx).all()


def test_backbone_rejects_bad_size():
    m = QuadBEV(toy_config())
    with pytest.raises(ValueError):
        m.backbone_forward(torch.zeros(1, 3, 15, 32))


def test_backbone_weight_sharing():
    m = QuadBEV(toy_config()).eval()
    x = torch.rand(1, 3, 16, 32)
    feats, _ = m.backbone_forward(torch.cat([x, x]))
    assert torch.equal(feats[0], feats[1])


def test_depth_head_softmax_rows():
    m = QuadBEV(toy_config()).eval()
    feats, _ = m.backbone_forward(torch.rand(2, 3, 16, 32))
    logits = m.depth_head_forward(feats)
    assert logits.shape == (2, TOY_GRID.n_depth_bins, 2, 4)
    s = logits.softmax(dim=1).sum(dim=1)
    assert torch.allclose(s, torch.ones_like(s), atol=1e-6)


def test_backbone_and_depth_gradients():
    m = randomize_norms(QuadBEV(toy_config())).double().eval()
    img = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)  # 4x8 toy after the first stage
    w = torch.randn(1, 4, 1, 1, dtype=torch.float64)

    def f(x):
        feats, ctx = m.backbone_forward(x)
        return (feats * w).sum() + m.depth_head_forward(feats).square().mean() + ctx.sum()

    assert central_fd_check(f, [img], n_coords=8) < 1e-4


def test_extract_bev_shapes_no_history():
    cfg = toy_config()
    m = QuadBEV(cfg).eval()
    frames = toy_frames(cfg, 2, history=False)
    shared, depth = m.extract_bev(frames)
    assert shared.shape == (2, cfg.bev_channels, TOY_GRID.H_bev, TOY_GRID.W_bev)
    assert depth.shape == (2, cfg.n_cameras, TOY_GRID.n_depth_bins, 2, 4)


def test_history_channels_zero_without_history():
    from quadbev.bevgeom import temporal_concat
    cfg = toy_config()
    m = QuadBEV(cfg).eval()
    f = toy_frames(cfg, 1, history=False)[0]
    raw, _ = m.pooled_bev(f.images, f.cameras)
    cat = temporal_concat(raw, [], cfg.t_hist)
    assert torch.count_nonzero(cat[raw.shape[0]:]) == 0


def test_splat_linearity_per_camera():
    cfg = toy_config()
    m = QuadBEV(cfg).eval()
    cam = default_rig(cfg.image_size, 2)[0]
    fr, geom = m._geometry(cam)
    ctx = torch.rand(3, 2, 4)
    onehot = torch.zeros(TOY_GRID.n_depth_bins, 2, 4)
    onehot[2] = 1
    a = lift_and_splat(ctx, onehot, fr, cam, TOY_GRID, geometry=geom)
    b = lift_and_splat(2 * ctx, onehot, fr, cam, TOY_GRID, geometry=geom)
    assert torch.allclose(b, 2 * a)


def test_forward_gradient_to_image():
    cfg = toy_config()
    m = randomize_norms(QuadBEV(cfg)).double().eval()
    frames = toy_frames(cfg, 1, dtype=torch.float64)
    img = frames[0].images.clone().requires_grad_(True)
    frames[0].images = img

    def f(x):
        frames[0].images = x
        out = m(frames)
        return out.det_heatmap.sum() + out.map.square().sum() + out.lane_embed.sum() + out.occ.mean() + out.depth.mean()

    assert central_fd_check(f, [img], n_coords=5, seed=1) < 1e-4


def test_forward_output_shapes():
    cfg = toy_config()
    m = QuadBEV(cfg).eval()
    out = m(toy_frames(cfg, 2))
    H, W = TOY_GRID.H_bev, TOY_GRID.W_bev
    assert out.det_heatmap.shape == (2, cfg.c_det, H, W)
    assert out.det_reg.shape == (2, 8, H, W)
    assert out.map.shape == (2, cfg.c_map, H, W)
    assert out.lane_conf.shape == (2, 1, H, W)
    assert out.lane_offset.shape == (2, 1, H, W)
    assert out.lane_embed.shape == (2, cfg.embed_dim, H, W)
    assert out.lane_cls.shape == (2, cfg.c_lane_cls, H, W)
    assert out.occ.shape == (2, H, W, TOY_GRID.n_z, cfg.c_occ)
    for k in ("det_heatmap", "det_reg", "map", "lane_conf", "occ", "depth"):
        assert torch.isfinite(getattr(out, k)).all()


def test_history_longer_than_t_hist_rejected():
    cfg = toy_config()
    m = QuadBEV(cfg).eval()
    f = toy_frames(cfg, 1)[0]
    f.history = f.history * 2
    with pytest.raises(ValueError):
        m.extract_bev([f])


def test_heads_consume_identical_shared_map():
    cfg = toy_config()
    m = QuadBEV(cfg).eval()
    frames = toy_frames(cfg, 1)
    with torch.no_grad():
        shared, depth = m.extract_bev(frames)
        out = m.forward_heads(shared, depth)
        again = m(frames)
    assert torch.equal(out.shared_bev, again.shared_bev)
    for t in TASKS:
        direct = m.head_forward(t, shared)
        for k, v in direct.items():
            assert torch.equal(v, getattr(out, k))


def test_head_independence():
    cfg = toy_config()
    m = QuadBEV(cfg).eval()
    frames = toy_frames(cfg, 1)
    with torch.no_grad():
        before = m(frames)
        for p in m.group_parameters("head_map"):
            p.zero_()
        after = m(frames)
    for k in ("det_heatmap", "det_reg", "lane_conf", "lane_embed", "occ"):
        assert torch.equal(getattr(before, k), getattr(after, k))
    assert not torch.equal(before.map, after.map)


def test_occ_reshape_round_trip():
    x = torch.randn(2, 3 * 5, 4, 6)
    v = occ_to_voxels(x, 3, 5)
    assert v.shape == (2, 4, 6, 3, 5)
    assert torch.equal(voxels_to_occ(v), x)
    # channel (z, c) lands at voxel layer z, category c
    assert v[1, 2, 3, 1, 4] == x[1, 1 * 5 + 4, 2, 3]


def test_forward_determinism():
    cfg = toy_config()
    frames = toy_frames(cfg, 1)
    a = QuadBEV(cfg).eval()(frames)
    b = QuadBEV(cfg).eval()(frames)
    assert torch.equal(a.det_heatmap, b.det_heatmap) and torch.equal(a.occ, b.occ)


def test_seed_changes_init():
    a = QuadBEV(toy_config(seed=1))
    b = QuadBEV(toy_config(seed=2))
    assert not torch.equal(a.shared_reference, b.shared_reference)


def test_parameter_partition():
    m = QuadBEV(toy_config())
    seen = {}
    for g in ModuleGroup:
        for p in m.group_parameters(g):
            assert id(p) not in seen, f"parameter in {seen.get(id(p))} and {g}"
            seen[id(p)] = g
    assert len(seen) == len(list(m.parameters()))
    assert m.group_parameters("view_projector") == [] and m.group_parameters("temporal_fusor") == []


def test_freezing_leaves_group_bit_identical():
    cfg = toy_config()
    m = QuadBEV(cfg)
    frozen = [ModuleGroup.backbone]
    m.set_group_mode(frozen)
    assert not m.group("backbone").training and m.group("head_det").training
    for p in m.group_parameters("backbone"):
        p.requires_grad_(False)
    before = {k: v.clone() for k, v in m.group("backbone").state_dict().items()}
    params = [p for p in m.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=1e-2)
    out = m(toy_frames(cfg, 2))
    (out.det_heatmap.mean() + out.map.mean()).backward()
    opt.step()
    for k, v in m.group("backbone").state_dict().items():
        assert torch.equal(v, before[k]), k


def test_shared_reference_is_last_shared_layer():
    m = QuadBEV(toy_config())
    assert m.shared_reference is m.group("bev_encoder").final.weight


# ---------------------------------------------------------------------- flops


def test_conv_macs_closed_form():
    assert conv_macs(64, 64, 8, 16, 3) == 4_718_592 == 16 * 64 * 64 * (9 * 8)


def _hook_macs(model, frames, tasks):
    """Count MACs by hooking every conv during a real forward."""
    total = {"n": 0}

    def hook(mod, inp, out):
        k = mod.kernel_size[0] * mod.kernel_size[1]
        total["n"] += out.numel() // out.shape[0] * k * mod.in_channels // mod.groups * out.shape[0]

    handles = [mod.register_forward_hook(hook) for mod in model.modules() if isinstance(mod, torch.nn.Conv2d)]
    try:
        with torch.no_grad():
            f = frames[0]
            feats, _ = model.backbone_forward(f.images)
            model.depth_head_forward(feats)
            extractor_only = total["n"]
            shared, depth = model.extract_bev([FrameInput(f.images, f.cameras, f.pose)])
            total["n"] = 0
            model.group("bev_encoder")(torch.zeros(1, model.config.context_channels * (1 + model.config.t_hist),
                                                   *shared.shape[-2:]))
            bev = total["n"]
            total["n"] = 0
            for t in tasks:
                model.head_forward(t, shared)
            heads = total["n"]
    finally:
        for h in handles:
            h.remove()
    return extractor_only + bev + heads


@pytest.mark.parametrize("cfg", [toy_config(), ModelConfig()])
def test_flops_match_conv_hooks(cfg):
    m = QuadBEV(cfg).eval()
    frames = toy_frames(cfg, 1, history=False)
    assert total_macs(cfg, "quad") == _hook_macs(m, frames, TASKS)
    assert total_macs(cfg, ("single", "occ")) == _hook_macs(m, frames, ("occ",))


def test_flops_quad_below_four_singles():
    for cfg in (toy_config(), ModelConfig(), ModelConfig(bev_channels=8, head_channels=64)):
        assert total_macs(cfg, "quad") < baseline_macs(cfg)
        assert quad_ratio(cfg) < 1
        q = flops_count(cfg, "quad")
        assert q[ModuleGroup.view_projector] == 0 and q[ModuleGroup.temporal_fusor] == 0


def test_flops_bad_mode():
    with pytest.raises(ValueError):
        flops_count(ModelConfig(), ("single", "radar"))


def test_flops_ratio_reference_direction():
    # published quad vs four-baseline GFLOPs: 281.3 / 645.7
    reference = 281.3 / 645.7
    assert abs(reference - 0.436) < 5e-4
    assert quad_ratio(ModelConfig()) < 1


# ---------------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = toy_config()
    m = QuadBEV(cfg)
    opt = torch.optim.AdamW(m.parameters(), lr=1e-3)
    frames = toy_frames(cfg, 2)
    m.train()
    m(frames).det_heatmap.mean().backward()
    opt.step()
    m.eval()
    with torch.no_grad():
        ref = m(frames)
    bundle = ckpt.CheckpointBundle.from_model(m, stage="warmup", epoch=3, optimizer_state=opt.state_dict(),
                                              gradnorm_state={"weights": np.ones(5), "alpha": 1.5},
                                              rng_state={"torch": torch.get_rng_state()}, meta={"note": "x"})
    digest = ckpt.save_checkpoint(bundle, tmp_path / "a.qbck")
    assert digest == ckpt.file_hash(tmp_path / "a.qbck")
    back = ckpt.load_checkpoint(tmp_path / "a.qbck", expected_hash=digest)
    assert back.stage == "warmup" and back.epoch == 3 and back.meta == {"note": "x"}
    m2 = back.build_model().eval()
    with torch.no_grad():
        out = m2(frames)
    for k in ("det_heatmap", "det_reg", "map", "lane_embed", "occ", "depth"):
        assert torch.equal(getattr(ref, k), getattr(out, k)), k
    opt2 = torch.optim.AdamW(m2.parameters(), lr=1e-3)
    opt2.load_state_dict(back.optimizer_state)
    np.testing.assert_array_equal(back.gradnorm_state["weights"], np.ones(5))
    assert torch.equal(back.rng_state["torch"], bundle.rng_state["torch"])


def test_checkpoint_hash_mismatch(tmp_path):
    m = QuadBEV(toy_config())
    ckpt.save_checkpoint(ckpt.CheckpointBundle.from_model(m), tmp_path / "a.qbck")
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_checkpoint(tmp_path / "a.qbck", expected_hash="0" * 64)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.qbck"
    p.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_checkpoint(p)


def test_checkpoint_encoding_deterministic():
    m = QuadBEV(toy_config())
    a = ckpt.encode_checkpoint(ckpt.CheckpointBundle.from_model(m, stage="e2e"))
    b = ckpt.encode_checkpoint(ckpt.CheckpointBundle.from_model(copy.deepcopy(m), stage="e2e"))
    assert a == b and a[:4] == b"QBCK"
