import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings

from lgsc.autodiff import Tensor
from lgsc.config import TrainConfig
from lgsc.gradcheck import small_config
from lgsc.model import GroundingModel
from lgsc.regions import RegionSet, propose_regions
from lgsc.scenes import generate_scene, generate_split
from lgsc.trainer import (AdamW, CheckpointError, adamw_step, build_training_regions, combine_losses,
                          load_checkpoint, lr_schedule, read_checkpoint, save_checkpoint, scene_loss, train,
                          training_regions)


@pytest.fixture(scope="module")
def cfg():
    return small_config()


@pytest.fixture(scope="module")
def scenes(cfg):
    return generate_split(cfg.gen, "train", 4)


def region_set(n, rng):
    xy = rng.uniform(0, 0.6, size=(n, 2))
    return RegionSet(boxes=np.concatenate([xy, xy + 0.3], axis=1), objectness=rng.uniform(size=n),
                     provenance=["proposed"] * n, source=list(range(n)), gt_indices=[], expressions=[None] * n)


# ---- region sets ------------------------------------------------------------

def test_training_regions_keep_every_gt(cfg, scenes):
    for k, s in enumerate(scenes):
        r = training_regions(s, cfg, step=k)
        assert len(r) <= cfg.proposer.N
        assert len(r.gt_indices) == len(s.objects)
        for i in r.gt_indices:
            assert r.provenance[i] == "ground_truth"
            assert r.expressions[i] == s.objects[r.source[i]].caption
            np.testing.assert_array_equal(r.boxes[i], s.objects[r.source[i]].box)


def test_surplus_drops_lowest_objectness():
    rng = np.random.default_rng(0)
    s = generate_scene(small_config().gen, 3)
    prop = region_set(10, rng)
    r = build_training_regions(prop, s.objects, 6, seed=1)
    kept = sorted(float(r.objectness[i]) for i in range(len(r)) if r.provenance[i] == "proposed")
    room = 6 - len(s.objects)
    assert kept == sorted(prop.objectness)[-room:]


def test_too_many_gt_rejected():
    s = generate_scene(small_config().gen, 3)
    with pytest.raises(ValueError, match="exceed"):
        build_training_regions(region_set(0, np.random.default_rng(0)), s.objects, 2, seed=0)


def test_dedup_removes_proposals_near_gt(cfg, scenes):
    s = scenes[0]
    prop = propose_regions(s, cfg.proposer, 0)
    r = build_training_regions(prop, s.objects, cfg.proposer.N, 0, dedup_iou=0.5)
    from lgsc.boxes import iou_matrix
    gt = np.array([o.box for o in s.objects])
    for i, p in enumerate(r.provenance):
        if p == "proposed":
            assert iou_matrix(r.boxes[i:i + 1], gt).max() <= 0.5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_shuffle_is_a_permutation(seed):
    s = generate_scene(small_config().gen, seed % 97)
    prop = region_set(3, np.random.default_rng(seed))
    r = build_training_regions(prop, s.objects, 8, seed)
    assert sorted(r.source[i] for i in r.gt_indices) == list(range(len(s.objects)))
    assert sorted(map(tuple, r.boxes)) == sorted(map(tuple, np.concatenate(
        [prop.boxes, np.array([o.box for o in s.objects])])))


def test_no_reshuffle_depends_on_scene_only(cfg, scenes):
    cfg = small_config()
    cfg.train.reshuffle = False
    a = training_regions(scenes[1], cfg, epoch=0, step=0)
    b = training_regions(scenes[1], cfg, epoch=5, step=40, slot=3)
    np.testing.assert_array_equal(a.boxes, b.boxes)


# ---- optimiser ---------------------------------------------------------------

def test_adamw_first_step_oracle():
    p, g = np.array([1.0, -2.0]), np.array([0.5, -0.1])
    new, m, v = adamw_step(p, g, np.zeros(2), np.zeros(2), lr=0.1, beta1=0.9, beta2=0.999,
                           weight_decay=0.01, t=1, eps=0.0)
    # bias correction makes the first step lr * sign(g) after decay
    np.testing.assert_allclose(new, p * (1 - 0.1 * 0.01) - 0.1 * np.sign(g), atol=1e-15)
    np.testing.assert_allclose(m, 0.1 * g, atol=1e-17)
    np.testing.assert_allclose(v, 0.001 * g * g, atol=1e-18)


def test_adamw_two_steps_by_hand():
    b1, b2, lr, wd, eps = 0.9, 0.999, 0.01, 0.1, 1e-8
    p, m, v = np.array([0.3]), np.zeros(1), np.zeros(1)
    grads = [0.2, -0.4]
    ref = 0.3
    rm = rv = 0.0
    for t, g in enumerate(grads, start=1):
        p, m, v = adamw_step(p, np.array([g]), m, v, lr, b1, b2, wd, t, eps)
        ref *= 1 - lr * wd
        rm = b1 * rm + (1 - b1) * g
        rv = b2 * rv + (1 - b2) * g * g
        ref -= lr * (rm / (1 - b1 ** t)) / (math.sqrt(rv / (1 - b2 ** t)) + eps)
    assert p[0] == pytest.approx(ref, abs=1e-15)


def test_adamw_groups_and_skips_gradless():
    a, b, c = (Tensor(np.ones(2), requires_grad=True) for _ in range(3))
    opt = AdamW([("lgsc.a", a), ("b", b), ("c", c)], {"lgsc.a"}, TrainConfig(weight_decay=0.0))
    a.grad, b.grad = np.ones(2), np.ones(2)
    opt.step(lr_lgsc=0.5, lr_rest=0.1)
    np.testing.assert_allclose(a.data, 0.5, atol=1e-7)
    np.testing.assert_allclose(b.data, 0.9, atol=1e-7)
    assert np.array_equal(c.data, np.ones(2))
    opt.zero_grad()
    assert a.grad is None


def test_lr_schedule_shape():
    base, total = 1e-3, 100
    assert lr_schedule(0, total, 0.03, base) == 0.0
    assert lr_schedule(1, total, 0.03, base) == pytest.approx(base / 3)
    assert lr_schedule(3, total, 0.03, base) == pytest.approx(base)
    assert lr_schedule(total, total, 0.03, base) == pytest.approx(0.0, abs=1e-18)
    mid = 3 + (total - 3) / 2
    assert lr_schedule(int(mid), total, 0.03, base) == pytest.approx(base * 0.5 * (1 + math.cos(math.pi * 48 / 97)))
    vals = [lr_schedule(s, total, 0.03, base) for s in range(3, total + 1)]
    assert all(x >= y for x, y in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        lr_schedule(101, total, 0.03, base)


# ---- losses ------------------------------------------------------------------------

def test_combine_losses():
    a, b = Tensor(np.array(1.5)), Tensor(np.array(0.25))
    assert combine_losses(a, b, 2.0).item() == 2.0
    assert combine_losses(a, b, 0.0) is a
    assert combine_losses(a, None, 2.0) is a


def test_scene_loss_parts(cfg, scenes):
    model = GroundingModel(cfg, seed=0)
    r = training_regions(scenes[0], cfg)
    parts = scene_loss(model, scenes[0], r, cfg, seed=0)
    assert parts.total.item() == pytest.approx(parts.l_ar + cfg.train.lambda_sce * parts.l_sce, abs=1e-12)
    assert 0.0 <= parts.l_sce <= 2.0
    assert abs(parts.l_ar - math.log(len(model.vocab))) < 1.0


def test_disabled_branch_leaves_lgsc_untouched(scenes):
    cfg = small_config()
    cfg.model.lgsc_enabled = False
    res = train(cfg, scenes, max_steps=2)
    fresh = GroundingModel(cfg, seed=cfg.train.seed)
    before = dict(fresh.named_parameters())
    for name, p in res.model.named_parameters():
        if name.startswith("lgsc."):
            assert np.array_equal(p.data, before[name].data)
    assert res.history[0]["l_sce"] > 0.0


# ---- loop and checkpoints ------------------------------------------------------------

def test_training_is_deterministic(cfg, scenes, tmp_path):
    a = train(cfg, scenes, log_path=tmp_path / "a.jsonl", max_steps=3)
    b = train(cfg, scenes, log_path=tmp_path / "b.jsonl", max_steps=3)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for (_, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    assert len(a.history) == 1  # 4 scenes, batch 4, one epoch


def test_checkpoint_round_trip(cfg, scenes, tmp_path):
    res = train(cfg, scenes, ckpt_dir=tmp_path, max_steps=1)
    model, manifest = load_checkpoint(tmp_path / "model.ckpt")
    assert manifest["step"] == 1 and manifest["adam_t"] == 1
    for (n, p), (_, q) in zip(res.model.named_parameters(), model.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n
    _, arrays = read_checkpoint(tmp_path / "model.ckpt")
    assert any(k.startswith("adam.m.") for k in arrays)


def test_checkpoint_errors(cfg, tmp_path):
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "junk.ckpt")
    save_checkpoint(tmp_path / "m.ckpt", GroundingModel(cfg, seed=0))
    other = small_config()
    other.model.d_llm = 12
    other.model.rank = 6
    other.model.heads = 2
    with pytest.raises(CheckpointError, match="shapes"):
        load_checkpoint(tmp_path / "m.ckpt", other)
