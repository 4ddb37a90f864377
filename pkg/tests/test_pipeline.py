import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hmpnet.detect import Box
from hmpnet.model import ModelConfig, build, toy_config
from hmpnet.model.network import FeaturePyramid, LevelOutput
from hmpnet.pipeline.assign import assign_targets, level_for
from hmpnet.pipeline.augment import AugmentFlags, augment, hflip, hflip_box, rotate
from hmpnet.pipeline.data import Dataset, Label, format_labels, parse_labels, read_ppm, to_chw, write_ppm
from hmpnet.pipeline.loss import detection_loss
from hmpnet.pipeline.optim import SGD, cosine_lr, sgd_step
from hmpnet.pipeline.synth import CLASS_NAMES, SceneSpec, plan_classes, render_scene, synth_dataset
from hmpnet.pipeline.train import (TrainConfig, TrainingError, batch_targets, desk_config, temperature_at, train,
                                   train_step)
from hmpnet.tensor import Parameter, Tape, Tensor, backward
from hmpnet.tensor import ops

TINY_MODEL = ModelConfig(num_classes=3, input_size=64, stem_width=8, widths=(8, 8, 16, 16), repeats=(1, 1, 1, 1),
                         neck_width=8, head_width=8, gn_groups=4)


# ------------------------------------------------------------------ data

def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_is_deterministic(tmp_path):
    spec = SceneSpec(seed=42, image_size=64)
    synth_dataset(spec, 6, tmp_path / "a")
    synth_dataset(spec, 6, tmp_path / "b")
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a == b and len(a) == 6 * 2 + 3
    synth_dataset(SceneSpec(seed=43, image_size=64), 6, tmp_path / "c")
    assert _tree(tmp_path / "c") != a


@pytest.mark.parametrize("seed", range(12))
def test_rendered_labels_cover_their_pixels(seed):
    spec = SceneSpec(seed=seed, image_size=96, num_classes=12)
    rng = np.random.default_rng(seed)
    img, labels, owner = render_scene(spec, [seed % 12, (seed + 5) % 12, (seed + 9) % 12], rng)
    assert img.shape == (96, 96, 3) and img.dtype == np.uint8
    assert spec.min_objects <= len(labels) <= spec.max_objects
    for k, lb in enumerate(labels):
        b = lb.to_box(96, 96)
        assert 0 <= b.x1 <= b.x2 <= 96 and 0 <= b.y1 <= b.y2 <= 96 and b.area >= 4
        x1, y1, x2, y2 = (int(round(v)) for v in (b.x1, b.y1, b.x2, b.y2))
        assert np.any(owner[y1:y2, x1:x2] == k)
        ys, xs = np.nonzero(owner == k)
        # the box is the hull of the painted mask; later objects may occlude part of it
        assert xs.min() >= x1 and ys.min() >= y1 and xs.max() < x2 and ys.max() < y2


def test_class_plan_balanced_and_counts_in_range():
    spec = SceneSpec(seed=3, num_classes=12)
    plan = plan_classes(spec, 300)
    counts = np.bincount([c for img in plan for c in img], minlength=12)
    share = counts.sum() / 12
    assert counts.min() >= share / 2 and counts.max() <= share * 2
    assert all(spec.min_objects <= len(p) <= spec.max_objects for p in plan)
    assert len(CLASS_NAMES) == 12


def test_synth_spec_and_directory_errors(tmp_path):
    with pytest.raises(ValueError):
        SceneSpec(num_classes=13).validate()
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        synth_dataset(SceneSpec(image_size=32), 1, blocker / "sub")


label_st = st.builds(Label, st.integers(0, 11), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))


@given(st.lists(label_st, max_size=6))
def test_label_roundtrip(labels):
    assert parse_labels(format_labels(labels)) == labels


def test_label_parse_error():
    with pytest.raises(ValueError, match="line 2"):
        parse_labels("0 0.5 0.5 0.1 0.1\n1 0.2 0.3\n")


def test_ppm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (7, 5, 3), dtype=np.uint8)
    write_ppm(tmp_path / "x.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm"), img)
    (tmp_path / "bad.ppm").write_bytes(b"P5\n1 1\n255\n\0")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "bad.ppm")


def test_dataset_reads_split(tiny_data):
    ds = Dataset(tiny_data, "train")
    assert len(ds) == 24 and len(Dataset(tiny_data, "val")) == 8
    s = ds[0]
    assert s.image.shape == (64, 64, 3)
    assert to_chw([s.image]).shape == (1, 3, 64, 64)
    assert len(ds.ground_truth(0)) == len(s.labels)
    with pytest.raises(FileNotFoundError):
        Dataset(tiny_data, "test")


# ------------------------------------------------------------ assignment

def test_assignment_levels():
    a = assign_targets([[(1, Box(304, 304, 336, 336))]], 640)
    assert [lv.num_positive for lv in a.levels] == [1, 0, 0]
    assert a.levels[0].positive[0, 40, 40] and a.levels[0].cls[0, 40, 40] == 1
    b = assign_targets([[(0, Box(100, 100, 300, 300))]], 640)
    assert [lv.num_positive for lv in b.levels] == [0, 0, 1]
    assert level_for(Box(0, 0, 100, 10), 640) == 1
    assert level_for(Box(0, 0, 15.9, 15.9), 160) == 0 and level_for(Box(0, 0, 16, 2), 160) == 1


def test_assignment_collision_moves_to_best_neighbour():
    # both centres in P3 cell (row 5, col 5) at 160 px; the second box extends right
    first = Box(40, 40, 48, 48)
    second = Box(42, 41, 56, 47)
    a = assign_targets([[(0, first), (2, second)]], 160)
    p3 = a.levels[0]
    assert p3.positive[0, 5, 5] and p3.cls[0, 5, 5] == 0
    assert p3.positive[0, 5, 6] and p3.cls[0, 5, 6] == 2
    np.testing.assert_array_equal(p3.boxes[0, 5, 6], second.as_array())
    assert a.num_positive == 2 and a.dropped == 0


def test_assignment_collision_drops_with_warning(caplog):
    # a box that lies wholly inside one cell has no overlapping neighbour
    a_box, b_box = Box(41, 41, 47, 47), Box(42, 42, 46, 46)
    with caplog.at_level(logging.WARNING):
        a = assign_targets([[(0, a_box), (1, b_box)]], 160)
    assert a.num_positive == 1 and a.dropped == 1
    assert "dropped" in caplog.text


@given(st.lists(st.tuples(st.floats(0, 150), st.floats(0, 150), st.floats(2, 150), st.floats(2, 150)), max_size=6))
def test_assignment_invariants(raw):
    gts = [(i % 3, Box(x, y, min(x + w, 160), min(y + h, 160))) for i, (x, y, w, h) in enumerate(raw)]
    a = assign_targets([gts], 160)
    assert a.num_positive + a.dropped == len(gts)
    for lv in a.levels:
        for r, c in zip(*np.nonzero(lv.positive[0])):
            x1, y1, x2, y2 = lv.boxes[0, r, c]
            # the cell always intersects its box (centre cell or an overlapping neighbour)
            s = lv.stride
            assert min(x2, (c + 1) * s) > max(x1, c * s) or (x1 + x2) / 2 // s == c


# ------------------------------------------------------------------ loss

def _pyr(size, nc, fill=-30.0, reg=0.0):
    levels = []
    for name, s in (("P3", 8), ("P4", 16), ("P5", 32)):
        g = size // s
        levels.append(LevelOutput(name, s, Tensor(np.full((1, nc, g, g), fill)),
                                  Tensor(np.full((1, 4, g, g), reg))))
    return FeaturePyramid(levels, size)


def test_loss_at_optimum_is_tiny():
    box = Box(52, 36, 72, 60)  # 24 px long side -> P4 at 160
    tgt = assign_targets([[(1, box)]], 160)
    pyr = _pyr(160, 3)
    r, c = np.argwhere(tgt.levels[1].positive[0])[0]
    cx, cy = (c + 0.5) * 16, (r + 0.5) * 16
    dist = np.array([cx - box.x1, cy - box.y1, box.x2 - cx, box.y2 - cy]) / 16
    pyr.levels[1].reg.data[0, :, r, c] = np.log(np.expm1(dist))
    pyr.levels[1].cls.data[0, 1, r, c] = 30.0
    parts = {}
    assert detection_loss(pyr, tgt, parts).item() < 0.01
    assert parts["box"] < 1e-5 and parts["num_pos"] == 1


def test_loss_without_positives_is_classification_only():
    tgt = assign_targets([[]], 64)
    pyr = _pyr(64, 2, fill=0.0)
    parts = {}
    loss = detection_loss(pyr, tgt, parts).item()
    assert parts["box"] == 0.0
    assert loss == pytest.approx((64 + 16 + 4) * 2 * math.log(2), rel=1e-6)


@given(st.integers(0, 10_000))
def test_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    pyr = _pyr(64, 2)
    for lv in pyr.levels:
        lv.cls.data[:] = rng.standard_normal(lv.cls.shape) * 5
        lv.reg.data[:] = rng.standard_normal(lv.reg.shape) * 3
    xs = np.sort(rng.uniform(0, 64, 2))
    ys = np.sort(rng.uniform(0, 64, 2))
    gts = [[(int(rng.integers(2)), Box(xs[0], ys[0], xs[1] + 1e-3, ys[1] + 1e-3))]]
    assert detection_loss(pyr, assign_targets(gts, 64)).item() >= 0


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        detection_loss(_pyr(64, 2), assign_targets([[], []], 64))


# ------------------------------------------------------------- optimizer

def test_cosine_endpoints():
    assert cosine_lr(0, 0.01, 1e-4, 60) == 0.01
    assert cosine_lr(60, 0.01, 1e-4, 60) == pytest.approx(1e-4)
    assert cosine_lr(30, 0.01, 1e-4, 60) == pytest.approx((0.01 + 1e-4) / 2)


def test_sgd_closed_form():
    w = Parameter(np.array([1.0]))
    with Tape():
        loss = ops.mul(ops.mul(w, w), 0.5)
    backward(loss)
    SGD([w], momentum=0.0, weight_decay=0.0).step(0.1)
    assert w.data[0] == pytest.approx(0.9)
    v = Parameter(np.array([1.0]))
    v.grad[:] = 1.0
    vel = sgd_step([v], 0.1, momentum=0.0, weight_decay=0.0)
    assert v.data[0] == pytest.approx(0.9) and vel[id(v)][0] == 1.0


def test_sgd_momentum_and_decay():
    w = Parameter(np.array([2.0]))
    opt = SGD([w], momentum=0.5, weight_decay=0.1)
    w.grad[:] = 1.0
    opt.step(0.1)  # v = 1 + 0.2 = 1.2 ; w = 2 - 0.12
    assert w.data[0] == pytest.approx(1.88)
    opt.step(0.1)  # v = 0.6 + 1 + 0.188 = 1.788
    assert w.data[0] == pytest.approx(1.88 - 0.1788)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 0.1})
    cfg = TrainConfig()
    assert (cfg.lr0, cfg.momentum, cfg.weight_decay, cfg.batch, cfg.epochs) == (0.01, 0.937, 5e-4, 64, 200)
    assert (desk_config().batch, desk_config().epochs) == (16, 60)


def test_temperature_schedule():
    cfg = TrainConfig()
    assert temperature_at(0, cfg) == 30.0
    assert temperature_at(5, cfg) == pytest.approx(15.5)
    assert temperature_at(10, cfg) == 1.0 and temperature_at(100, cfg) == 1.0


# ----------------------------------------------------------- augmentation

def test_flip_examples(rng):
    assert hflip_box(Box(10, 10, 20, 30), 100) == Box(80, 10, 90, 30)
    img = rng.integers(0, 256, (20, 100, 3), dtype=np.uint8)
    lb = [Label.from_box(0, Box(10, 10, 20, 30), 100, 20)]
    im2, lb2 = hflip(img, lb)
    b = lb2[0].to_box(100, 20)
    assert (b.x1, b.x2) == pytest.approx((80, 90))
    im3, lb3 = hflip(im2, lb2)
    np.testing.assert_array_equal(im3, img)
    a, c = lb3[0], lb[0]
    assert (a.cls, a.cy, a.w, a.h) == (c.cls, c.cy, c.w, c.h) and a.cx == pytest.approx(c.cx, abs=1e-12)


def test_rotation_zero_is_identity(rng):
    img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    lb = [Label(1, 0.5, 0.4, 0.2, 0.3)]
    im2, lb2 = rotate(img, lb, 0.0)
    np.testing.assert_array_equal(im2, img)
    assert lb2 == lb


@pytest.mark.parametrize("deg", [-10.0, -4.0, 7.5, 10.0])
def test_rotated_hull_contains_rotated_object(deg):
    size = 64
    img = np.zeros((size, size, 3), dtype=np.uint8)
    img[20:30, 14:44] = 255
    lb = [Label.from_box(0, Box(14, 20, 44, 30), size, size)]
    im2, lb2 = rotate(img, lb, deg)
    b = lb2[0].to_box(size, size)
    ys, xs = np.nonzero(im2[..., 0] > 127)
    assert xs.min() >= math.floor(b.x1) - 1 and xs.max() + 1 <= math.ceil(b.x2) + 1
    assert ys.min() >= math.floor(b.y1) - 1 and ys.max() + 1 <= math.ceil(b.y2) + 1
    # hull of the rotated rectangle, computed independently
    th = math.radians(deg)
    corners = [(14, 20), (44, 20), (44, 30), (14, 30)]
    rx = [math.cos(th) * (x - 32) - math.sin(th) * (y - 32) + 32 for x, y in corners]
    ry = [math.sin(th) * (x - 32) + math.cos(th) * (y - 32) + 32 for x, y in corners]
    assert (b.x1, b.y1, b.x2, b.y2) == pytest.approx((min(rx), min(ry), max(rx), max(ry)))


def test_rotation_drops_vanishing_boxes(caplog):
    img = np.zeros((40, 40, 3), dtype=np.uint8)
    lb = [Label.from_box(0, Box(0, 0, 1.5, 1.5), 40, 40), Label.from_box(1, Box(10, 10, 30, 30), 40, 40)]
    with caplog.at_level(logging.INFO):
        _, out = rotate(img, lb, 10.0)
    assert [x.cls for x in out] == [1]
    assert "dropped" in caplog.text


@given(st.integers(0, 1000))
def test_augment_keeps_labels_valid(seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (48, 48, 3), dtype=np.uint8)
    labels = [Label.from_box(i, Box(8 + 10 * i, 10, 20 + 10 * i, 30), 48, 48) for i in range(2)]
    im2, lb2 = augment(img, labels, AugmentFlags(), rng)
    assert im2.shape == img.shape and len(lb2) == 2
    for lb in lb2:
        b = lb.to_box(48, 48)
        assert -1e-9 <= b.x1 <= b.x2 <= 48 + 1e-9 and b.area >= 4


# -------------------------------------------------------------- training

def test_fixed_batch_loss_strictly_decreases(tiny_data):
    ds = Dataset(tiny_data, "train")
    model = build(toy_config(input_size=64), seed=0)
    opt = SGD(model.parameters())
    x, tgt = batch_targets([ds[i].image for i in range(8)], [ds[i].labels for i in range(8)], 64)
    losses = [train_step(model, opt, x, tgt, 0.01) for _ in range(10)]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_train_logs_checkpoints_resume_and_determinism(tiny_data, tmp_path):
    ds, val = Dataset(tiny_data, "train"), Dataset(tiny_data, "val")
    cfg = TrainConfig(batch=8, epochs=3, eval_every=2, seed=1)

    def run(out, **kw):
        model = build(TINY_MODEL, seed=cfg.seed)
        return train(model, ds, cfg, out, val=val, **kw)

    full = run(tmp_path / "a" / "last.ckpt")
    log = [json.loads(line) for line in (tmp_path / "a" / "last.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [0, 1, 2]
    assert {"epoch", "lr", "loss", "box", "cls", "temperature"} <= set(log[0])
    assert "map50" in log[1] and "map50" in log[2] and "map50" not in log[0]
    assert (tmp_path / "a" / "last.best.ckpt").exists() and (tmp_path / "a" / "last.state").exists()

    again = run(tmp_path / "b" / "last.ckpt")
    assert (tmp_path / "b" / "last.jsonl").read_text() == (tmp_path / "a" / "last.jsonl").read_text()
    assert again.history == full.history

    run(tmp_path / "c" / "last.ckpt", max_epochs=2)
    resumed = run(tmp_path / "c" / "last.ckpt", resume=tmp_path / "c" / "last.state")
    assert resumed.history[-1]["loss"] == full.history[-1]["loss"]
    assert (tmp_path / "c" / "last.ckpt").read_bytes() == (tmp_path / "a" / "last.ckpt").read_bytes()


def test_non_finite_loss_aborts_with_batch_seed(tiny_data, tmp_path, monkeypatch, caplog):
    import hmpnet.pipeline.train as tr

    def broken(pyr, assignment, parts=None):
        return ops.log(ops.mul(ops.sum(pyr.levels[0].cls), 0.0))

    monkeypatch.setattr(tr, "detection_loss", broken)
    with pytest.raises(TrainingError, match=r"batch seed \[0, 0, 0\]"):
        train(build(TINY_MODEL), Dataset(tiny_data, "train"), TrainConfig(batch=8, epochs=1), tmp_path / "x.ckpt")
    assert "non-finite" in caplog.text
