import os

import numpy as np
import pytest

from wsod import train as train_mod
from wsod.config import RunConfig
from wsod.data import SceneSpec, generate_dataset
from wsod.model import Detector, ModelConfig
from wsod.nn import finite_difference_check
from wsod.train import NumericError, load_model, loss_and_grads, save_model, train

TINY = ("data.image_size = 32\nmodel.channels = 3,4,4\nmodel.hidden = 4\nmodel.head_hidden = 6\n"
        "model.scales = 12\nmodel.stages = 2\ntrain.batch = 4\nmodel.seed = 3\n")


def tiny_records(n, seed=0):
    return generate_dataset(n, seed, SceneSpec(size=32, count_range=(1, 2), radius_range=(5, 6)))


def test_full_pipeline_gradient_matches_finite_differences():
    cfg = ModelConfig(image_size=24, channels=(3, 3, 3), hidden=3, head_hidden=4, scales=(12.0, 20.0), stages=2)
    recs = generate_dataset(2, 0, SceneSpec(size=24, count_range=(1, 2), radius_range=(4, 5)))
    model = Detector(cfg, 1)
    model.use_bn = True
    _, grads = loss_and_grads(model, recs, cfg.ratios)
    worst = 0.0
    for name, g in grads.items():
        err = finite_difference_check(lambda: loss_and_grads(model, recs, cfg.ratios)[0]["loss"],
                                      model.get(name), g, 1e-6, max_coords=4, rng=np.random.default_rng(0))
        worst = max(worst, err)
    assert worst < 1e-3


def test_detect_is_deterministic_and_scaled_to_pixels():
    cfg = RunConfig.from_text(TINY)
    model = Detector(cfg.model_config(), seed=0)
    recs = tiny_records(3)
    images = [recs[0].image, recs[0].image, recs[1].image]
    dets, props = model.detect(images, ["a", "b", "c"])
    key = lambda img: sorted((d.cls, d.score, d.cx, d.cy, d.w, d.h) for d in dets if d.image_id == img)
    assert key("a") == key("b")
    assert len(props) == 3
    for d in dets:
        assert 0 <= d.cx <= 32 and 0 <= d.cy <= 32 and d.w > 0 and d.h > 0 and 0.0 <= d.score <= 1.0
    again, _ = model.detect(images, ["a", "b", "c"])
    assert [(d.image_id, d.score, d.corners) for d in again] == [(d.image_id, d.score, d.corners) for d in dets]


def test_checkpoint_round_trip_reproduces_detections(tmp_path):
    cfg = RunConfig.from_text(TINY)
    model = Detector(cfg.model_config(), seed=5)
    model.use_bn = True
    path = tmp_path / "m.ckpt"
    save_model(path, model, cfg)
    loaded, cfg2 = load_model(path)
    assert cfg2.values == cfg.values
    imgs = [r.image for r in tiny_records(2)]
    a, _ = model.detect(imgs)
    b, _ = loaded.detect(imgs)
    assert [(d.score, d.corners) for d in a] == [(d.score, d.corners) for d in b]


def test_schedule_boundaries_take_effect_and_checkpoint(tmp_path):
    cfg = RunConfig.from_text(TINY + "train.epochs = 2\ntrain.lr = 0.01\ntrain.schedule = 3:0.001\n"
                              "train.batchnorm_step = 2\ntrain.square_ratios_step = 4\n")
    res = train(cfg, tiny_records(12), out_dir=tmp_path, eval_every=0)
    steps = res.steps
    assert len(steps) == 6
    assert [s["lr"] for s in steps] == [0.01] * 3 + [0.001] * 3
    assert [s["bn"] for s in steps] == [0, 0, 1, 1, 1, 1]
    assert [s["ratios"] for s in steps] == [3, 3, 3, 3, 1, 1]
    names = sorted(os.path.basename(p) for p in res.checkpoints)
    assert names == ["final.ckpt", "step000002.ckpt", "step000003.ckpt", "step000004.ckpt"]
    model, _ = load_model(tmp_path / "step000002.ckpt")
    assert model.get("bn.gamma") is not None


def test_loss_decreases_on_a_small_set():
    cfg = RunConfig.from_text(TINY + "train.epochs = 15\ntrain.lr = 0.01\ntrain.batchnorm_step = 0\n")
    res = train(cfg, tiny_records(16), eval_every=0)
    losses = [e["loss"] for e in res.epochs]
    assert np.mean(losses[-3:]) < 0.8 * np.mean(losses[:2])


def test_non_finite_loss_aborts_and_keeps_last_checkpoint(tmp_path, monkeypatch):
    real = train_mod.ctc_loss_and_grad_batch
    calls = {"n": 0}

    def poisoned(logits, counts):
        calls["n"] += 1
        losses, g = real(logits, counts)
        if calls["n"] > 4 * 3:  # four scanners per step; poison step 3
            losses = losses * np.nan
        return losses, g

    monkeypatch.setattr(train_mod, "ctc_loss_and_grad_batch", poisoned)
    cfg = RunConfig.from_text(TINY + "train.epochs = 3\ntrain.schedule = 2:0.001\n")
    with pytest.raises(NumericError):
        train(cfg, tiny_records(8), out_dir=tmp_path, eval_every=0)
    assert sorted(os.listdir(tmp_path)) == ["step000002.ckpt"]
    load_model(tmp_path / "step000002.ckpt")
