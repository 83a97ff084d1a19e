import json

import numpy as np
import pytest

import layermatrix.train as train_mod
from layermatrix.checkpoint import load_checkpoint
from layermatrix.config import Config, set_value
from layermatrix.data import Subset, gen_synthetic, SyntheticSpec
from layermatrix.heads import total_loss
from layermatrix.tensor import NumericError
from layermatrix.train import TrainingAborted, lr_at, make_batch, restore, train


def small_cfg(**overrides):
    cfg = Config()
    values = {"data.num_images": 6, "data.val_images": 2, "train.batch_size": 2, "train.epochs": 2,
              "train.log_every": 1, "matrix.channels": 8}
    values.update(overrides)
    for k, v in values.items():
        set_value(cfg, k, v)
    return cfg


def read_log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_lr_schedule_drops_at_three_quarters():
    cfg = Config()
    set_value(cfg, "train.lr", 5e-5)
    set_value(cfg, "train.epochs", 40)
    assert lr_at(cfg, 29) == 5e-5
    assert lr_at(cfg, 30) == pytest.approx(5e-6)
    set_value(cfg, "train.epochs", 80)
    assert lr_at(cfg, 59) == 5e-5 and lr_at(cfg, 60) == pytest.approx(5e-6)


def test_schedule_is_logged(tmp_path):
    cfg = small_cfg(**{"train.epochs": 4, "data.num_images": 2, "train.batch_size": 2, "train.lr": 5e-5})
    train(cfg, tmp_path)
    epochs = [r for r in read_log(tmp_path / "metrics.jsonl") if r["event"] == "epoch"]
    assert [r["lr"] for r in epochs] == [5e-5, 5e-5, 5e-5, pytest.approx(5e-6)]
    first = read_log(tmp_path / "metrics.jsonl")[0]
    assert first["event"] == "config" and Config.from_dict(first["config"]) == cfg


def test_fixed_seed_runs_are_bitwise_identical(tmp_path):
    cfg = small_cfg()
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
    assert (tmp_path / "a/checkpoint.mxn").read_bytes() == (tmp_path / "b/checkpoint.mxn").read_bytes()


def test_resume_gives_identical_continuation(tmp_path):
    cfg = small_cfg(**{"train.epochs": 2, "train.checkpoint_every": 1})
    train(cfg, tmp_path / "full")
    one = small_cfg(**{"train.epochs": 2, "train.checkpoint_every": 1})
    # stop after the first epoch, then resume
    set_value(one, "train.max_steps", 3)
    train(one, tmp_path / "half")
    ck = load_checkpoint(tmp_path / "half/checkpoint.mxn")
    assert ck.meta["epoch"] == 1 and ck.meta["step"] == 3
    train(cfg, tmp_path / "half", resume=tmp_path / "half/checkpoint.mxn")
    full = [r for r in read_log(tmp_path / "full/metrics.jsonl") if r["event"] == "step"]
    half = [r for r in read_log(tmp_path / "half/metrics.jsonl") if r["event"] == "step"]
    assert full == half
    assert (tmp_path / "full/checkpoint.mxn").read_bytes() == (tmp_path / "half/checkpoint.mxn").read_bytes()


def test_restored_model_matches_parameters(tmp_path):
    cfg = small_cfg(**{"train.epochs": 1})
    res = train(cfg, tmp_path)
    ck = load_checkpoint(res.checkpoint)
    model, cfg2 = restore(ck)
    assert cfg2 == cfg
    for k, p in model.parameters().items():
        assert np.array_equal(p.data, ck.params[k])


def test_numeric_failure_aborts_with_batch_ids(tmp_path, monkeypatch):
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 2:
            raise NumericError("non-finite value in focal_loss")
        return total_loss(*args, **kwargs)

    monkeypatch.setattr(train_mod, "total_loss", flaky)
    with pytest.raises(TrainingAborted) as info:
        train(small_cfg(), tmp_path)
    assert len(info.value.batch_ids) == 2
    assert info.value.checkpoint.exists()
    abort = json.loads((tmp_path / "abort.json").read_text())
    assert abort["batch_ids"] == info.value.batch_ids and abort["step"] == 1
    assert load_checkpoint(info.value.checkpoint).meta["step"] == 1


def test_single_image_overfits(tmp_path):
    cfg = small_cfg(**{"train.augment": False, "train.lr": 1e-3, "train.epochs": 300, "train.batch_size": 1,
                       "train.log_every": 0, "train.checkpoint_every": 0, "matrix.channels": 16})
    data = gen_synthetic(1, seed=4, spec=SyntheticSpec.from_config(cfg), cfg=cfg)
    res = train(cfg, tmp_path, datasets=(data, None))
    assert res.losses[-1] < 0.1 * res.losses[9]


def test_make_batch_without_augmentation_renders_targets():
    cfg = small_cfg(**{"train.augment": False})
    data = gen_synthetic(3, seed=0)
    from layermatrix.model import Detector
    model = Detector(cfg)
    images, targets, dropped = make_batch(model, Subset(data, [0, 1, 2]), [0, 2], cfg, np.random.default_rng(0))
    assert images.shape == (2, 3, 128, 128) and images.dtype == np.float32 and dropped == 0
    assert len(targets.layers) == 19
    assert next(iter(targets.layers.values())).tl_heat.shape[0] == 2
