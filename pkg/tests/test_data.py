import json

import numpy as np
import pytest

from layermatrix.assignment import GroundTruthBox, layer_stats
from layermatrix.config import Config, load_config, set_value
from layermatrix.data import (DataError, Sample, SyntheticSpec, augment, gen_synthetic, grid_from_config, letterbox,
                              load_coco_json, write_coco)


def test_synthetic_is_deterministic():
    a, b = gen_synthetic(6, seed=0), gen_synthetic(6, seed=0)
    for k in range(6):
        assert a.boxes(k) == b.boxes(k)
        assert np.array_equal(a[k].image, b[k].image)
    assert gen_synthetic(6, seed=1).boxes(0) != a.boxes(0) or gen_synthetic(6, seed=1).boxes(1) != a.boxes(1)


def test_synthetic_boxes_are_valid():
    data = gen_synthetic(200, seed=3)
    spec = SyntheticSpec()
    classes = set()
    for k in range(len(data)):
        boxes = data.boxes(k)
        assert 1 <= len(boxes) <= 5
        for b in boxes:
            classes.add(b.class_id)
            assert 0 <= b.x1 < b.x2 <= spec.image_size and 0 <= b.y1 < b.y2 <= spec.image_size
            assert spec.side_range[0] <= min(b.width, b.height)
            assert 0.25 <= b.width / b.height <= 4.0 + 0.2
    assert classes == {0, 1, 2}
    assert data[0].image.shape == (128, 128, 3) and data[0].image.dtype == np.uint8


def test_default_set_reaches_every_layer_that_fits_the_image():
    data = gen_synthetic(2000, seed=0)
    boxes = [b for k in range(len(data)) for b in data.boxes(k)]
    stats = layer_stats(boxes, grid_from_config(Config()))
    reachable = [c for c in stats.counts if grid_from_config(Config())[c].relaxed_w[0] <= 128
                 and grid_from_config(Config())[c].relaxed_h[0] <= 128]
    assert len(reachable) == 9
    assert all(stats.counts[c] >= 20 for c in reachable)


def test_large_images_reach_all_live_layers():
    cfg = Config()
    set_value(cfg, "data.image_size", 1024)
    set_value(cfg, "data.side_range", [20, 1000])
    data = gen_synthetic(2000, seed=0, spec=SyntheticSpec.from_config(cfg), cfg=cfg)
    stats = layer_stats([b for k in range(len(data)) for b in data.boxes(k)], grid_from_config(cfg))
    assert len(stats.counts) == 19
    assert min(stats.counts.values()) >= 20


def test_extreme_aspect_is_clamped_and_counted():
    cfg = Config()
    spec = SyntheticSpec(aspect_range=(10.0, 10.0), side_range=(10.0, 128.0), boxes_per_image=(1, 1))
    data = gen_synthetic(20, seed=0, spec=spec, cfg=cfg)
    assert data.clamped > 0


def test_coco_roundtrip(tmp_path):
    data = gen_synthetic(4, seed=0)
    path = write_coco(data, tmp_path)
    loaded = load_coco_json(path)
    assert len(loaded) == 4 and loaded.report == []
    for k in range(4):
        assert loaded.boxes(k) == data.boxes(k)
        assert np.array_equal(loaded[k].image, data[k].image)


def test_coco_bbox_conversion_and_skips(tmp_path):
    from PIL import Image
    Image.fromarray(np.zeros((64, 64, 3), np.uint8)).save(tmp_path / "a.png")
    doc = {"images": [{"id": 1, "file_name": "a.png"}, {"id": 2, "file_name": "missing.png"}],
           "annotations": [{"image_id": 1, "category_id": 7, "bbox": [10, 20, 30, 40]},
                           {"image_id": 1, "category_id": 7, "bbox": "bad"}],
           "categories": [{"id": 7, "name": "thing"}]}
    (tmp_path / "ann.json").write_text(json.dumps(doc))
    data = load_coco_json(tmp_path / "ann.json")
    assert len(data) == 1
    assert data.boxes(0) == [GroundTruthBox(0, 10, 20, 40, 60)]
    assert len(data.report) == 2 and any("missing" in r for r in data.report)


def test_coco_empty_and_malformed(tmp_path):
    (tmp_path / "empty.json").write_text('{"images": [], "annotations": []}')
    assert len(load_coco_json(tmp_path / "empty.json")) == 0
    (tmp_path / "bad.json").write_text('{"images": [\n  {"id": 1, "file_name": "a.png"},\n  {"id": ')
    with pytest.raises(DataError, match=r"bad.json:3:"):
        load_coco_json(tmp_path / "bad.json")
    with pytest.raises(DataError):
        load_coco_json(tmp_path / "nope.json")


def test_augment_keeps_boxes_inside_and_counts_drops():
    data = gen_synthetic(30, seed=1)
    rng = np.random.default_rng(0)
    dropped = 0
    for k in range(len(data)):
        a = augment(data[k], rng, 128, (0.6, 1.5), True)
        assert a.image.shape == (3, 128, 128)
        for b in a.boxes:
            assert 0 <= b.x1 < b.x2 <= 128 and 0 <= b.y1 < b.y2 <= 128
            assert b.width >= 4 and b.height >= 4
        dropped += a.dropped
    s = Sample(np.zeros((128, 128, 3), np.uint8), [GroundTruthBox(0, 126, 10, 140, 40)], 0)
    a = augment(s, np.random.default_rng(0), 128, (1.0, 1.0), False)
    assert a.boxes == [] and a.dropped == 1


def test_augment_flip_mirrors_boxes():
    img = np.zeros((128, 128, 3), np.uint8)
    s = Sample(img, [GroundTruthBox(1, 10, 20, 50, 60)], 0)
    rng = np.random.default_rng(0)
    for _ in range(10):
        a = augment(s, rng, 128, (1.0, 1.0), True)
        assert a.boxes[0] in (GroundTruthBox(1, 10, 20, 50, 60), GroundTruthBox(1, 78, 20, 118, 60))


def test_letterbox_pads_to_divisor():
    image, scale = letterbox(np.zeros((100, 60, 3), np.uint8), 128, 128)
    assert scale == 1.28 and image.shape == (128, 128, 3)


def test_config_overrides_and_errors(tmp_path):
    (tmp_path / "c.yaml").write_text("train:\n  epochs: 3\ndecode:\n  tau: 0.25\n")
    cfg = load_config(tmp_path / "c.yaml", ["--train.lr=1e-3", "--data.aspect_range=[0.5, 2]"])
    assert cfg.train.epochs == 3 and cfg.decode.tau == 0.25 and cfg.train.lr == 1e-3
    assert cfg.data.aspect_range == (0.5, 2.0)
    assert Config.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        load_config(None, ["--train.nope=1"])
    with pytest.raises(ValueError):
        load_config(None, ["--train.epochs=abc"])


def test_defaults_follow_the_recipe_ratios():
    cfg = Config()
    assert cfg.train.lr_drop_factor == 0.1 and cfg.train.lr_drop_fraction == 0.75
    assert cfg.train.jitter == (0.6, 1.5) and cfg.train.crop_size == 128
    assert (cfg.ranges.base_w, cfg.ranges.base_h) == ((24, 48), (24, 48))
    assert (cfg.ranges.lo_mult, cfg.ranges.hi_mult) == (0.8, 1.3)
    assert (cfg.losses.w_heat, cfg.losses.w_offset, cfg.losses.w_center) == (1, 1, 0.1)
