import math

import numpy as np
import pytest

from layermatrix.assignment import GroundTruthBox, Range2D, assign_box, compute_ranges, render_targets
from layermatrix.backbone import LayerCoord, LayerSpec, layer_specs
from layermatrix.decoder import (CornerCandidate, DecodeParams, Detection, decode, extract_peaks, iou, match_corners,
                                 refine, soft_nms, targets_as_maps)

GRID = compute_ranges(Range2D(24, 48, 24, 48), 5, 2)
SPECS = layer_specs(5, 8, 2, 32, (128, 128))
UNIT = LayerSpec(LayerCoord(1, 1), 1, 1, 64, 64, 1)
WIDE = Range2D(25, 80, 25, 80)


def peaks_oracle(heat, k, thr):
    found = []
    c, h, w = heat.shape
    for ci in range(c):
        for y in range(h):
            for x in range(w):
                v = heat[ci, y, x]
                nb = heat[ci, max(0, y - 1):y + 2, max(0, x - 1):x + 2]
                if v >= thr and v == nb.max():
                    found.append((-v, y, x, ci))
    return [(ci, y, x) for _, y, x, ci in sorted(found)[:k]]


def test_single_peak():
    heat = np.zeros((1, 8, 8))
    heat[0, 3, 5] = 0.9
    (p,) = extract_peaks(heat, 32)
    assert p.cell == (3, 5) and p.score == 0.9


def test_plateau_capped_by_k():
    assert len(extract_peaks(np.full((1, 8, 8), 0.5), 32)) == 32


@pytest.mark.parametrize("seed", range(5))
def test_peaks_match_brute_force(seed):
    heat = np.random.default_rng(seed).uniform(size=(2, 8, 8))
    got = [(p.class_id, *p.cell) for p in extract_peaks(heat, 6, 0.05)]
    assert got == peaks_oracle(heat, 6, 0.05)


def test_refine_examples():
    off = np.zeros((2, 10, 10))
    off[:, 4, 3] = (0.25, -0.5)
    r = refine(CornerCandidate("tl", 0, 1.0, (4, 3)), off)
    assert r.position == (3.25, 3.5)
    off[:, 4, 3] = (0.9, -2.0)  # out-of-range regressions are clamped
    assert refine(CornerCandidate("tl", 0, 1.0, (4, 3)), off).position == (3.5, 3.5)


def cand(kind, pos, ctr, score=1.0):
    return CornerCandidate(kind, 0, score, (int(pos[1]), int(pos[0])), pos, ctr)


def test_match_accepts_consistent_pair():
    (d,) = match_corners([cand("tl", (10.0, 10.0), (25.0, 30.0))], [cand("br", (40.0, 50.0), (25.0, 30.0))], UNIT, WIDE)
    assert d.box() == [10, 10, 40, 50] and d.score == 1.0


def test_match_rejects_far_centres_and_inverted_pairs():
    assert match_corners([cand("tl", (10.0, 10.0), (5.0, 5.0))], [cand("br", (40.0, 50.0), (70.0, 90.0))], UNIT, WIDE) == []
    assert match_corners([cand("tl", (40.0, 50.0), (25.0, 30.0))], [cand("br", (10.0, 10.0), (25.0, 30.0))], UNIT, WIDE) == []


def test_match_score_is_geometric_mean():
    (d,) = match_corners([cand("tl", (10.0, 10.0), (25.0, 30.0), 0.64)],
                         [cand("br", (40.0, 50.0), (25.0, 30.0), 0.25)], UNIT, WIDE)
    assert d.score == pytest.approx(0.4)


def test_match_rejects_size_outside_relaxed_range():
    small = Range2D(24, 48, 24, 48)
    assert match_corners([cand("tl", (0.0, 0.0), (40.0, 40.0))], [cand("br", (80.0, 80.0), (40.0, 40.0))], UNIT, small) == []


def det(score, box, cls=0, layer=(1, 1)):
    return Detection(cls, score, *box, LayerCoord(*layer))


def test_soft_nms_single_pair():
    out = soft_nms([det(0.9, (0, 0, 10, 10)), det(0.8, (0, 0, 10, 10))])
    assert [d.score for d in out] == [0.9, pytest.approx(0.8 * math.exp(-2), abs=1e-6)]
    assert out[1].score == pytest.approx(0.10827, abs=1e-5)


def test_soft_nms_disjoint_and_cross_class_untouched():
    out = soft_nms([det(0.9, (0, 0, 10, 10)), det(0.8, (50, 50, 60, 60)), det(0.7, (0, 0, 10, 10), cls=1)])
    assert sorted(d.score for d in out) == [0.7, 0.8, 0.9]


def test_soft_nms_is_order_independent():
    rng = np.random.default_rng(0)
    dets = []
    for _ in range(30):
        x, y = rng.uniform(0, 50, 2)
        dets.append(det(float(rng.uniform(0.1, 1)), (x, y, x + rng.uniform(5, 30), y + rng.uniform(5, 30)), int(rng.integers(2))))
    ref = soft_nms(dets)
    for _ in range(3):
        assert soft_nms([dets[k] for k in rng.permutation(len(dets))]) == ref


def empty_maps():
    out = {}
    for s in SPECS:
        z = lambda c: np.zeros((c, s.feat_h, s.feat_w))
        out[s.coord] = {"tl_heat": z(3), "br_heat": z(3), "tl_off": z(2), "br_off": z(2), "tl_ctr": z(2), "br_ctr": z(2)}
    return out


def test_zero_maps_give_nothing():
    assert decode(empty_maps(), SPECS, GRID, (128, 128)) == []


def roundtrip(boxes, floor=0.5, size=(128, 128), specs=SPECS):
    t = render_targets(boxes, specs, GRID, 3)
    return decode(targets_as_maps(t), specs, GRID, size, DecodeParams(score_floor=floor)), t


def test_three_disjoint_boxes_roundtrip_exactly():
    boxes = [GroundTruthBox(0, 4, 6, 34, 40), GroundTruthBox(1, 70, 8, 118, 40), GroundTruthBox(2, 10, 60, 60, 110)]
    dets, t = roundtrip(boxes)
    assert not t.skipped
    assert len(dets) == 3
    for b in boxes:
        assert max(iou(b.as_list(), d.box()) for d in dets if d.class_id == b.class_id) == 1.0


def test_box_in_several_layers_survives_once():
    box = GroundTruthBox(0, 10, 10, 50, 50)  # 40 x 40
    layers = assign_box(box, GRID)
    assert len(layers) == 4
    dets, _ = roundtrip([box])
    assert len(dets) == 1 and dets[0].score == 1.0
    assert dets[0].score > math.exp(-2)
    loose, _ = roundtrip([box], floor=0.001)
    assert loose[0].score == 1.0 and loose[1].score == pytest.approx(math.exp(-2))


def test_five_boxes_across_three_layers_at_256():
    specs = layer_specs(5, 8, 2, 32, (256, 256))
    boxes = [GroundTruthBox(0, 8, 8, 38, 38), GroundTruthBox(1, 60, 8, 180, 50), GroundTruthBox(2, 200, 100, 240, 220),
             GroundTruthBox(0, 8, 100, 100, 190), GroundTruthBox(1, 110, 70, 170, 100)]
    dets, t = roundtrip(boxes, size=(256, 256), specs=specs)
    assert not t.skipped
    assert len({c for b in boxes for c in assign_box(b, GRID)}) >= 3
    for b in boxes:
        assert max(iou(b.as_list(), d.box()) for d in dets if d.class_id == b.class_id) >= 0.99


def test_decode_is_deterministic_and_layer_consistent():
    rng = np.random.default_rng(5)
    boxes = [GroundTruthBox(0, 4, 6, 34, 40), GroundTruthBox(0, 40, 50, 100, 90), GroundTruthBox(1, 70, 8, 118, 40)]
    maps = targets_as_maps(render_targets(boxes, SPECS, GRID, 3))
    for m in maps.values():
        for k, v in m.items():
            if "heat" in k:
                np.clip(v + rng.uniform(0, 0.4, v.shape), 0, 1, out=v)
            else:
                v += rng.normal(0, 0.2, v.shape)
    params = DecodeParams()
    a = decode(maps, SPECS, GRID, (128, 128), params)
    b = decode(maps, SPECS, GRID, (128, 128), params)
    assert a == b and 0 < len(a) <= 100
    for d in a:
        assert GRID[d.layer].contains(d.width, d.height)
        assert 0 <= d.x1 < d.x2 <= 128 and 0 <= d.y1 < d.y2 <= 128
    assert [d.score for d in a] == sorted((d.score for d in a), reverse=True)


def test_decode_layer_mismatch_raises():
    maps = empty_maps()
    maps.pop(LayerCoord(3, 3))
    with pytest.raises(ValueError):
        decode(maps, SPECS, GRID, (128, 128))
