"""Inference over a dataset and VOC-style all-point average precision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .assignment import GroundTruthBox
from .config import Config, heat_classes
from .data import grid_from_config, letterbox, to_input
from .decoder import DecodeParams, Detection, decode, head_output_as_maps, iou


def average_precision(dets: Sequence[tuple[object, Detection]], gts: dict[object, list[GroundTruthBox]],
                      class_id: int, iou_threshold: float = 0.5) -> float | None:
    """AP for one class.  ``dets`` pairs an image id with a detection.

    Detections are matched greedily in score order to the best unmatched
    ground truth of the same image.  Returns None when the class has no
    ground truth at all.
    """
    gt_by_image = {k: [b for b in v if b.class_id == class_id] for k, v in gts.items()}
    n_gt = sum(len(v) for v in gt_by_image.values())
    if n_gt == 0:
        return None
    cls_dets = [(img, d) for img, d in dets if d.class_id == class_id]
    cls_dets.sort(key=lambda p: -p[1].score)
    used = {k: np.zeros(len(v), bool) for k, v in gt_by_image.items()}
    tp = np.zeros(len(cls_dets))
    for r, (img, d) in enumerate(cls_dets):
        cands = gt_by_image.get(img, [])
        best, best_iou = -1, iou_threshold
        for g, b in enumerate(cands):
            if used[img][g]:
                continue
            o = iou(d.box(), b.as_list())
            if o >= best_iou:
                best, best_iou = g, o
        if best >= 0:
            used[img][best] = True
            tp[r] = 1
    if not len(cls_dets):
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(cls_dets) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class APReport:
    per_class: dict[float, dict[int, float]]  # threshold -> class -> AP
    mean_ap: float

    def ap_at(self, threshold: float) -> float:
        vals = list(self.per_class[threshold].values())
        return float(np.mean(vals)) if vals else 0.0

    def to_dict(self) -> dict:
        return {
            "map": self.mean_ap,
            "ap": {f"{t:g}": {str(c): a for c, a in v.items()} for t, v in self.per_class.items()},
            "ap_by_threshold": {f"{t:g}": self.ap_at(t) for t in self.per_class},
        }


def ap_report(dets, gts, num_classes: int, thresholds: Sequence[float] = (0.5,)) -> APReport:
    per = {}
    for t in thresholds:
        per[float(t)] = {}
        for c in range(num_classes):
            ap = average_precision(dets, gts, c, t)
            if ap is not None:
                per[float(t)][c] = ap
    vals = [a for v in per.values() for a in v.values()]
    return APReport(per, float(np.mean(vals)) if vals else 0.0)


def predict(model, dataset, cfg: Config, batch_size: int = 8) -> list[tuple[object, Detection]]:
    """Run the detector on every image; boxes are in original image pixels."""
    grid = grid_from_config(cfg)
    params = DecodeParams.from_config(cfg.decode)
    divisor = cfg.matrix.base_stride * 2 ** (cfg.matrix.n - 1)
    out: list[tuple[object, Detection]] = []
    pending: list = []

    def flush():
        if not pending:
            return
        shapes = sorted({p[1].shape for p in pending})
        for shape in shapes:
            group = [p for p in pending if p[1].shape == shape]
            batch = np.stack([to_input(p[1]) for p in group]).astype(model.dtype)
            head = model(batch)
            specs = model.specs(shape[:2])
            for k, (image_id, _, scale, orig) in enumerate(group):
                dets = decode(head_output_as_maps(head, k), specs, grid, shape[:2], params)
                oh, ow = orig
                for d in dets:
                    box = [min(d.x1 / scale, ow), min(d.y1 / scale, oh), min(d.x2 / scale, ow), min(d.y2 / scale, oh)]
                    out.append((image_id, Detection(d.class_id, d.score, *box, d.layer)))
        pending.clear()

    for k in range(len(dataset)):
        s = dataset[k]
        image, scale = letterbox(s.image, cfg.eval.test_max_side, divisor)
        pending.append((s.image_id, image, scale, s.image.shape[:2]))
        if len(pending) >= batch_size:
            flush()
    flush()
    return out


def evaluate(model, dataset, cfg: Config, thresholds: Sequence[float] | None = None) -> APReport:
    thresholds = tuple(thresholds or cfg.eval.iou_thresholds)
    dets = predict(model, dataset, cfg)
    gts = {dataset.image_id(k): dataset.boxes(k) for k in range(len(dataset))}
    if cfg.matrix.class_agnostic:
        gts = {k: [GroundTruthBox(0, b.x1, b.y1, b.x2, b.y2) for b in v] for k, v in gts.items()}
    return ap_report(dets, gts, heat_classes(cfg), thresholds)
