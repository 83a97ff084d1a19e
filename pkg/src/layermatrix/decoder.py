"""From per-layer corner maps to final detections."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .assignment import Range2D, RangeGrid, TargetMaps
from .backbone import LayerCoord, LayerSpec
from .tensor import Tensor, max_pool_3x3_stride1

KINDS = ("tl", "br")


@dataclass(frozen=True)
class CornerCandidate:
    kind: str  # "tl" or "br"
    class_id: int
    score: float
    cell: tuple[int, int]  # (y, x)
    position: tuple[float, float] = (0.0, 0.0)  # refined (x, y) in feature cells
    center: tuple[float, float] = (0.0, 0.0)  # regressed absolute centre (x, y) in feature cells


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    x1: float
    y1: float
    x2: float
    y2: float
    layer: LayerCoord

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def box(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def to_json(self, image_id=None) -> dict:
        return {
            "image_id": image_id,
            "class": self.class_id,
            "score": self.score,
            "box": self.box(),
            "layer": [self.layer.i, self.layer.j],
        }


@dataclass
class DecodeParams:
    top_k: int = 32
    tau: float = 0.2
    sigma: float = 0.5
    peak_threshold: float = 0.05
    score_floor: float = 0.001
    max_detections: int = 100

    @classmethod
    def from_config(cls, cfg) -> "DecodeParams":
        return cls(cfg.top_k, cfg.tau, cfg.sigma, cfg.peak_threshold, cfg.score_floor, cfg.max_detections)


# One image: LayerCoord -> {"tl_heat": [K,H,W], "br_heat", "tl_off": [2,H,W], ...}
LayerMaps = Mapping[str, np.ndarray]


def extract_peaks(heat: np.ndarray, k: int, threshold: float = 0.05, kind: str = "tl") -> list[CornerCandidate]:
    """Top-k cells of a [K, H, W] heatmap that equal their 3x3 neighbourhood max.

    Plateaus keep every tied cell; ties are ordered by (y, x, class).
    """
    heat = np.asarray(heat)
    if heat.ndim == 2:
        heat = heat[None]
    pooled = max_pool_3x3_stride1(Tensor(heat)).data
    keep = (pooled == heat) & (heat >= threshold)
    cls, ys, xs = np.nonzero(keep)
    scores = heat[cls, ys, xs]
    order = np.lexsort((cls, xs, ys, -scores))[:k]
    return [CornerCandidate(kind, int(cls[o]), float(scores[o]), (int(ys[o]), int(xs[o]))) for o in order]


def refine(cand: CornerCandidate, offsets: np.ndarray, centers: np.ndarray | None = None) -> CornerCandidate:
    """Add the (clamped) sub-cell offset and attach the regressed centre."""
    y, x = cand.cell
    ox, oy = np.clip(offsets[:, y, x], -0.5, 0.5)
    px, py = x + float(ox), y + float(oy)
    if centers is None:
        cx, cy = px, py
    else:
        cx, cy = px + float(centers[0, y, x]), py + float(centers[1, y, x])
    return CornerCandidate(cand.kind, cand.class_id, cand.score, cand.cell, (px, py), (cx, cy))


def match_corners(tls: Sequence[CornerCandidate], brs: Sequence[CornerCandidate], spec: LayerSpec,
                  rng: Range2D, tau: float = 0.2) -> list[Detection]:
    """Pair corners of one layer and class by centre consistency.

    A pair is kept when the top-left lies strictly above-left of the
    bottom-right, the implied box fits the layer's relaxed range, and both
    regressed centres are within ``tau`` times the box extent (per axis) of
    the geometric centre.
    """
    if not tls or not brs:
        return []
    tl_pos = np.array([c.position for c in tls])
    br_pos = np.array([c.position for c in brs])
    tl_ctr = np.array([c.center for c in tls])
    br_ctr = np.array([c.center for c in brs])
    tl_s = np.array([c.score for c in tls])
    br_s = np.array([c.score for c in brs])
    ext = br_pos[None, :, :] - tl_pos[:, None, :]  # [T, B, 2] in cells
    geo = (br_pos[None, :, :] + tl_pos[:, None, :]) / 2
    w_px = ext[..., 0] * spec.stride_w
    h_px = ext[..., 1] * spec.stride_h
    (wl, wh), (hl, hh) = rng.relaxed_w, rng.relaxed_h
    ok = (ext[..., 0] > 0) & (ext[..., 1] > 0)
    ok &= (w_px >= wl) & (w_px <= wh) & (h_px >= hl) & (h_px <= hh)
    tol = tau * np.abs(ext)
    ok &= (np.abs(geo - tl_ctr[:, None, :]) <= tol).all(-1)
    ok &= (np.abs(geo - br_ctr[None, :, :]) <= tol).all(-1)
    dets = []
    for a, b in zip(*np.nonzero(ok)):
        score = math.sqrt(tl_s[a] * br_s[b])
        dets.append(Detection(
            tls[a].class_id, score,
            float(tl_pos[a, 0] * spec.stride_w), float(tl_pos[a, 1] * spec.stride_h),
            float(br_pos[b, 0] * spec.stride_w), float(br_pos[b, 1] * spec.stride_h),
            spec.coord,
        ))
    return dets


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _iou_many(box: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    iw = np.clip(np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0]), 0, None)
    ih = np.clip(np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1]), 0, None)
    inter = iw * ih
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return inter / (area + areas - inter)


def _rank_key(d: Detection):
    return (-d.score, d.y1, d.x1, d.y2, d.x2, d.layer.j, d.layer.i)


def soft_nms(dets: Sequence[Detection], sigma: float = 0.5, score_floor: float = 0.001) -> list[Detection]:
    """Gaussian soft-NMS, per class: scores decay by exp(-IoU^2 / sigma)."""
    kept: list[Detection] = []
    for cls in sorted({d.class_id for d in dets}):
        remaining = sorted((d for d in dets if d.class_id == cls), key=_rank_key)
        boxes = np.array([d.box() for d in remaining], dtype=np.float64).reshape(-1, 4)
        scores = np.array([d.score for d in remaining], dtype=np.float64)
        alive = list(range(len(remaining)))
        while alive:
            best = max(alive, key=lambda k: (scores[k], -k))
            alive.remove(best)
            d = remaining[best]
            kept.append(Detection(d.class_id, float(scores[best]), d.x1, d.y1, d.x2, d.y2, d.layer))
            if not alive:
                break
            idx = np.array(alive)
            overlap = _iou_many(boxes[best], boxes[idx])
            scores[idx] *= np.exp(-(overlap ** 2) / sigma)
            alive = [k for k in alive if scores[k] >= score_floor]
    return sorted(kept, key=_rank_key)


def decode_layer(maps: LayerMaps, spec: LayerSpec, rng: Range2D, params: DecodeParams) -> list[Detection]:
    cands = {}
    for kind in KINDS:
        peaks = extract_peaks(maps[f"{kind}_heat"], params.top_k, params.peak_threshold, kind)
        cands[kind] = [refine(p, maps[f"{kind}_off"], maps[f"{kind}_ctr"]) for p in peaks]
    dets = []
    for cls in sorted({c.class_id for c in cands["tl"]} & {c.class_id for c in cands["br"]}):
        tls = [c for c in cands["tl"] if c.class_id == cls]
        brs = [c for c in cands["br"] if c.class_id == cls]
        dets.extend(match_corners(tls, brs, spec, rng, params.tau))
    return dets


def decode(out: Mapping[LayerCoord, LayerMaps], specs: Sequence[LayerSpec], grid: RangeGrid,
           image_size: tuple[int, int], params: DecodeParams | None = None) -> list[Detection]:
    """Detections for one image, in input-image pixels, best first.

    ``image_size`` is (height, width).  Boxes are clipped to the image; a
    clipped box that no longer fits its source layer's relaxed range is dropped.
    """
    params = params or DecodeParams()
    by_coord = {s.coord: s for s in specs}
    if set(out) != set(by_coord):
        raise ValueError("decode: output layers and layer specs differ")
    dets: list[Detection] = []
    for coord, maps in out.items():
        dets.extend(decode_layer(maps, by_coord[coord], grid[coord], params))
    dets = soft_nms(dets, params.sigma, params.score_floor)
    h, w = image_size
    final = []
    for d in dets:
        x1, x2 = min(max(d.x1, 0.0), w), min(max(d.x2, 0.0), w)
        y1, y2 = min(max(d.y1, 0.0), h), min(max(d.y2, 0.0), h)
        if x2 <= x1 or y2 <= y1 or not grid[d.layer].contains(x2 - x1, y2 - y1):
            continue
        final.append(Detection(d.class_id, d.score, x1, y1, x2, y2, d.layer))
    return final[: params.max_detections]


def targets_as_maps(targets: TargetMaps, index: int | None = None) -> dict[LayerCoord, dict[str, np.ndarray]]:
    """Use rendered ground truth as if it were network output."""
    out = {}
    for coord, t in targets.layers.items():
        out[coord] = {}
        for name in ("tl_heat", "br_heat", "tl_off", "br_off", "tl_ctr", "br_ctr"):
            arr = getattr(t, name)
            out[coord][name] = arr if index is None else arr[index]
    return out


def head_output_as_maps(out, index: int = 0) -> dict[LayerCoord, dict[str, np.ndarray]]:
    """Slice one image out of a batched head output."""
    return {coord: {name: getattr(o, name).data[index] for name in o.FIELDS} for coord, o in out.items()}
