"""Shared output sub-network and the three training losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assignment import TargetMaps
from .backbone import Conv, LayerCoord, LayerMatrix, conv1x1, conv3x3
from .tensor import Tensor, make, relu, sigmoid

PROB_EPS = 1e-7
HEAT_PRIOR = 0.1


@dataclass
class LayerOutput:
    tl_heat: Tensor  # [N, K, H, W], post-sigmoid
    br_heat: Tensor
    tl_off: Tensor  # [N, 2, H, W]
    br_off: Tensor
    tl_ctr: Tensor  # [N, 2, H, W]
    br_ctr: Tensor

    FIELDS = ("tl_heat", "br_heat", "tl_off", "br_off", "tl_ctr", "br_ctr")


HeadOutput = dict  # LayerCoord -> LayerOutput


class Head:
    """Two 3x3 conv + ReLU blocks and a 1x1 projection, applied to every layer.

    There is deliberately no pooling of any kind in this path.
    """

    def __init__(self, channels: int = 32, num_classes: int = 3, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(2)
        self.num_classes = num_classes
        self.conv1 = Conv(conv3x3(channels, channels), rng, dtype, "head.conv1")
        self.conv2 = Conv(conv3x3(channels, channels), rng, dtype, "head.conv2")
        self.out = Conv(conv1x1(channels, 2 * num_classes + 8), rng, dtype, "head.out")
        self.out.weight.data *= 0.1
        self.out.bias.data[: 2 * num_classes] = -np.log((1 - HEAT_PRIOR) / HEAT_PRIOR)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.conv1.parameters(), **self.conv2.parameters(), **self.out.parameters()}

    def __call__(self, feature: Tensor) -> LayerOutput:
        x = relu(self.conv1(feature))
        x = relu(self.conv2(x))
        y = self.out(x)
        k = self.num_classes
        return LayerOutput(
            tl_heat=sigmoid(y[:, 0:k]),
            br_heat=sigmoid(y[:, k:2 * k]),
            tl_off=y[:, 2 * k:2 * k + 2],
            br_off=y[:, 2 * k + 2:2 * k + 4],
            tl_ctr=y[:, 2 * k + 4:2 * k + 6],
            br_ctr=y[:, 2 * k + 6:2 * k + 8],
        )


def head_forward(matrix: LayerMatrix, head: Head) -> HeadOutput:
    return {coord: head(feat) for coord, feat in matrix.layers.items()}


def _focal_terms(p: np.ndarray, t: np.ndarray, alpha: float, beta: float):
    pos = t == 1.0
    pc = np.clip(p, PROB_EPS, 1 - PROB_EPS)
    live = (p == pc)
    one_m = 1.0 - pc
    neg_w = (1.0 - t) ** beta
    log_p = np.log(pc)
    log_1mp = np.log(one_m)
    loss = np.where(pos, -(one_m ** alpha) * log_p, -neg_w * pc ** alpha * log_1mp)
    d_pos = alpha * one_m ** (alpha - 1) * log_p - one_m ** alpha / pc
    d_neg = -neg_w * (alpha * pc ** (alpha - 1) * log_1mp - pc ** alpha / one_m)
    dloss = np.where(pos, d_pos, d_neg) * live
    return loss, dloss, int(pos.sum())


def focal_loss(pred: Tensor, target: np.ndarray, alpha: float = 2.0, beta: float = 4.0,
               normalizer: float | None = None) -> Tensor:
    """Penalty-reduced focal loss over post-sigmoid heatmaps.

    Cells whose target is exactly 1.0 are positives.  The summed loss is
    divided by ``normalizer`` or, by default, the positive count (at least 1).
    """
    target = np.asarray(target)
    if target.shape != pred.shape:
        raise ValueError(f"focal_loss: target shape {target.shape} != prediction shape {pred.shape}")
    if target.size and (target.min() < 0 or target.max() > 1):
        raise ValueError("focal_loss: targets must lie in [0, 1]")
    loss, dloss, npos = _focal_terms(pred.data, target, alpha, beta)
    norm = float(normalizer) if normalizer is not None else float(max(npos, 1))
    value = np.asarray(loss.sum() / norm, dtype=pred.dtype)
    return make(value, (pred,), lambda g: ((g * dloss / norm).astype(pred.dtype),), "focal_loss")


def smooth_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray, normalizer: float | None = None) -> Tensor:
    """Smooth-L1 summed over channels and averaged over masked cells.

    ``pred``/``target`` are [N, C, H, W] (or [C, H, W]); ``mask`` drops the
    channel axis.  An empty mask gives exactly zero.
    """
    target = np.asarray(target)
    mask = np.asarray(mask, dtype=bool)
    if target.shape != pred.shape:
        raise ValueError(f"smooth_l1: target shape {target.shape} != prediction shape {pred.shape}")
    m = np.expand_dims(mask, -3)
    if np.broadcast_shapes(m.shape, pred.shape) != pred.shape:
        raise ValueError(f"smooth_l1: mask shape {mask.shape} does not fit prediction {pred.shape}")
    count = int(mask.sum())
    norm = float(normalizer) if normalizer is not None else float(max(count, 1))
    d = (pred.data - target) * m
    ad = np.abs(d)
    small = ad < 1.0
    loss = np.where(small, 0.5 * d * d, ad - 0.5) * m
    dloss = np.where(small, d, np.sign(d)) * m
    value = np.asarray(loss.sum() / norm, dtype=pred.dtype)
    return make(value, (pred,), lambda g: ((g * dloss / norm).astype(pred.dtype),), "smooth_l1")


@dataclass
class LossWeights:
    heat: float = 1.0
    offset: float = 1.0
    center: float = 0.1
    alpha: float = 2.0
    beta: float = 4.0


@dataclass
class LossBreakdown:
    total: Tensor
    heat_loss: float
    offset_loss: float
    center_loss: float
    per_layer: dict[LayerCoord, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, float]:
        return {
            "total": float(self.total.data),
            "heat": self.heat_loss,
            "offset": self.offset_loss,
            "center": self.center_loss,
        }


def total_loss(out: HeadOutput, targets: TargetMaps, weights: LossWeights | None = None) -> LossBreakdown:
    """Weighted heat + offset + centre loss over all layers.

    Focal terms are normalized by the number of positive corners over all
    layers, regression terms by the number of masked corner cells, so the
    per-layer contributions add up to the totals.
    """
    weights = weights or LossWeights()
    if set(out) != set(targets.layers):
        raise ValueError(f"layer sets differ: outputs {sorted(out)} vs targets {sorted(targets.layers)}")
    n_tl = max(1, sum(int((t.tl_heat == 1.0).sum()) for t in targets.layers.values()))
    n_br = max(1, sum(int((t.br_heat == 1.0).sum()) for t in targets.layers.values()))
    m_tl = max(1, sum(int(t.tl_mask.sum()) for t in targets.layers.values()))
    m_br = max(1, sum(int(t.br_mask.sum()) for t in targets.layers.values()))
    total = None
    sums = {"heat": 0.0, "offset": 0.0, "center": 0.0}
    per_layer = {}
    for coord, o in out.items():
        t = targets.layers[coord]
        heat = focal_loss(o.tl_heat, t.tl_heat, weights.alpha, weights.beta, n_tl) + \
            focal_loss(o.br_heat, t.br_heat, weights.alpha, weights.beta, n_br)
        off = smooth_l1(o.tl_off, t.tl_off, t.tl_mask, m_tl) + smooth_l1(o.br_off, t.br_off, t.br_mask, m_br)
        ctr = smooth_l1(o.tl_ctr, t.tl_ctr, t.tl_mask, m_tl) + smooth_l1(o.br_ctr, t.br_ctr, t.br_mask, m_br)
        layer_total = heat * weights.heat + off * weights.offset + ctr * weights.center
        total = layer_total if total is None else total + layer_total
        entry = {"heat": float(heat.data), "offset": float(off.data), "center": float(ctr.data)}
        per_layer[coord] = entry
        for k in sums:
            sums[k] += entry[k]
    return LossBreakdown(total, sums["heat"], sums["offset"], sums["center"], per_layer)
