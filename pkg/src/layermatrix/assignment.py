"""Layer ranges, box-to-layer assignment, and training-target rendering."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .backbone import LayerCoord, LayerSpec, live_coords


@dataclass(frozen=True)
class Range2D:
    w_min: float
    w_max: float
    h_min: float
    h_max: float
    lo_mult: float = 0.8
    hi_mult: float = 1.3

    def __post_init__(self):
        if not (0 < self.w_min < self.w_max and 0 < self.h_min < self.h_max):
            raise ValueError(f"invalid range {self}")
        if not (self.lo_mult < 1 < self.hi_mult):
            raise ValueError("relaxation needs lo_mult < 1 < hi_mult")

    @property
    def relaxed_w(self) -> tuple[float, float]:
        return self.w_min * self.lo_mult, self.w_max * self.hi_mult

    @property
    def relaxed_h(self) -> tuple[float, float]:
        return self.h_min * self.lo_mult, self.h_max * self.hi_mult

    def contains(self, w: float, h: float, relaxed: bool = True) -> bool:
        if relaxed:
            (wl, wh), (hl, hh) = self.relaxed_w, self.relaxed_h
        else:
            wl, wh, hl, hh = self.w_min, self.w_max, self.h_min, self.h_max
        return wl <= w <= wh and hl <= h <= hh

    def scaled(self, fw: float, fh: float) -> "Range2D":
        return Range2D(self.w_min * fw, self.w_max * fw, self.h_min * fh, self.h_max * fh,
                       self.lo_mult, self.hi_mult)

    def log_distance(self, w: float, h: float) -> float:
        """L1 distance in log space from (w, h) to the geometric range centre."""
        cw = math.sqrt(self.w_min * self.w_max)
        ch = math.sqrt(self.h_min * self.h_max)
        return abs(math.log(w / cw)) + abs(math.log(h / ch))


@dataclass
class RangeGrid:
    base: Range2D
    ranges: dict[LayerCoord, Range2D]

    def __getitem__(self, coord) -> Range2D:
        return self.ranges[LayerCoord(*coord)]

    def __iter__(self):
        return iter(self.ranges)

    @property
    def coords(self) -> list[LayerCoord]:
        return list(self.ranges)

    def envelope(self) -> tuple[float, float]:
        """Smallest and largest side admitted by any relaxed range."""
        lo = min(min(r.relaxed_w[0], r.relaxed_h[0]) for r in self.ranges.values())
        hi = max(max(r.relaxed_w[1], r.relaxed_h[1]) for r in self.ranges.values())
        return lo, hi


def compute_ranges(base: Range2D, n: int = 5, prune_band: int = 2) -> RangeGrid:
    """Double the base range once per step right (width) or down (height)."""
    ranges = {c: base.scaled(2.0 ** (c.i - 1), 2.0 ** (c.j - 1)) for c in live_coords(n, prune_band)}
    return RangeGrid(base, ranges)


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def assign_box(box: GroundTruthBox, grid: RangeGrid) -> set[LayerCoord]:
    """Every live layer whose relaxed range holds the box's width and height."""
    return {c for c, r in grid.ranges.items() if r.contains(box.width, box.height)}


def nearest_layer(box: GroundTruthBox, grid: RangeGrid) -> LayerCoord:
    return min(grid.ranges, key=lambda c: (grid.ranges[c].log_distance(box.width, box.height), c.j, c.i))


def assign_with_clamp(box: GroundTruthBox, grid: RangeGrid, mode: str = "all") -> tuple[list[LayerCoord], bool]:
    """Assigned layers in grid order, plus whether the box had to be clamped.

    Boxes outside every relaxed range go to the nearest live layer by
    log-size distance (tiny boxes land on (1,1), huge ones on (n,n)).
    """
    coords = assign_box(box, grid)
    if not coords:
        return [nearest_layer(box, grid)], True
    if mode == "best":
        return [min(coords, key=lambda c: (grid.ranges[c].log_distance(box.width, box.height), c.j, c.i))], False
    if mode != "all":
        raise ValueError(f"unknown assignment mode '{mode}'")
    return [c for c in grid.ranges if c in coords], False


def gaussian_radius(height: float, width: float, min_overlap: float = 0.3) -> float:
    """Corner-jitter radius keeping IoU >= ``min_overlap`` (CornerNet convention)."""
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2
    a2 = 4.0
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def draw_gaussian(heat: np.ndarray, cx: int, cy: int, radius: int) -> None:
    """Max-splat an unnormalized Gaussian with peak exactly 1.0 at (cx, cy)."""
    diameter = 2 * radius + 1
    sigma = diameter / 6
    ys, xs = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    g = np.exp(-(xs * xs + ys * ys) / (2 * sigma * sigma))
    g[radius, radius] = 1.0
    h, w = heat.shape
    left, right = min(cx, radius), min(w - cx, radius + 1)
    top, bottom = min(cy, radius), min(h - cy, radius + 1)
    region = heat[cy - top:cy + bottom, cx - left:cx + right]
    patch = g[radius - top:radius + bottom, radius - left:radius + right]
    np.maximum(region, patch.astype(heat.dtype), out=region)


def corner_cell(coord: float, stride: int) -> tuple[int, float]:
    """Nearest feature cell and the residual offset, in [-0.5, 0.5)."""
    f = coord / stride
    cell = math.floor(f + 0.5)
    return cell, f - cell


@dataclass
class LayerTargets:
    tl_heat: np.ndarray  # [K, H, W]
    br_heat: np.ndarray
    tl_off: np.ndarray  # [2, H, W], channels (x, y)
    br_off: np.ndarray
    tl_ctr: np.ndarray  # [2, H, W], centre minus corner, in cells
    br_ctr: np.ndarray
    tl_mask: np.ndarray  # [H, W] bool
    br_mask: np.ndarray

    FIELDS = ("tl_heat", "br_heat", "tl_off", "br_off", "tl_ctr", "br_ctr", "tl_mask", "br_mask")

    @classmethod
    def empty(cls, spec: LayerSpec, num_classes: int, dtype=np.float32) -> "LayerTargets":
        h, w = spec.feat_h, spec.feat_w
        return cls(
            np.zeros((num_classes, h, w), dtype), np.zeros((num_classes, h, w), dtype),
            np.zeros((2, h, w), dtype), np.zeros((2, h, w), dtype),
            np.zeros((2, h, w), dtype), np.zeros((2, h, w), dtype),
            np.zeros((h, w), bool), np.zeros((h, w), bool),
        )


@dataclass
class SkippedCorner:
    box_index: int
    coord: LayerCoord
    reason: str


@dataclass
class TargetMaps:
    layers: dict[LayerCoord, LayerTargets]
    skipped: list[SkippedCorner] = field(default_factory=list)
    clamped: int = 0

    def __getitem__(self, coord) -> LayerTargets:
        return self.layers[LayerCoord(*coord)]

    @property
    def coords(self) -> list[LayerCoord]:
        return list(self.layers)


def render_targets(boxes: Sequence[GroundTruthBox], specs: Sequence[LayerSpec], grid: RangeGrid,
                   num_classes: int, mode: str = "all", min_overlap: float = 0.3,
                   dtype=np.float32) -> TargetMaps:
    """Per-layer corner heatmaps, sub-cell offsets and centre displacements.

    With ``num_classes == 1`` every box lands in the single (class-agnostic)
    heatmap channel.
    """
    by_coord = {s.coord: s for s in specs}
    layers = {s.coord: LayerTargets.empty(s, num_classes, dtype) for s in specs}
    out = TargetMaps(layers)
    for k, box in enumerate(boxes):
        coords, clamped = assign_with_clamp(box, grid, mode)
        out.clamped += clamped
        cx, cy = box.center
        channel = 0 if num_classes == 1 else box.class_id
        for coord in coords:
            spec = by_coord.get(coord)
            if spec is None:
                out.skipped.append(SkippedCorner(k, coord, "layer not rendered"))
                continue
            t = layers[coord]
            sw, sh = spec.stride_w, spec.stride_h
            tlx, tlox = corner_cell(box.x1, sw)
            tly, tloy = corner_cell(box.y1, sh)
            brx, brox = corner_cell(box.x2, sw)
            bry, broy = corner_cell(box.y2, sh)
            inside = (0 <= tlx < spec.feat_w and 0 <= tly < spec.feat_h
                      and 0 <= brx < spec.feat_w and 0 <= bry < spec.feat_h)
            if not inside:
                out.skipped.append(SkippedCorner(k, coord, "corner outside feature map"))
                continue
            radius = max(0, int(gaussian_radius(box.height / sh, box.width / sw, min_overlap)))
            draw_gaussian(t.tl_heat[channel], tlx, tly, radius)
            draw_gaussian(t.br_heat[channel], brx, bry, radius)
            t.tl_off[:, tly, tlx] = (tlox, tloy)
            t.br_off[:, bry, brx] = (brox, broy)
            t.tl_ctr[:, tly, tlx] = ((cx - box.x1) / sw, (cy - box.y1) / sh)
            t.br_ctr[:, bry, brx] = ((cx - box.x2) / sw, (cy - box.y2) / sh)
            t.tl_mask[tly, tlx] = True
            t.br_mask[bry, brx] = True
    return out


def corner_collisions(boxes: Sequence[GroundTruthBox], specs: Sequence[LayerSpec], grid: RangeGrid,
                      mode: str = "all") -> int:
    """Number of (layer, kind, cell) slots claimed by more than one box."""
    by_coord = {s.coord: s for s in specs}
    seen: Counter = Counter()
    for box in boxes:
        coords, _ = assign_with_clamp(box, grid, mode)
        for coord in coords:
            spec = by_coord.get(coord)
            if spec is None:
                continue
            tl = (corner_cell(box.x1, spec.stride_w)[0], corner_cell(box.y1, spec.stride_h)[0])
            br = (corner_cell(box.x2, spec.stride_w)[0], corner_cell(box.y2, spec.stride_h)[0])
            seen[(coord, "tl", tl)] += 1
            seen[(coord, "br", br)] += 1
    return sum(1 for v in seen.values() if v > 1)


def stack_targets(maps: Sequence[TargetMaps]) -> TargetMaps:
    """Stack single-image targets along a new leading batch axis."""
    coords = maps[0].coords
    layers = {}
    for c in coords:
        fields = {name: np.stack([getattr(m.layers[c], name) for m in maps]) for name in LayerTargets.FIELDS}
        layers[c] = LayerTargets(**fields)
    return TargetMaps(layers, [s for m in maps for s in m.skipped], sum(m.clamped for m in maps))


@dataclass
class LayerStats:
    counts: dict[LayerCoord, int]
    multiplicity: dict[int, int]
    out_of_range: int
    total_boxes: int

    def to_dict(self) -> dict:
        return {
            "layers": [{"layer": [c.i, c.j], "boxes": n} for c, n in self.counts.items()],
            "multiplicity": {str(k): v for k, v in sorted(self.multiplicity.items())},
            "out_of_range": self.out_of_range,
            "total_boxes": self.total_boxes,
        }

    def table(self, n: int) -> str:
        lines = ["per-layer box counts (rows: height exponent j, columns: width exponent i; '-' = pruned)"]
        lines.append("      " + "".join(f"{'i=' + str(i):>8}" for i in range(1, n + 1)))
        for j in range(1, n + 1):
            row = "".join(f"{self.counts[LayerCoord(i, j)]:>8}" if LayerCoord(i, j) in self.counts else f"{'-':>8}"
                          for i in range(1, n + 1))
            lines.append(f"j={j:<4}" + row)
        lines.append(f"live layers: {len(self.counts)}   boxes: {self.total_boxes}   "
                     f"out of range (clamped): {self.out_of_range}")
        lines.append("layers per box: " + ", ".join(f"{k}: {v}" for k, v in sorted(self.multiplicity.items())))
        return "\n".join(lines)


def layer_stats(boxes: Iterable[GroundTruthBox], grid: RangeGrid, mode: str = "all") -> LayerStats:
    counts = {c: 0 for c in grid.ranges}
    multiplicity: Counter = Counter()
    out_of_range = total = 0
    for box in boxes:
        coords, clamped = assign_with_clamp(box, grid, mode)
        total += 1
        out_of_range += clamped
        multiplicity[0 if clamped else len(coords)] += 1
        for c in coords:
            counts[c] += 1
    return LayerStats(counts, dict(multiplicity), out_of_range, total)
