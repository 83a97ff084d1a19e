"""Diagonal feature pyramid and its expansion into the matrix of layers.

Coordinates follow ``LayerCoord(i, j)``: ``i`` is the width-downsampling
exponent (column), ``j`` the height-downsampling exponent (row).  Layer
``(i, j)`` has a stride of ``base_stride * 2**(i-1)`` horizontally and
``base_stride * 2**(j-1)`` vertically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .tensor import ConvSpec, ShapeError, Tensor, conv2d, relu


class LayerCoord(NamedTuple):
    i: int  # width exponent (column)
    j: int  # height exponent (row)

    def __str__(self) -> str:
        return f"({self.i},{self.j})"


@dataclass(frozen=True)
class LayerSpec:
    coord: LayerCoord
    stride_w: int
    stride_h: int
    feat_w: int
    feat_h: int
    channels: int

    @property
    def aspect(self) -> float:
        """Width:height ratio of a feature cell's footprint."""
        return self.stride_w / self.stride_h


def live_coords(n: int, prune_band: int) -> list[LayerCoord]:
    """Matrix coordinates kept after pruning, row-major with ``j`` outer."""
    return [LayerCoord(i, j) for j in range(1, n + 1) for i in range(1, n + 1) if abs(i - j) <= prune_band]


def layer_specs(n: int = 5, base_stride: int = 8, prune_band: int = 2, channels: int = 32,
                image_size: tuple[int, int] | None = None) -> list[LayerSpec]:
    """Specs for every live layer.  ``image_size`` is (height, width); when
    omitted, feature extents are those of an input of ``base_stride * 2**(n-1)``
    pixels per side (smallest map 1x1)."""
    if image_size is None:
        side = base_stride * 2 ** (n - 1)
        image_size = (side, side)
    h, w = image_size
    specs = []
    for c in live_coords(n, prune_band):
        sw = base_stride * 2 ** (c.i - 1)
        sh = base_stride * 2 ** (c.j - 1)
        specs.append(LayerSpec(c, sw, sh, w // sw, h // sh, channels))
    return specs


def _he_init(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv:
    """A convolution with its own weight and bias tensors."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32, name: str = "conv"):
        self.spec = spec
        self.weight = Tensor(_he_init(rng, spec.weight_shape, dtype), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec)

    def parameters(self) -> dict[str, Tensor]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}


def conv3x3(cin: int, cout: int, stride: tuple[int, int] = (1, 1)) -> ConvSpec:
    return ConvSpec(cin, cout, 3, 3, stride[0], stride[1], 1, 1)


def conv1x1(cin: int, cout: int) -> ConvSpec:
    return ConvSpec(cin, cout, 1, 1, 1, 1, 0, 0)


class Backbone:
    """Strided-conv pyramid with 1x1 lateral projections to a shared width.

    A stem of stride-2 convolutions reaches ``base_stride / 2``; each of the
    ``n`` stages then halves both extents once and emits one diagonal level.
    """

    def __init__(self, n: int = 5, base_stride: int = 8, channels: int = 32,
                 stem_widths: tuple[int, ...] = (16, 32), stage_widths: tuple[int, ...] = (32, 48, 64, 64, 64),
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if base_stride < 2 or base_stride & (base_stride - 1):
            raise ValueError(f"base_stride must be a power of two >= 2, got {base_stride}")
        rng = rng or np.random.default_rng(0)
        self.n = n
        self.base_stride = base_stride
        self.channels = channels
        n_stem = int(math.log2(base_stride)) - 1
        widths = list(stem_widths[:n_stem]) + [stem_widths[-1]] * max(0, n_stem - len(stem_widths))
        stages = list(stage_widths[:n]) + [stage_widths[-1]] * max(0, n - len(stage_widths))
        self.stem: list[Conv] = []
        cin = 3
        for k, cout in enumerate(widths):
            self.stem.append(Conv(conv3x3(cin, cout, (2, 2)), rng, dtype, f"backbone.stem{k}"))
            cin = cout
        self.stages: list[Conv] = []
        self.laterals: list[Conv] = []
        for k, cout in enumerate(stages):
            self.stages.append(Conv(conv3x3(cin, cout, (2, 2)), rng, dtype, f"backbone.stage{k}"))
            self.laterals.append(Conv(conv1x1(cout, channels), rng, dtype, f"backbone.lateral{k}"))
            cin = cout

    @property
    def divisor(self) -> int:
        return self.base_stride * 2 ** (self.n - 1)

    def __call__(self, image: Tensor) -> list[Tensor]:
        if image.data.ndim != 4 or image.shape[1] != 3:
            raise ShapeError("backbone", "input", f"expected (N,3,H,W), got {image.shape}")
        h, w = image.shape[2:]
        d = self.divisor
        if h % d:
            raise ShapeError("backbone", "height", f"{h} is not divisible by {d}; pad the image to a multiple of {d}")
        if w % d:
            raise ShapeError("backbone", "width", f"{w} is not divisible by {d}; pad the image to a multiple of {d}")
        x = image
        for conv in self.stem:
            x = relu(conv(x))
        levels = []
        for stage, lateral in zip(self.stages, self.laterals):
            x = relu(stage(x))
            levels.append(relu(lateral(x)))
        return levels

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for conv in [*self.stem, *self.stages, *self.laterals]:
            out.update(conv.parameters())
        return out


@dataclass
class LayerMatrix:
    layers: dict[LayerCoord, Tensor]
    down_w: Conv  # stride (1,2): one step right
    down_h: Conv  # stride (2,1): one step down

    @property
    def coords(self) -> list[LayerCoord]:
        return list(self.layers)

    def __getitem__(self, coord) -> Tensor:
        return self.layers[LayerCoord(*coord)]

    def __iter__(self) -> Iterator[LayerCoord]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)


class MatrixGenerator:
    """Fills the off-diagonal layers with two shared strided convolutions."""

    def __init__(self, channels: int = 32, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(1)
        self.down_w = Conv(conv3x3(channels, channels, (1, 2)), rng, dtype, "matrix.down_w")
        self.down_h = Conv(conv3x3(channels, channels, (2, 1)), rng, dtype, "matrix.down_h")

    def parameters(self) -> dict[str, Tensor]:
        return {**self.down_w.parameters(), **self.down_h.parameters()}

    def __call__(self, diagonals: list[Tensor], prune_band: int = 2) -> LayerMatrix:
        return build_matrix(diagonals, self.down_w, self.down_h, prune_band)


def build_matrix(diagonals: list[Tensor], down_w: Conv, down_h: Conv, prune_band: int = 2) -> LayerMatrix:
    """Expand diagonal levels (largest first) into all live matrix layers.

    Layer ``(i, j)`` with ``i > j`` is ``(j, j)`` after ``i - j`` width-halving
    convolutions; ``j > i`` is ``(i, i)`` after ``j - i`` height-halving ones.
    Intermediate results are reused along each chain.
    """
    n = len(diagonals)
    layers: dict[LayerCoord, Tensor] = {}
    for k in range(1, n + 1):
        layers[LayerCoord(k, k)] = diagonals[k - 1]
        right = down = diagonals[k - 1]
        for step in range(1, prune_band + 1):
            if k + step > n:
                break
            right = relu(down_w(right))
            layers[LayerCoord(k + step, k)] = right
            down = relu(down_h(down))
            layers[LayerCoord(k, k + step)] = down
    ordered = {c: layers[c] for c in live_coords(n, prune_band)}
    return LayerMatrix(ordered, down_w, down_h)
