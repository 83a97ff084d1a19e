"""Corner detector: backbone, layer matrix, and shared corner/centre head."""

from __future__ import annotations

import numpy as np

from .backbone import Backbone, LayerMatrix, LayerSpec, MatrixGenerator, layer_specs
from .config import Config, heat_classes
from .heads import Head, HeadOutput, head_forward
from .tensor import Tensor


class Detector:
    def __init__(self, cfg: Config, seed: int = 0, dtype=np.float32):
        m = cfg.matrix
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        ss = np.random.SeedSequence(seed)
        rb, rm, rh = (np.random.default_rng(s) for s in ss.spawn(3))
        self.backbone = Backbone(m.n, m.base_stride, m.channels, rng=rb, dtype=self.dtype)
        self.generator = MatrixGenerator(m.channels, rng=rm, dtype=self.dtype)
        self.head = Head(m.channels, heat_classes(cfg), rng=rh, dtype=self.dtype)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.backbone.parameters(), **self.generator.parameters(), **self.head.parameters()}

    def specs(self, image_size: tuple[int, int]) -> list[LayerSpec]:
        m = self.cfg.matrix
        return layer_specs(m.n, m.base_stride, m.prune_band, m.channels, image_size)

    def matrix(self, images: Tensor) -> LayerMatrix:
        return self.generator(self.backbone(images), self.cfg.matrix.prune_band)

    def __call__(self, images) -> HeadOutput:
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.dtype))
        return head_forward(self.matrix(images), self.head)
