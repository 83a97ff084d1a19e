"""Datasets: a synthetic-shapes generator and a COCO-style JSON loader."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image

from .assignment import GroundTruthBox, RangeGrid, Range2D, assign_with_clamp, compute_ranges
from .backbone import LayerSpec, layer_specs
from .config import Config

log = logging.getLogger(__name__)

CLASS_NAMES = ("filled_rect", "outlined_rect", "cross")


class DataError(Exception):
    """Unreadable or malformed dataset input."""


@dataclass
class Sample:
    image: np.ndarray  # [H, W, 3] uint8
    boxes: list[GroundTruthBox]
    image_id: int | str

    def chw(self) -> np.ndarray:
        """Image as normalized float32 [3, H, W]."""
        return to_input(self.image)


def to_input(image: np.ndarray) -> np.ndarray:
    return ((image.astype(np.float32) / 255.0 - 0.5) / 0.25).transpose(2, 0, 1)


class Dataset(Protocol):
    def __len__(self) -> int: ...

    def __getitem__(self, index: int) -> Sample: ...

    def boxes(self, index: int) -> list[GroundTruthBox]: ...

    def image_id(self, index: int) -> int | str: ...


@dataclass
class SyntheticSpec:
    image_size: int = 128
    num_classes: int = 3
    aspect_range: tuple[float, float] = (0.25, 4.0)  # width / height
    side_range: tuple[float, float] = (20.0, 120.0)
    boxes_per_image: tuple[int, int] = (1, 5)
    gap: int = 2
    tries: int = 60

    @classmethod
    def from_config(cls, cfg: Config) -> "SyntheticSpec":
        d = cfg.data
        return cls(d.image_size, d.num_classes, tuple(d.aspect_range), tuple(d.side_range), tuple(d.boxes_per_image))


def grid_from_config(cfg: Config) -> RangeGrid:
    r = cfg.ranges
    base = Range2D(r.base_w[0], r.base_w[1], r.base_h[0], r.base_h[1], r.lo_mult, r.hi_mult)
    return compute_ranges(base, cfg.matrix.n, cfg.matrix.prune_band)


def specs_from_config(cfg: Config, image_size: tuple[int, int]) -> list[LayerSpec]:
    m = cfg.matrix
    return layer_specs(m.n, m.base_stride, m.prune_band, m.channels, image_size)


def encodable_limits(w: float, h: float, grid: RangeGrid, specs: Sequence[LayerSpec], mode: str) -> tuple[float, float]:
    """Largest x2 and y2 whose corner cell exists in every layer the box goes to."""
    by_coord = {s.coord: s for s in specs}
    probe = GroundTruthBox(0, 0.0, 0.0, w, h)
    coords, _ = assign_with_clamp(probe, grid, mode)
    xmax = min((by_coord[c].feat_w - 0.5) * by_coord[c].stride_w for c in coords)
    ymax = min((by_coord[c].feat_h - 0.5) * by_coord[c].stride_h for c in coords)
    return xmax, ymax


class SyntheticDataset:
    """Filled rectangles, outlined rectangles and crosses on a noisy background.

    Boxes are drawn once at construction; images are rendered on access from
    a per-index seed, so the dataset is cheap to hold and fully deterministic.
    """

    def __init__(self, count: int, seed: int = 0, spec: SyntheticSpec | None = None, cfg: Config | None = None,
                 offset: int = 0):
        self.spec = spec or SyntheticSpec()
        self.cfg = cfg or Config()
        self.seed = seed
        self.offset = offset
        self.count = count
        size = self.spec.image_size
        self.grid = grid_from_config(self.cfg)
        self.specs = specs_from_config(self.cfg, (size, size))
        self.clamped = 0
        self.dropped = 0
        self._boxes = [self._sample_boxes(k) for k in range(count)]

    def __len__(self) -> int:
        return self.count

    def boxes(self, index: int) -> list[GroundTruthBox]:
        return self._boxes[index]

    def image_id(self, index: int) -> int:
        return self.offset + index

    def _sample_boxes(self, index: int) -> list[GroundTruthBox]:
        sp = self.spec
        rng = np.random.default_rng([self.seed, self.offset + index, 0])
        n = int(rng.integers(sp.boxes_per_image[0], sp.boxes_per_image[1] + 1))
        size = sp.image_size
        lo_a, hi_a = math.log(sp.aspect_range[0]), math.log(sp.aspect_range[1])
        lo_s, hi_s = math.log(sp.side_range[0]), math.log(sp.side_range[1])
        boxes: list[GroundTruthBox] = []
        for _ in range(n):
            for _ in range(sp.tries):
                aspect = math.exp(rng.uniform(lo_a, hi_a))
                side = math.exp(rng.uniform(lo_s, hi_s))
                w = int(round(side * math.sqrt(aspect)))
                h = int(round(side / math.sqrt(aspect)))
                if min(w, h) < sp.side_range[0] or max(w, h) > min(sp.side_range[1], size):
                    continue
                xmax, ymax = encodable_limits(w, h, self.grid, self.specs, self.cfg.ranges.assign_mode)
                xmax = min(size, math.ceil(xmax) - 1)
                ymax = min(size, math.ceil(ymax) - 1)
                if xmax < w or ymax < h:
                    continue
                x1 = int(rng.integers(0, xmax - w + 1))
                y1 = int(rng.integers(0, ymax - h + 1))
                cand = GroundTruthBox(int(rng.integers(sp.num_classes)), x1, y1, x1 + w, y1 + h)
                g = sp.gap
                if any(cand.x1 < b.x2 + g and b.x1 < cand.x2 + g and cand.y1 < b.y2 + g and b.y1 < cand.y2 + g
                       for b in boxes):
                    continue
                _, clamped = assign_with_clamp(cand, self.grid, self.cfg.ranges.assign_mode)
                self.clamped += clamped
                boxes.append(cand)
                break
            else:
                self.dropped += 1
        return boxes

    def render(self, index: int) -> np.ndarray:
        size = self.spec.image_size
        rng = np.random.default_rng([self.seed, self.offset + index, 1])
        bg = rng.uniform(0.0, 0.35, size=3)
        img = bg[None, None, :] + rng.normal(0.0, 0.04, size=(size, size, 3))
        for b in self._boxes[index]:
            color = rng.uniform(0.45, 1.0, size=3)
            x1, y1, x2, y2 = int(b.x1), int(b.y1), int(b.x2), int(b.y2)
            w, h = x2 - x1, y2 - y1
            if b.class_id == 0:
                img[y1:y2, x1:x2] = color
            elif b.class_id == 1:
                t = max(2, int(round(min(w, h) * 0.15)))
                img[y1:y1 + t, x1:x2] = color
                img[y2 - t:y2, x1:x2] = color
                img[y1:y2, x1:x1 + t] = color
                img[y1:y2, x2 - t:x2] = color
            else:
                t = max(2, int(round(min(w, h) * 0.3)))
                cy, cx = (y1 + y2) // 2, (x1 + x2) // 2
                img[cy - t // 2:cy - t // 2 + t, x1:x2] = color
                img[y1:y2, cx - t // 2:cx - t // 2 + t] = color
        return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)

    def __getitem__(self, index: int) -> Sample:
        if not 0 <= index < self.count:
            raise IndexError(index)
        return Sample(self.render(index), list(self._boxes[index]), self.offset + index)


def gen_synthetic(count: int, seed: int = 0, spec: SyntheticSpec | None = None, cfg: Config | None = None,
                  offset: int = 0) -> SyntheticDataset:
    return SyntheticDataset(count, seed, spec, cfg, offset)


class Subset:
    def __init__(self, base, indices: Sequence[int]):
        self.base = base
        self.indices = list(indices)

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, index: int) -> Sample:
        return self.base[self.indices[index]]

    def boxes(self, index: int) -> list[GroundTruthBox]:
        return self.base.boxes(self.indices[index])

    def image_id(self, index: int):
        return self.base.image_id(self.indices[index])


@dataclass
class CocoDataset:
    records: list[tuple[int | str, Path, list[GroundTruthBox]]]
    categories: list[int]
    report: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def boxes(self, index: int) -> list[GroundTruthBox]:
        return self.records[index][2]

    def image_id(self, index: int):
        return self.records[index][0]

    def __getitem__(self, index: int) -> Sample:
        image_id, path, boxes = self.records[index]
        with Image.open(path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.uint8)
        return Sample(image, list(boxes), image_id)


def load_coco_json(path: str | Path, image_dir: str | Path | None = None) -> CocoDataset:
    """Read COCO-style ``images``/``annotations``; bboxes are [x, y, w, h].

    Bad annotations and images whose file is missing are skipped and listed
    in ``report``; malformed JSON raises :class:`DataError`.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        context = lines[exc.lineno - 1][max(0, exc.colno - 40):exc.colno + 40] if 0 < exc.lineno <= len(lines) else ""
        raise DataError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}: {context!r}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("images", []), list) \
            or not isinstance(doc.get("annotations", []), list):
        raise DataError(f"{path}: expected an object with 'images' and 'annotations' arrays")
    root = Path(image_dir) if image_dir else path.parent
    report: list[str] = []
    cat_ids = sorted({c["id"] for c in doc.get("categories", []) if isinstance(c, dict) and "id" in c})
    if not cat_ids:
        cat_ids = sorted({a.get("category_id") for a in doc.get("annotations", [])
                          if isinstance(a, dict) and isinstance(a.get("category_id"), int)})
    cat_index = {c: k for k, c in enumerate(cat_ids)}
    by_image: dict = {}
    for k, ann in enumerate(doc.get("annotations", [])):
        try:
            x, y, w, h = (float(v) for v in ann["bbox"])
            cls = cat_index[ann["category_id"]]
            box = GroundTruthBox(cls, x, y, x + w, y + h)
        except (KeyError, TypeError, ValueError) as exc:
            report.append(f"annotation #{k}: skipped ({type(exc).__name__}: {exc})")
            continue
        by_image.setdefault(ann.get("image_id"), []).append(box)
    records = []
    for entry in doc.get("images", []):
        if not isinstance(entry, dict) or "id" not in entry or "file_name" not in entry:
            report.append(f"image entry {entry!r}: skipped (needs 'id' and 'file_name')")
            continue
        file = root / entry["file_name"]
        if not file.is_file():
            report.append(f"image {entry['id']}: missing file {file}")
            log.warning("image %s: missing file %s", entry["id"], file)
            continue
        records.append((entry["id"], file, by_image.get(entry["id"], [])))
    for line in report:
        log.info(line)
    return CocoDataset(records, cat_ids, report)


def write_coco(dataset, out_dir: str | Path, class_names: Sequence[str] = CLASS_NAMES) -> Path:
    """Write PNG images plus ``annotations.json``; category ids are class + 1."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for k in range(len(dataset)):
        s = dataset[k]
        name = f"images/{s.image_id:06d}.png" if isinstance(s.image_id, int) else f"images/{s.image_id}.png"
        Image.fromarray(s.image, "RGB").save(out / name)
        h, w = s.image.shape[:2]
        images.append({"id": s.image_id, "file_name": name, "width": w, "height": h})
        for b in s.boxes:
            annotations.append({"id": ann_id, "image_id": s.image_id, "category_id": b.class_id + 1,
                                "bbox": [b.x1, b.y1, b.width, b.height], "area": b.width * b.height,
                                "iscrowd": 0})
            ann_id += 1
    num_classes = max([b.class_id for k in range(len(dataset)) for b in dataset.boxes(k)], default=-1) + 1
    names = list(class_names) + [f"class{k}" for k in range(len(class_names), num_classes)]
    categories = [{"id": k + 1, "name": names[k]} for k in range(max(num_classes, len(class_names)))]
    path = out / "annotations.json"
    path.write_text(json.dumps({"images": images, "annotations": annotations, "categories": categories}, indent=1))
    return path


@dataclass
class Augmented:
    image: np.ndarray  # [3, S, S] float32, normalized
    boxes: list[GroundTruthBox]
    dropped: int


def augment(sample: Sample, rng: np.random.Generator, crop: int = 128, jitter: tuple[float, float] = (0.6, 1.5),
            flip: bool = True, min_side: float = 4.0) -> Augmented:
    """Scale jitter, random crop (or pad) to ``crop`` pixels, horizontal flip."""
    img = sample.image
    h, w = img.shape[:2]
    scale = float(rng.uniform(jitter[0], jitter[1]))
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    resized = np.asarray(Image.fromarray(img).resize((nw, nh), Image.BILINEAR))
    fx, fy = nw / w, nh / h
    ox = int(rng.integers(min(0, nw - crop), max(0, nw - crop) + 1))
    oy = int(rng.integers(min(0, nh - crop), max(0, nh - crop) + 1))
    canvas = np.zeros((crop, crop, 3), dtype=np.uint8)
    canvas[...] = np.round(img.reshape(-1, 3).mean(0)).astype(np.uint8)
    sy0, sx0 = max(oy, 0), max(ox, 0)
    sy1, sx1 = min(oy + crop, nh), min(ox + crop, nw)
    canvas[sy0 - oy:sy1 - oy, sx0 - ox:sx1 - ox] = resized[sy0:sy1, sx0:sx1]
    do_flip = flip and bool(rng.random() < 0.5)
    if do_flip:
        canvas = canvas[:, ::-1]
    boxes, dropped = [], 0
    for b in sample.boxes:
        x1 = min(max(b.x1 * fx - ox, 0.0), crop)
        x2 = min(max(b.x2 * fx - ox, 0.0), crop)
        y1 = min(max(b.y1 * fy - oy, 0.0), crop)
        y2 = min(max(b.y2 * fy - oy, 0.0), crop)
        if x2 - x1 < min_side or y2 - y1 < min_side:
            dropped += 1
            continue
        if do_flip:
            x1, x2 = crop - x2, crop - x1
        boxes.append(GroundTruthBox(b.class_id, x1, y1, x2, y2))
    return Augmented(to_input(np.ascontiguousarray(canvas)), boxes, dropped)


def letterbox(image: np.ndarray, max_side: int, divisor: int) -> tuple[np.ndarray, float]:
    """Resize so the longer side is ``max_side`` and zero-pad to a multiple of ``divisor``."""
    h, w = image.shape[:2]
    scale = max_side / max(h, w)
    if scale != 1.0:
        image = np.asarray(Image.fromarray(image).resize((max(1, round(w * scale)), max(1, round(h * scale))),
                                                         Image.BILINEAR))
    h2, w2 = image.shape[:2]
    ph, pw = -(-h2 // divisor) * divisor, -(-w2 // divisor) * divisor
    if (ph, pw) != (h2, w2):
        canvas = np.zeros((ph, pw, 3), dtype=image.dtype)
        canvas[:h2, :w2] = image
        image = canvas
    return image, scale
