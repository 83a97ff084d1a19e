"""Run configuration: a tree of dataclasses loaded from YAML with
``--section.key=value`` overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


@dataclass
class MatrixConfig:
    n: int = 5
    base_stride: int = 8
    prune_band: int = 2
    channels: int = 32
    class_agnostic: bool = False  # one TL and one BR heatmap shared by all classes


@dataclass
class RangeConfig:
    base_w: tuple[float, float] = (24.0, 48.0)
    base_h: tuple[float, float] = (24.0, 48.0)
    lo_mult: float = 0.8
    hi_mult: float = 1.3
    assign_mode: str = "all"  # "all" containing layers, or "best" single layer


@dataclass
class LossConfig:
    w_heat: float = 1.0
    w_offset: float = 1.0
    w_center: float = 0.1
    alpha: float = 2.0
    beta: float = 4.0


@dataclass
class DecodeConfig:
    top_k: int = 32
    tau: float = 0.2
    sigma: float = 0.5
    peak_threshold: float = 0.05
    score_floor: float = 0.001
    max_detections: int = 100


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 5e-4  # x10 the large-scale recipe; see README
    lr_drop_fraction: float = 0.75
    lr_drop_factor: float = 0.1
    epochs: int = 40
    crop_size: int = 128
    jitter: tuple[float, float] = (0.6, 1.5)
    flip: bool = True
    augment: bool = True
    seed: int = 0
    dtype: str = "float32"
    log_every: int = 10
    checkpoint_every: int = 1  # epochs
    max_steps: int = 0  # 0: no cap


@dataclass
class DataConfig:
    source: str = "synthetic"  # or "coco-json"
    num_images: int = 2000
    val_images: int = 200
    image_size: int = 128
    num_classes: int = 3
    aspect_range: tuple[float, float] = (0.25, 4.0)
    side_range: tuple[float, float] = (20.0, 120.0)
    boxes_per_image: tuple[int, int] = (1, 5)
    annotations: str = ""
    image_dir: str = ""
    val_annotations: str = ""


@dataclass
class EvalConfig:
    iou_thresholds: tuple[float, ...] = (0.5,)
    test_max_side: int = 128


@dataclass
class Config:
    matrix: MatrixConfig = field(default_factory=MatrixConfig)
    ranges: RangeConfig = field(default_factory=RangeConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, tree: dict[str, Any] | None) -> "Config":
        cfg = cls()
        for section, values in (tree or {}).items():
            for key, value in (values or {}).items():
                set_value(cfg, f"{section}.{key}", value)
        return cfg


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def set_value(cfg: Config, dotted: str, value: Any) -> None:
    """Set ``section.key`` on ``cfg``, coercing ``value`` to the field's type."""
    try:
        section_name, key = dotted.split(".", 1)
    except ValueError:
        raise KeyError(f"override '{dotted}' must look like section.key") from None
    if not hasattr(cfg, section_name) or not dataclasses.is_dataclass(getattr(cfg, section_name)):
        raise KeyError(f"unknown config section '{section_name}'")
    section = getattr(cfg, section_name)
    if key not in {f.name for f in dataclasses.fields(section)}:
        raise KeyError(f"unknown config key '{dotted}'")
    if isinstance(value, str):
        value = yaml.safe_load(value) if value.strip() else value
    current = getattr(section, key)
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{dotted} expects a list, got {value!r}")
        value = tuple(type(current[0])(v) if current else v for v in value)
    elif isinstance(current, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{dotted} expects true/false, got {value!r}")
    elif isinstance(current, (int, float)):
        if isinstance(value, str):
            try:
                value = float(value)  # YAML 1.1 reads "1e-3" as a string
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{dotted} expects a number, got {value!r}")
        value = type(current)(value)
    elif isinstance(current, str):
        value = "" if value is None else str(value)
    setattr(section, key, value)


def heat_classes(cfg: Config) -> int:
    """Heatmap channels per corner type."""
    return 1 if cfg.matrix.class_agnostic else cfg.data.num_classes


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    tree = {}
    if path:
        with open(path) as fh:
            tree = yaml.safe_load(fh) or {}
        if not isinstance(tree, dict):
            raise ValueError(f"{path}: top level must be a mapping of sections")
    cfg = Config.from_dict(tree)
    for item in overrides or []:
        item = item[2:] if item.startswith("--") else item
        if "=" not in item:
            raise ValueError(f"override '{item}' must look like section.key=value")
        key, value = item.split("=", 1)
        set_value(cfg, key, value)
    return cfg


def dump_config(cfg: Config) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
