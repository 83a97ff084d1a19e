"""Training loop: augmentation, loss, Adam with a step learning-rate drop."""

from __future__ import annotations

import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO

import numpy as np

from .assignment import render_targets, stack_targets
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import Config, heat_classes
from .data import Subset, augment, gen_synthetic, grid_from_config, load_coco_json, to_input, SyntheticSpec
from .heads import LossWeights, total_loss
from .model import Detector
from .tensor import Adam, NumericError

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, batch_ids: list, checkpoint: Path | None):
        super().__init__(message)
        self.batch_ids = batch_ids
        self.checkpoint = checkpoint


def lr_at(cfg: Config, epoch: int) -> float:
    """Learning rate for 0-based ``epoch``; drops once after ``lr_drop_fraction`` of training."""
    t = cfg.train
    drop_epoch = int(round(t.epochs * t.lr_drop_fraction))
    return t.lr * (t.lr_drop_factor if epoch >= drop_epoch else 1.0)


def build_datasets(cfg: Config):
    """(train, val) datasets for the configured source."""
    d = cfg.data
    if d.source == "synthetic":
        full = gen_synthetic(d.num_images + d.val_images, cfg.train.seed, SyntheticSpec.from_config(cfg), cfg)
        return Subset(full, range(d.num_images)), Subset(full, range(d.num_images, d.num_images + d.val_images))
    if d.source == "coco-json":
        train = load_coco_json(d.annotations, d.image_dir or None)
        val = load_coco_json(d.val_annotations, d.image_dir or None) if d.val_annotations else None
        return train, val
    raise ValueError(f"unknown data source '{d.source}'")


def loss_weights(cfg: Config) -> LossWeights:
    l = cfg.losses
    return LossWeights(l.w_heat, l.w_offset, l.w_center, l.alpha, l.beta)


def make_batch(model: Detector, dataset, ids, cfg: Config, rng: np.random.Generator):
    crop = cfg.train.crop_size
    grid = grid_from_config(cfg)
    specs = model.specs((crop, crop))
    images, maps, dropped = [], [], 0
    for k in ids:
        s = dataset[int(k)]
        if cfg.train.augment:
            a = augment(s, rng, crop, tuple(cfg.train.jitter), cfg.train.flip)
            image, boxes = a.image, a.boxes
            dropped += a.dropped
        else:
            if s.image.shape[:2] != (crop, crop):
                raise ValueError(f"image {s.image_id} is {s.image.shape[:2]}, expected {crop}x{crop} without augmentation")
            image, boxes = to_input(s.image), s.boxes
        images.append(image)
        maps.append(render_targets(boxes, specs, grid, heat_classes(cfg), cfg.ranges.assign_mode))
    return np.stack(images).astype(model.dtype), stack_targets(maps), dropped


def model_checkpoint(model: Detector, opt: Adam, cfg: Config, epoch: int, step: int,
                     rng: np.random.Generator) -> Checkpoint:
    return Checkpoint(
        config=cfg.to_dict(),
        params={k: p.data for k, p in model.parameters().items()},
        optimizer=opt.state_arrays(),
        meta={"epoch": epoch, "step": step, "adam_t": opt.t, "seed": cfg.train.seed,
              "rng_state": rng.bit_generator.state},
    )


def restore(ckpt: Checkpoint) -> tuple[Detector, Config]:
    cfg = Config.from_dict(ckpt.config)
    model = Detector(cfg, seed=cfg.train.seed, dtype=np.dtype(cfg.train.dtype))
    params = model.parameters()
    missing = set(params) - set(ckpt.params)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
    for k, p in params.items():
        if ckpt.params[k].shape != p.data.shape:
            raise ValueError(f"parameter '{k}': checkpoint shape {ckpt.params[k].shape} != model {p.data.shape}")
        p.data = ckpt.params[k].astype(p.data.dtype, copy=True)
    return model, cfg


@dataclass
class TrainResult:
    checkpoint: Path
    losses: list[float] = field(default_factory=list)  # mean total loss per epoch
    final_epoch: int = 0


class MetricLog:
    def __init__(self, path: Path | None, echo: IO | None = None):
        self.fh = open(path, "a") if path else None
        self.echo = echo

    def write(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        if self.fh:
            self.fh.write(line + "\n")
            self.fh.flush()
        if self.echo:
            print(line, file=self.echo, flush=True)

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def train(cfg: Config, out_dir: str | Path, resume: str | Path | None = None, echo: IO | None = None,
          datasets=None) -> TrainResult:
    """Train from scratch (or from ``resume``) and write checkpoints plus
    ``metrics.jsonl`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = cfg.train
    dtype = np.dtype(t.dtype)
    train_set, _ = datasets if datasets is not None else build_datasets(cfg)
    start_epoch, step = 0, 0
    if resume:
        ckpt = load_checkpoint(resume)
        model, _ = restore(ckpt)
        opt = Adam(model.parameters(), lr=lr_at(cfg, ckpt.meta["epoch"]))
        opt.load_state_arrays(ckpt.optimizer, ckpt.meta["adam_t"])
        start_epoch, step = ckpt.meta["epoch"], ckpt.meta["step"]
    else:
        model = Detector(cfg, seed=t.seed, dtype=dtype)
        opt = Adam(model.parameters(), lr=lr_at(cfg, 0))
    metrics = MetricLog(out / "metrics.jsonl", echo)
    metrics.write({"event": "config", "config": cfg.to_dict(), "resume_epoch": start_epoch})
    weights = loss_weights(cfg)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / t.batch_size)
    ckpt_path = out / "checkpoint.mxn"
    result = TrainResult(ckpt_path)
    rng = np.random.default_rng([t.seed, start_epoch])
    try:
        for epoch in range(start_epoch, t.epochs):
            rng = np.random.default_rng([t.seed, epoch])
            opt.lr = lr_at(cfg, epoch)
            order = rng.permutation(n)
            epoch_losses = []
            tic = time.perf_counter()
            for b in range(steps_per_epoch):
                ids = order[b * t.batch_size:(b + 1) * t.batch_size]
                images, targets, _ = make_batch(model, train_set, ids, cfg, rng)
                try:
                    lb = total_loss(model(images), targets, weights)
                    opt.zero_grad()
                    lb.total.backward()
                    opt.step()
                except NumericError as exc:
                    bad = [train_set.image_id(int(k)) for k in ids]
                    dump = save_checkpoint(model_checkpoint(model, opt, cfg, epoch, step, rng),
                                           out / "checkpoint-lastgood.mxn")
                    (out / "abort.json").write_text(json.dumps({"error": str(exc), "epoch": epoch, "step": step,
                                                                "batch_ids": bad}))
                    metrics.write({"event": "abort", "epoch": epoch, "step": step, "error": str(exc),
                                   "batch_ids": bad})
                    raise TrainingAborted(f"numeric failure at step {step}: {exc}", bad, dump) from exc
                step += 1
                rec = lb.to_dict()
                epoch_losses.append(rec["total"])
                if t.log_every and step % t.log_every == 0:
                    metrics.write({"event": "step", "epoch": epoch, "step": step, "lr": opt.lr, **rec})
                if t.max_steps and step >= t.max_steps:
                    break
            mean = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
            result.losses.append(mean)
            result.final_epoch = epoch + 1
            metrics.write({"event": "epoch", "epoch": epoch, "step": step, "lr": opt.lr, "loss": mean})
            log.info("epoch %d/%d loss %.4f lr %g (%.1fs)", epoch + 1, t.epochs, mean, opt.lr,
                     time.perf_counter() - tic)
            last = epoch + 1 == t.epochs or (t.max_steps and step >= t.max_steps)
            if last or (t.checkpoint_every and (epoch + 1) % t.checkpoint_every == 0):
                save_checkpoint(model_checkpoint(model, opt, cfg, epoch + 1, step, rng), ckpt_path)
            if t.max_steps and step >= t.max_steps:
                break
    finally:
        metrics.close()
    return result


def load_model(path: str | Path) -> tuple[Detector, Config, Checkpoint]:
    ckpt = load_checkpoint(path)
    model, cfg = restore(ckpt)
    return model, cfg, ckpt


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def main_log_handler(level: int = logging.INFO) -> None:
    root = logging.getLogger("layermatrix")
    root.setLevel(level)
    if not any(isinstance(h, _StderrHandler) for h in root.handlers):
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)
