"""Command-line entry point.

Machine-readable output goes to stdout as JSON lines; logs go to stderr.
Config values come from ``--config FILE`` and ``--section.key=value`` flags.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .assignment import layer_stats, render_targets
from .checkpoint import CheckpointError
from .config import Config, dump_config, heat_classes, load_config
from .data import DataError, SyntheticSpec, gen_synthetic, grid_from_config, letterbox, specs_from_config, to_input, \
    write_coco
from .decoder import DecodeParams, decode, head_output_as_maps, iou, targets_as_maps
from .evaluate import evaluate
from .gradsuite import CASES, run_suite
from .tensor import NumericError
from .train import TrainingAborted, build_datasets, load_model, main_log_handler, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("layermatrix.cli")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def emit(record: dict, out=None) -> None:
    print(json.dumps(record, sort_keys=True), file=out or sys.stdout, flush=True)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="YAML config; any key can also be set with --section.key=value")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS/OpenMP threads (default 1; results are bit-reproducible only with 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")


def build_parser() -> Parser:
    parser = Parser(prog="layermatrix", description=__doc__.split("\n\n")[0],
                    epilog="Config overrides: any --section.key=value, e.g. --train.epochs=5 --decode.tau=0.2. "
                           "Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("train", help="train a detector; writes checkpoints and metrics.jsonl")
    _common(p)
    p.add_argument("--out", required=True, metavar="DIR", help="run directory")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p.add_argument("--eval", action="store_true", help="evaluate on the validation split afterwards")

    p = sub.add_parser("eval", help="AP report for a checkpoint on the validation split")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--iou", type=float, nargs="+", metavar="T", help="IoU thresholds (default eval.iou_thresholds)")
    p.add_argument("--split", choices=("val", "train"), default="val")

    p = sub.add_parser("decode", help="print detections as JSON lines")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", metavar="CKPT", help="run a trained model")
    src.add_argument("--from-targets", action="store_true",
                     help="decode rendered ground truth of synthetic images (encode/decode roundtrip)")
    p.add_argument("--image", nargs="+", metavar="PNG", help="images to run the model on (with --checkpoint)")
    p.add_argument("--count", type=int, default=1, help="synthetic images to roundtrip (with --from-targets)")
    p.add_argument("--start", type=int, default=0, help="first synthetic image index")

    p = sub.add_parser("layer-stats", help="per-layer assignment counts of the configured training set")
    _common(p)
    p.add_argument("--format", choices=("table", "json"), default="table")

    p = sub.add_parser("gen-data", help="write the synthetic set as PNGs plus COCO-style annotations.json")
    _common(p)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--count", type=int, help="images to write (default data.num_images)")
    p.add_argument("--seed", type=int, help="default train.seed")

    p = sub.add_parser("grad-check", help="finite-difference check of every op; exit 0 iff all pass")
    _common(p)
    p.add_argument("--instances", type=int, default=20, help="random instances per op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--op", action="append", choices=sorted(CASES), help="restrict to these ops")
    return parser


def split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """Pull ``--section.key=value`` (or ``--section.key value``) out of argv."""
    rest, overrides = [], []
    k = 0
    while k < len(argv):
        a = argv[k]
        name = a[2:].split("=", 1)[0] if a.startswith("--") else ""
        if "." in name and not name.startswith("."):
            if "=" in a:
                overrides.append(a)
            elif k + 1 < len(argv):
                overrides.append(f"{a}={argv[k + 1]}")
                k += 1
            else:
                raise UsageError(f"override {a} needs a value")
        else:
            rest.append(a)
        k += 1
    return rest, overrides


def resolve_config(args, overrides) -> Config:
    if args.config and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    try:
        return load_config(args.config, overrides)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc.args[0] if exc.args else exc)) from exc


def cmd_train(args, cfg: Config) -> int:
    log.info("resolved config:\n%s", dump_config(cfg))
    datasets = build_datasets(cfg)
    result = train(cfg, args.out, resume=args.resume, datasets=datasets)
    emit({"event": "done", "checkpoint": str(result.checkpoint), "epochs": result.final_epoch,
          "losses": result.losses})
    if args.eval and datasets[1] is not None:
        model, _, _ = load_model(result.checkpoint)
        emit({"event": "eval", **evaluate(model, datasets[1], cfg).to_dict()})
    return EXIT_OK


def _with_data_overrides(ckpt_cfg: Config, cfg: Config) -> Config:
    # the checkpoint decides the model; the command line may change data, decode and eval settings
    merged = Config.from_dict(ckpt_cfg.to_dict())
    for section in ("data", "decode", "eval"):
        setattr(merged, section, getattr(cfg, section))
    return merged


def cmd_eval(args, cfg: Config, overrides) -> int:
    model, ckpt_cfg, _ = load_model(args.checkpoint)
    cfg = _with_data_overrides(ckpt_cfg, cfg) if (args.config or overrides) else ckpt_cfg
    train_set, val_set = build_datasets(cfg)
    dataset = val_set if args.split == "val" else train_set
    if dataset is None or len(dataset) == 0:
        raise DataError(f"no images in the {args.split} split")
    report = evaluate(model, dataset, cfg, args.iou)
    emit({"event": "eval", "split": args.split, "images": len(dataset), **report.to_dict()})
    return EXIT_OK


def cmd_decode(args, cfg: Config, overrides) -> int:
    if args.from_targets:
        return _decode_targets(args, cfg)
    if not args.image:
        raise UsageError("decode --checkpoint needs --image")
    model, ckpt_cfg, _ = load_model(args.checkpoint)
    cfg = _with_data_overrides(ckpt_cfg, cfg) if (args.config or overrides) else ckpt_cfg
    grid = grid_from_config(cfg)
    params = DecodeParams.from_config(cfg.decode)
    divisor = cfg.matrix.base_stride * 2 ** (cfg.matrix.n - 1)
    from PIL import Image
    for path in args.image:
        try:
            with Image.open(path) as im:
                image = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except OSError as exc:
            raise DataError(f"{path}: {exc}") from exc
        boxed, scale = letterbox(image, cfg.eval.test_max_side, divisor)
        head = model(to_input(boxed)[None].astype(model.dtype))
        dets = decode(head_output_as_maps(head, 0), model.specs(boxed.shape[:2]), grid, boxed.shape[:2], params)
        oh, ow = image.shape[:2]
        for d in dets:
            rec = d.to_json(path)
            rec["box"] = [min(d.x1 / scale, ow), min(d.y1 / scale, oh), min(d.x2 / scale, ow), min(d.y2 / scale, oh)]
            emit(rec)
    return EXIT_OK


def _decode_targets(args, cfg: Config) -> int:
    size = cfg.data.image_size
    data = gen_synthetic(args.start + args.count, cfg.train.seed, SyntheticSpec.from_config(cfg), cfg)
    grid = grid_from_config(cfg)
    specs = specs_from_config(cfg, (size, size))
    params = DecodeParams.from_config(cfg.decode)
    recovered = total = 0
    for k in range(args.start, args.start + args.count):
        boxes = data.boxes(k)
        maps = render_targets(boxes, specs, grid, heat_classes(cfg), cfg.ranges.assign_mode)
        dets = decode(targets_as_maps(maps), specs, grid, (size, size), params)
        for d in dets:
            emit(d.to_json(data.image_id(k)))
        for b in boxes:
            total += 1
            recovered += any(d.class_id == (0 if cfg.matrix.class_agnostic else b.class_id) and iou(b.as_list(), d.box()) >= 0.99 for d in dets)
    emit({"event": "roundtrip", "images": args.count, "boxes": total, "recovered": recovered})
    return EXIT_OK


def cmd_layer_stats(args, cfg: Config) -> int:
    if cfg.data.source == "synthetic":
        data = gen_synthetic(cfg.data.num_images, cfg.train.seed, SyntheticSpec.from_config(cfg), cfg)
    else:
        data, _ = build_datasets(cfg)
    boxes = [b for k in range(len(data)) for b in data.boxes(k)]
    stats = layer_stats(boxes, grid_from_config(cfg), cfg.ranges.assign_mode)
    if args.format == "json":
        emit({"event": "layer-stats", "images": len(data), **stats.to_dict()})
    else:
        print(stats.table(cfg.matrix.n))
    return EXIT_OK


def cmd_gen_data(args, cfg: Config) -> int:
    count = cfg.data.num_images if args.count is None else args.count
    seed = cfg.train.seed if args.seed is None else args.seed
    data = gen_synthetic(count, seed, SyntheticSpec.from_config(cfg), cfg)
    path = write_coco(data, args.out)
    emit({"event": "gen-data", "images": count, "annotations": str(path), "clamped": data.clamped,
          "dropped": data.dropped})
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = run_suite(args.instances, args.seed, args.op)
    for r in results:
        emit(r.to_dict())
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        rest, overrides = split_overrides(argv)
        args = parser.parse_args(rest)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    main_log_handler(logging.DEBUG if args.verbose else logging.INFO)
    limits = threadpool_limits(args.threads) if args.threads > 0 else contextlib.nullcontext()
    try:
        with limits:
            if args.command == "grad-check":
                return cmd_grad_check(args)
            cfg = resolve_config(args, overrides)
            if args.command == "train":
                return cmd_train(args, cfg)
            if args.command == "eval":
                return cmd_eval(args, cfg, overrides)
            if args.command == "decode":
                return cmd_decode(args, cfg, overrides)
            if args.command == "layer-stats":
                return cmd_layer_stats(args, cfg)
            return cmd_gen_data(args, cfg)
    except UsageError as exc:
        print(f"{parser.format_usage()}layermatrix: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        log.error("%s", exc)
        emit({"event": "abort", "error": str(exc), "batch_ids": exc.batch_ids,
              "checkpoint": str(exc.checkpoint) if exc.checkpoint else None})
        return EXIT_NUMERIC
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
