"""Command-line entry point.

    pyramid-unet prepare-data --dataset drive --root DATA/DRIVE
    pyramid-unet train --config run.json
    pyramid-unet evaluate --checkpoint runs/x/best.ckpt --config run.json --split test --out eval/
    pyramid-unet predict --checkpoint runs/x/best.ckpt --image img.tif --out pred/
    pyramid-unet visualize --checkpoint runs/x/best.ckpt --config run.json --out viz/

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .checkpoint import CheckpointError, load_checkpoint, read_manifest
from .data import DatasetError, DatasetSpec, prepare_records, resolve_files, load_dataset
from .engine import TrainConfig, TrainingError, evaluate, predict, predict_probabilities, train
from .metrics import format_report
from .visualize import visualize

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pyramid-unet", description="Pyramid U-Net retinal vessel segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def dataset_args(p):
        p.add_argument("--config", help="JSON training config (supplies the dataset)")
        p.add_argument("--dataset", choices=["drive", "chase_db1", "chase"], help="dataset kind")
        p.add_argument("--root", help="dataset root directory")

    p = sub.add_parser("prepare-data", help="validate a dataset root and print its file table")
    dataset_args(p)

    p = sub.add_parser("train", help="train a network")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="checkpoint directory (overrides the config)")

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    dataset_args(p)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="directory for report.jsonl / report.txt")

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("visualize", help="write error maps and comparison panels for a split")
    p.add_argument("--checkpoint", required=True)
    dataset_args(p)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    return parser


def _dataset_spec(args) -> DatasetSpec:
    if args.dataset and args.root:
        return DatasetSpec(args.dataset, args.root)
    if args.config:
        cfg = TrainConfig.load(args.config)
        if cfg.dataset is None:
            raise UsageError(f"config {args.config} has no dataset section")
        if args.root:
            return DatasetSpec.from_dict({**cfg.dataset.to_dict(), "root": args.root})
        return cfg.dataset
    raise UsageError("give --dataset and --root, or --config")


def _split_records(args, input_size=None):
    spec = _dataset_spec(args)
    if input_size is not None:
        spec = dataclasses.replace(spec, target_size=tuple(input_size))
    train_records, test_records = prepare_records(spec)
    return train_records if args.split == "train" else test_records


def cmd_prepare_data(args) -> int:
    spec = _dataset_spec(args)
    rows = resolve_files(spec)
    records = load_dataset(spec)
    print(f"{'id':<16} {'size':>9}  image | vessel mask | fov mask")
    for (ident, img, mask, fov), rec in zip(rows, records):
        h, w = rec.size
        print(f"{ident:<16} {w:>4}x{h:<4}  {img} | {mask} | {fov or '(all ones)'}")
    print(f"{len(rows)} records")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config)
    if args.out:
        cfg.checkpoint_dir = args.out
    path, runlog = train(cfg)
    print(f"trained {len(runlog.entries)} epochs; last checkpoint {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise CheckpointError(f"checkpoint {args.checkpoint} not found")
    expected = TrainConfig.load(args.config).network if args.config else None
    size = read_manifest(args.checkpoint)["network"]["input_size"]
    report = evaluate(args.checkpoint, _split_records(args, size), expected, args.out, args.threshold)
    print(format_report(report))
    return EXIT_OK


def cmd_predict(args) -> int:
    prob_path, bin_path = predict(args.checkpoint, args.image, args.out, args.threshold)
    print(f"wrote {prob_path} and {bin_path}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    records = _split_records(args, net.cfg.input_size)
    for rec, prob in zip(records, predict_probabilities(net, records)):
        err_path, _ = visualize(prob >= args.threshold, rec.vessel_mask, rec.fov_mask, rec.image, args.out, rec.id)
        print(err_path)
    return EXIT_OK


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "visualize": cmd_visualize,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (CheckpointError, DatasetError, TrainingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
