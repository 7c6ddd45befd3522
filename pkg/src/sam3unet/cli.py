"""CLI for synthesizing data, training, evaluating and predicting with SAM3-UNet."""

from __future__ import annotations

import argparse
import logging
import sys
import tomllib
from dataclasses import replace
from pathlib import Path
from typing import Callable, List, Sequence, Tuple

import torch

from sam3unet.config import (
    RunConfig,
    apply_overrides,
    dumps_run_config,
    load_run_config,
    parse_run_config,
    split_override_args,
)
from sam3unet.data import DataConfig, SegmentationDataset, index_dataset, make_synthetic
from sam3unet.errors import CheckpointError, ConfigError
from sam3unet.metrics import MetricsReport, evaluate_folder
from sam3unet.model import SAM3UNet, build_model
from sam3unet.paths import IMAGE_SUFFIXES, list_files, resolve_path, run_root
from sam3unet.trainer import load_checkpoint, predict, train, write_predictions

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad invocation that should exit with the usage status."""


def _resolved_data(cfg: DataConfig, root: str | Path | None = None) -> DataConfig:
    return replace(cfg, root=resolve_path(root if root is not None else cfg.root, must_exist=True))


def restore_model(checkpoint_path: str | Path, overrides: Sequence[Tuple[str, str]] = ()) -> Tuple[SAM3UNet, RunConfig]:
    """Rebuild the model from the config snapshot stored in a checkpoint."""

    path = Path(checkpoint_path)
    if not path.is_file():
        raise UsageError(f"Checkpoint not found: {path}")
    checkpoint = load_checkpoint(path)
    try:
        document = tomllib.loads(checkpoint.config)
    except tomllib.TOMLDecodeError as exc:
        raise CheckpointError(f"Checkpoint {path} carries an unreadable config: {exc}") from exc
    cfg = parse_run_config(apply_overrides(document, overrides))
    model = build_model(replace(cfg.encoder, pretrained_path=None))
    model.load_state_dict(checkpoint.model)
    return model.eval(), cfg


def handle_train(args: argparse.Namespace, overrides: List[Tuple[str, str]]) -> int:
    cfg = load_run_config(args.config, overrides)
    run_dir = Path(args.run_dir) if args.run_dir else run_root(cfg.run.root) / cfg.run.name
    run_dir.mkdir(parents=True, exist_ok=True)
    config_text = dumps_run_config(cfg)
    (run_dir / "config.resolved.toml").write_text(config_text, encoding="utf-8")

    encoder_cfg = cfg.encoder
    if encoder_cfg.pretrained_path is not None:
        encoder_cfg = replace(encoder_cfg, pretrained_path=resolve_path(encoder_cfg.pretrained_path, must_exist=True))
    torch.manual_seed(cfg.train.seed)
    model = build_model(encoder_cfg)

    data_cfg = _resolved_data(cfg.data)
    pairs = index_dataset(data_cfg)
    dataset = SegmentationDataset(pairs, data_cfg, training=True)
    resume = load_checkpoint(args.resume) if args.resume else None

    result = train(
        model,
        dataset,
        cfg.train,
        cfg.loss,
        out_dir=run_dir,
        config_text=config_text,
        resume=resume,
        device=cfg.run.device,
        eval_pairs=pairs if cfg.train.eval_every else (),
        metrics_cfg=cfg.metrics,
        progress=not args.no_progress,
    )

    print("Training complete.")
    print(f"  {result.census.summary()}")
    if len(result.history):
        print(f"  steps: {len(result.history)}  final loss: {result.history['loss'].iloc[-1]:.4f}")
    if result.checkpoint_path:
        print(f"Checkpoint saved to {result.checkpoint_path}")
    if result.history_path:
        print(f"Loss history saved to {result.history_path}")
    return EXIT_OK


def _dataset_args(values: Sequence[str], default: Path) -> List[Tuple[str, Path]]:
    if not values:
        return [(default.name, default)]
    datasets = []
    for value in values:
        name, sep, path = value.partition("=")
        root = Path(path if sep else value)
        datasets.append((name if sep else root.name, root))
    return datasets


def handle_eval(args: argparse.Namespace, overrides: List[Tuple[str, str]]) -> int:
    model, cfg = restore_model(args.checkpoint, overrides)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent.parent / "eval"

    report = MetricsReport()
    for name, root in _dataset_args(args.datasets, cfg.data.root):
        data_cfg = _resolved_data(cfg.data, root)
        pairs = index_dataset(data_cfg)
        pred_dir = write_predictions(model, pairs, out_dir / "predictions" / name, data_cfg, cfg.run.device)
        gt_dir = data_cfg.root / data_cfg.mask_subdir
        report = report.merge(evaluate_folder(pred_dir, gt_dir, cfg.metrics, name=name))

    text_path, json_path = report.write(out_dir)
    print(report.to_frame().to_string(float_format=lambda v: f"{v:.4f}"))
    print(f"\nReport written to {text_path} and {json_path}")
    return EXIT_OK


def handle_predict(args: argparse.Namespace, overrides: List[Tuple[str, str]]) -> int:
    source = Path(args.input)
    if source.is_dir():
        images = list_files(source, IMAGE_SUFFIXES)
        if not images:
            raise UsageError(f"No images found in {source}")
    elif source.is_file():
        images = [source]
    else:
        raise UsageError(f"Input not found: {source}")

    model, cfg = restore_model(args.checkpoint, overrides)
    out_dir = Path(args.out_dir)
    for image_path in images:
        predict(model, image_path, out_dir / f"{image_path.stem}.png", cfg.data, cfg.run.device)
    print(f"Wrote {len(images)} masks to {out_dir}")
    return EXIT_OK


def handle_synth(args: argparse.Namespace, overrides: List[Tuple[str, str]]) -> int:
    if overrides:
        raise UsageError("synth does not take configuration overrides")
    out_dir = Path(args.out)
    make_synthetic(out_dir, args.n, args.size, args.seed)
    pairs = index_dataset(DataConfig(root=out_dir), strict=True)
    print(f"Synthetic dataset: {len(pairs)} pairs ({args.size}x{args.size}, seed {args.seed}) in {out_dir}")
    for pair in pairs:
        print(f"  {pair.id}: {pair.image_path.name} / {pair.mask_path.name}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sam3unet",
        description="Adapter fine-tuning of a frozen ViT with a lightweight U-Net decoder.",
        epilog="Any configuration key can be overridden with --section.key VALUE.",
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging verbosity",
    )
    parser.set_defaults(func=None)

    subparsers = parser.add_subparsers(dest="command", required=True)

    train_parser = subparsers.add_parser("train", help="Train adapters, neck and decoder")
    train_parser.add_argument("--config", default=None, help="TOML run configuration")
    train_parser.add_argument("--run-dir", default=None, help="Output directory (default: <run root>/<run.name>)")
    train_parser.add_argument("--resume", default=None, help="Checkpoint to resume from")
    train_parser.add_argument("--no-progress", action="store_true", help="Disable progress bars")
    train_parser.set_defaults(func=handle_train)

    eval_parser = subparsers.add_parser("eval", help="Score a checkpoint on one or more datasets")
    eval_parser.add_argument("checkpoint", help="Checkpoint written by 'train'")
    eval_parser.add_argument(
        "datasets",
        nargs="*",
        help="Dataset roots as PATH or NAME=PATH (default: the training data root)",
    )
    eval_parser.add_argument("--out", default=None, help="Report directory (default: <run dir>/eval)")
    eval_parser.set_defaults(func=handle_eval)

    predict_parser = subparsers.add_parser("predict", help="Write grayscale masks for images")
    predict_parser.add_argument("checkpoint", help="Checkpoint written by 'train'")
    predict_parser.add_argument("input", help="Image file or directory of images")
    predict_parser.add_argument("out_dir", help="Directory for the predicted masks")
    predict_parser.set_defaults(func=handle_predict)

    synth_parser = subparsers.add_parser("synth", help="Generate a synthetic image/mask dataset")
    synth_parser.add_argument("--n", type=int, default=4, help="Number of pairs")
    synth_parser.add_argument("--size", type=int, default=84, help="Square image size in pixels")
    synth_parser.add_argument("--seed", type=int, default=0, help="Random seed")
    synth_parser.add_argument("--out", default="data/synthetic", help="Output dataset root")
    synth_parser.set_defaults(func=handle_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        rest, overrides = split_override_args(sys.argv[1:] if argv is None else argv)
        args = parser.parse_args(rest)
    except ConfigError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)

    if not hasattr(args, "func") or args.func is None:
        parser.print_help()
        return EXIT_USAGE

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    handler: Callable[[argparse.Namespace, List[Tuple[str, str]]], int] = args.func
    try:
        return handler(args, overrides)
    except (ConfigError, UsageError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover - CLI convenience
        logger.debug("Command failed", exc_info=True)
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


__all__ = ["build_parser", "main", "restore_model"]
