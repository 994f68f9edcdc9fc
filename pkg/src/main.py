"""BGR - Main Entry Point.

Continual learning with Bayesian generative regularization: train, eval,
sample, saliency and selfcheck subcommands.
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

# Ensure src is in path
sys.path.insert(0, str(Path(__file__).parent))

from controllers.experiment_controller import cmd_eval, cmd_sample, cmd_saliency, cmd_train
from controllers.selfcheck_controller import cmd_selfcheck
from core.models import RunConfig
from utils.constants import DATA_ROOT_ENV, DATASETS, EXIT_USAGE, IG_STEPS, SALIENCY_TOP_FRACTION
from utils.logger import get_logger

logger = get_logger(__name__)


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def normalize_method(name: str) -> str:
    """'bgr' -> 'BGR', 'gen-l2' -> 'GEN_L2'."""
    return name.strip().upper().replace("-", "_")


def build_config(args: argparse.Namespace) -> RunConfig:
    """Resolve defaults < dataset column < --config file < flags."""
    file_values: Dict[str, Any] = {}
    if getattr(args, "config", None):
        file_values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(file_values, dict):
            raise ValueError(f"{args.config} must contain a JSON object")

    dataset = args.dataset or file_values.get("dataset") or RunConfig().dataset
    values = _merge(RunConfig.for_dataset(dataset).to_dict(encode_json=True), file_values)
    config = RunConfig.from_dict(values)
    config.dataset = dataset

    overrides = {
        "out_dir": args.out,
        "data_root": args.data_root,
        "tasks": args.tasks,
        "train_subsample": args.train_subsample,
    }
    for field_name, value in overrides.items():
        if value is not None:
            setattr(config, field_name, value)
    train_overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "gamma": args.gamma,
        "batch_size": args.batch_size,
        "precision": args.precision,
        "method": normalize_method(args.method) if args.method else None,
    }
    for field_name, value in train_overrides.items():
        if value is not None:
            setattr(config.train, field_name, value)
    if not config.data_root:
        config.data_root = os.environ.get(DATA_ROOT_ENV) or None
    if getattr(args, "resume", None):
        config.resume_from = args.resume
    return config


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration file")
    parser.add_argument("--dataset", choices=DATASETS)
    parser.add_argument("--method", help="SGD, ALL_DATA, EWC, VCL, GEN, GEN_L2 or BGR (case-insensitive)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--data-root", help=f"Directory with the IDX files (default ${DATA_ROOT_ENV})")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--gamma", type=float, help="Weight of the generative term")
    parser.add_argument("--tasks", type=int, help="Number of Permuted-MNIST tasks")
    parser.add_argument("--train-subsample", type=int, help="Training examples kept per task")
    parser.add_argument("--precision", choices=["float64", "float32"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bgr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Train a method over a task stream")
    _add_run_options(train)
    train.add_argument("--resume", help="Checkpoint to continue the sequence from")
    train.add_argument("--write-config", help="Also dump the resolved configuration to this JSON file")

    evaluate = sub.add_parser("eval", help="Evaluate a checkpoint on its trained tasks")
    _add_run_options(evaluate)
    evaluate.add_argument("--checkpoint", required=True)

    sample = sub.add_parser("sample", help="Generate images from a checkpoint")
    _add_run_options(sample)
    sample.add_argument("--checkpoint", required=True)
    sample.add_argument("--count", type=int, default=10)
    sample.add_argument("--task", type=int, help="Head to sample from (default: last trained task)")

    saliency = sub.add_parser("saliency", help="Integrated-gradients saliency for test images")
    _add_run_options(saliency)
    saliency.add_argument("--checkpoint", required=True)
    saliency.add_argument("--task", type=int, required=True)
    saliency.add_argument("--count", type=int, default=10, help="Number of test images")
    saliency.add_argument("--fraction", type=float, default=SALIENCY_TOP_FRACTION,
                          help="Share of pixels marked salient")
    saliency.add_argument("--steps", type=int, default=IG_STEPS, help="Riemann steps along the path")

    sub.add_parser("selfcheck", help="Run the numerical oracle suite")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Application entry point; returns the process exit status."""
    args = build_parser().parse_args(argv)
    if args.command == "selfcheck":
        return cmd_selfcheck()

    try:
        config = build_config(args)
    except (OSError, ValueError, KeyError, TypeError) as e:
        logger.error(f"Could not resolve configuration: {e}")
        return EXIT_USAGE

    if args.command == "train":
        if args.write_config:
            Path(args.write_config).parent.mkdir(parents=True, exist_ok=True)
            Path(args.write_config).write_text(config.to_json(indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return cmd_train(config)
    if args.command == "eval":
        return cmd_eval(config, args.checkpoint)
    if args.command == "sample":
        return cmd_sample(config, args.checkpoint, args.count, task=args.task)
    return cmd_saliency(config, args.checkpoint, args.task, count=args.count, fraction=args.fraction,
                        steps=args.steps)


if __name__ == "__main__":
    sys.exit(main())
