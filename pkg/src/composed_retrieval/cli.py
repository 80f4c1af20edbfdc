"""Command-line entry points.

Exit codes: 0 on success, 2 for configuration problems, 1 for runtime
failures. Every command takes --config/--seed/--out and writes its
artifact plus a manifest next to it.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

import yaml

from . import experiments
from .config import RunConfig, load_config
from .errors import ConfigError

logger = logging.getLogger(__name__)

COMMANDS = (
    "generate-data",
    "train",
    "finetune-combiner",
    "evaluate",
    "gallery",
    "scale-sweep",
    "ablate",
)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML run config (defaults apply if omitted)")
    common.add_argument("--seed", type=int, default=None, help="override every per-section seed")
    common.add_argument("--out", default=".", help="directory artifacts are written under")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="cir",
        description="Desk-scale composed image retrieval: generate triplets, "
        "train the reformulation network, and evaluate retrieval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-data", parents=[common],
                   help="render the synthetic world and build triplets + eval cases")
    sub.add_parser("train", parents=[common], help="train the reformulation network")
    sub.add_parser("finetune-combiner", parents=[common],
                   help="fit the late-fusion weight with a frozen backbone")
    sub.add_parser("evaluate", parents=[common], help="compute the recall report")
    sub.add_parser("gallery", parents=[common], help="export the HTML retrieval gallery")
    sub.add_parser("scale-sweep", parents=[common],
                   help="train on increasing triplet counts and plot recall")
    sub.add_parser("ablate", parents=[common],
                   help="compare full / no-EMA / no-cross-attention variants")
    return parser


def _load(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.apply_seed(args.seed)
    cfg.resolve_paths(args.out)
    cfg.validate()
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _load(args)
    except (ConfigError, FileNotFoundError, yaml.YAMLError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "generate-data":
            collection, triplets, cases = experiments.generate_data(cfg)
            print(f"collection: {len(collection)} images -> {cfg.paths.collection}")
            print(f"dataset: {len(triplets)} triplets -> {cfg.paths.dataset}")
            print(f"eval cases: {len(cases)} -> {cfg.paths.eval_cases}")
        elif args.command == "train":
            ckpt = experiments.run_train(cfg)
            print(f"trained {ckpt.step} steps -> {cfg.paths.checkpoint}")
        elif args.command == "finetune-combiner":
            ckpt = experiments.run_finetune_combiner(cfg)
            print(f"lambda = {float(ckpt.lam):.4f} -> {cfg.paths.checkpoint}")
        elif args.command == "evaluate":
            report = experiments.run_evaluate(cfg)
            print(report.format_table())
            print(f"report -> {cfg.paths.report}")
        elif args.command == "gallery":
            experiments.run_gallery(cfg)
            print(f"gallery -> {cfg.paths.gallery}")
        elif args.command == "scale-sweep":
            rows = experiments.run_scale_sweep(cfg)
            for row in rows:
                print(row)
            print(f"csv -> {cfg.paths.sweep_csv}; plot -> {cfg.paths.sweep_plot}")
        elif args.command == "ablate":
            rows = experiments.run_ablate(cfg)
            for row in rows:
                print(row)
            print(f"csv -> {cfg.paths.ablation_csv}")
        else:  # pragma: no cover - argparse enforces the choices
            raise AssertionError(args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface with command context
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        logger.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
