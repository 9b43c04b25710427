"""Command-line driver: ``privfer <stage> [options]`` or ``privfer run --stages a,b,c``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import PrivferError, UsageError
from .pipeline import STAGES, PipelineConfig, parse_stages, run_pipeline


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="privfer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run several stages in graph order")
    run.add_argument("--stages", default="all", help=f"comma-separated subset of: {','.join(STAGES)}")
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage only")
    cfg = sub.add_parser("config", parents=[common], help="print the effective config")
    cfg.set_defaults(print_config=True)
    return parser


def load_config(args) -> PipelineConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.config is not None:
        return PipelineConfig.load(args.config, **overrides)
    return PipelineConfig(**overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        config = load_config(args)
        if args.command == "config":
            sys.stdout.write(config.to_text())
            return 0
        stages = parse_stages(args.stages) if args.command == "run" else [args.command]
        run_pipeline(config, stages)
    except UsageError as exc:
        print(f"privfer: usage error: {exc}", file=sys.stderr)
        return 2
    except PrivferError as exc:
        print(f"privfer: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
