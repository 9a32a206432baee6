"""
Shared flags for the CLI subcommands.

Every subcommand reads an optional --config file and lets the flags below
override individual keys.  Flags left unset fall through to the file, then
to config.BENCH_CONFIG_DEFAULT.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from services.settings import BenchmarkConfig, ConfigError, parse_config

# flag dest → config key
_FLAG_KEYS = {
    "model": "model",
    "dataset": "dataset",
    "images": "images",
    "wb_budget": "wb_budget",
    "bb_queries": "bb_queries",
    "seed": "seed",
    "out": "out",
}


def add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--model", help='"train" or a checkpoint path')
    parser.add_argument("--dataset", help='"synthetic" or a PPM directory with labels.csv')
    parser.add_argument("--images", type=int, metavar="N", help="test images to use")
    parser.add_argument("--wb-budget", type=int, metavar="K", help="gradient calls per image")
    parser.add_argument("--bb-queries", type=int, metavar="Q", help="black-box queries per image")
    parser.add_argument("--seed", type=int, metavar="S")
    parser.add_argument("--out", metavar="PATH", help="output file or directory")


def config_from_args(args: argparse.Namespace) -> BenchmarkConfig:
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as e:
            raise ConfigError(f"could not read config {args.config}: {e}") from e
    overrides = {key: getattr(args, dest) for dest, key in _FLAG_KEYS.items()}
    return parse_config(text, overrides)
