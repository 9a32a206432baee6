"""
main.py — command-line entry point.

  python main.py train     --out models/desk.ckpt
  python main.py attack    --model models/desk.ckpt --attack blackbox --out runs/bb.csv
  python main.py bench     --config bench.cfg --out runs/desk.json
  python main.py plot-data runs/desk.json runs/adv.json --out plots
  python main.py recompute runs/desk.json

Exit codes: 0 success, 2 config error, 3 model/dataset error, 4 fit failure.
"""

from __future__ import annotations

import argparse
import importlib
import logging
import os
import sys

from dotenv import load_dotenv

# BENCH_DATA_DIR is read when services.local_store is imported.
load_dotenv()

from services.imaging import PpmError, ShapeMismatchError  # noqa: E402
from services.local_store import DatasetError  # noqa: E402
from services.metrics import EmptyTestSetError, FitError  # noqa: E402
from services.model import CheckpointError, ModelError  # noqa: E402
from services.settings import ConfigError  # noqa: E402

logger = logging.getLogger("bench")

COMMANDS = ("train", "attack", "bench", "plot_data", "recompute")

EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_FIT = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="halfbench", description="Half-distortion robustness benchmark")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        importlib.import_module(f"commands.{name}").setup(subparsers)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("BENCH_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error("config: %s", e)
        return EXIT_CONFIG
    except (ModelError, CheckpointError, DatasetError, PpmError, ShapeMismatchError, EmptyTestSetError, OSError) as e:
        logger.error("%s: %s", args.command, e)
        return EXIT_INPUT
    except FitError as e:
        logger.error("fit: %s", e)
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
