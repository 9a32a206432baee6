"""
bench.py — `bench`: the full benchmark.  Writes the report JSON to --out
and the record tables next to it.  Exits 4 (report still written) when a
curve could not be fitted.  Failed checks (held-out accuracy, audits, fit
quality) are logged and printed but do not change the exit code.
"""

from __future__ import annotations

import argparse
import logging

from commands import add_common_flags, config_from_args
from services.bench import run_benchmark, write_report

logger = logging.getLogger(__name__)


def _fmt(d_half: float | None) -> str:
    return "fit failed" if d_half is None else f"{d_half:.3f}"


def run(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    report = run_benchmark(cfg)
    path = write_report(report, cfg.out)
    failed = [name for name, ok in report.checks.items() if not ok]
    if failed:
        logger.warning("checks failed: %s, see %s", ", ".join(failed), path)
    print(
        f"accuracy {report.eta0:.3f}  D½ white-box {_fmt(report.d_half_whitebox)}  "
        f"black-box {_fmt(report.d_half_blackbox)}  → {path}"
    )
    if failed:
        print(f"CHECKS FAILED: {', '.join(failed)}")
    return 4 if report.fit_failed else 0


def setup(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("bench", help="run both attacks, fit D½ and write a report")
    add_common_flags(parser)
    parser.set_defaults(handler=run)
