"""
recompute.py — `recompute REPORT`: refit both curves from the record tables
a report names and compare them with the D½ values the report holds.
Exits 4 when a curve cannot be refitted or the values disagree.
"""

from __future__ import annotations

import argparse
import logging
import math

from services import local_store
from services.bench import recompute_half_distortions

logger = logging.getLogger(__name__)


def _same(a: float | None, b: float | None) -> bool:
    if a is None or b is None:
        return a is b
    return math.isclose(a, b, rel_tol=1e-9, abs_tol=0.0)


def run(args: argparse.Namespace) -> int:
    recomputed = recompute_half_distortions(args.report)
    payload = local_store.load_report(args.report)["payload"]
    status = 0
    for attack, d_half in recomputed.items():
        reported = payload[attack]["curve"]["d_half"]
        if d_half is None:
            logger.error("%s: refit failed", attack)
            status = 4
        elif not _same(d_half, reported):
            logger.error("%s: recomputed D½ %r differs from reported %r", attack, d_half, reported)
            status = 4
        print(f"{attack}: reported {reported}  recomputed {d_half}")
    return status


def setup(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("recompute", help="refit D½ from a report's record tables")
    parser.add_argument("report", metavar="REPORT")
    parser.set_defaults(handler=run)
