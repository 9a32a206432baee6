"""
plot_data.py — `plot-data REPORT...`: budget curves, the white/black-box
scatter and a summary table for one or more reports, written to the --out
directory.  Each report is labelled by its file name.
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from services import local_store
from services.plot_data import emit_plot_data
from services.settings import ConfigError

logger = logging.getLogger(__name__)


def run(args: argparse.Namespace) -> int:
    if not args.out:
        raise ConfigError("missing required key 'out'", key="out")
    reports = []
    for path in args.reports:
        doc = local_store.load_report(path)
        if not doc:
            logger.warning("skipping unreadable report %s", path)
            continue
        reports.append((Path(path).stem, doc["payload"]))
    manifest = emit_plot_data(reports, args.out)
    print(f"{len(reports)} report(s) → {', '.join(manifest.files)}; {len(manifest.warnings)} warning(s)")
    return 0


def setup(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("plot-data", help="CSV series for plotting from reports")
    parser.add_argument("reports", nargs="*", metavar="REPORT")
    parser.add_argument("--out", metavar="DIR", help="output directory")
    parser.set_defaults(handler=run)
