"""
attack.py — `attack`: run one attack over the test set and write its
per-image record table (and, for the black box, the trajectories) to --out.
"""

from __future__ import annotations

import argparse
import logging

from commands import add_common_flags, config_from_args
from services import local_store
from services.bench import build_attack_plan, build_model, build_test_set, fit_records, run_attack
from services.imaging import psnr

logger = logging.getLogger(__name__)

ATTACKS = ("bp", "pgd", "blackbox")


def run(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    m = build_model(cfg)
    plan = build_attack_plan(m, build_test_set(cfg, m), cfg.seed)
    results = run_attack(cfg, m, plan, args.attack)

    out = local_store.resolve(cfg.out)
    if args.attack == "blackbox":
        records = [r.record for r in results]
        trajectories = out.with_name(f"{out.stem}_trajectories.csv")
        local_store.write_trajectories(trajectories, {r.record.image_id: r.trajectory for r in results})
    else:
        records = results
    local_store.write_records(out, records)

    curve, error = fit_records(records, cfg.grid_points, args.attack)
    if curve is None:
        print(f"{args.attack}: {len(records)} images attacked, fit failed: {error}")
        return 4
    print(
        f"{args.attack}: {len(records)} images attacked, D½ {curve.d_half:.3f} "
        f"(PSNR {psnr(curve.d_half):.1f} dB, R² {curve.r2:.3f}) → {out}"
    )
    return 0


def setup(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("attack", help="run one attack and write its record table")
    add_common_flags(parser)
    parser.add_argument("--attack", choices=ATTACKS, default="bp")
    parser.set_defaults(handler=run)
