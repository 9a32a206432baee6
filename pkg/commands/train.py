"""
train.py — `train`: fit a classifier on the synthetic training set and
write its checkpoint to --out.  Clean accuracy on the test set is logged.
"""

from __future__ import annotations

import argparse
import logging

from commands import add_common_flags, config_from_args
from services import local_store
from services.bench import build_attack_plan, build_test_set, training_spec
from services.model import ACCURACY_FLOOR, train_adversarial, train_standard

logger = logging.getLogger(__name__)


def run(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    spec = training_spec(cfg)
    if cfg.adv_eps > 0:
        m = train_adversarial(spec, cfg.train_epochs, cfg.seed, cfg.adv_pgd_steps, cfg.adv_eps)
    else:
        m = train_standard(spec, cfg.train_epochs, cfg.seed)
    path = local_store.save_checkpoint(cfg.out, m)

    plan = build_attack_plan(m, build_test_set(cfg, m), cfg.seed)
    if plan.clean_accuracy < ACCURACY_FLOOR:
        logger.warning("held-out accuracy %.3f is below the %.2f floor", plan.clean_accuracy, ACCURACY_FLOOR)
    print(f"checkpoint {path}  test accuracy {plan.clean_accuracy:.3f} on {plan.test_size} images")
    return 0


def setup(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("train", help="train a classifier and write a checkpoint")
    add_common_flags(parser)
    parser.set_defaults(handler=run)
