"""
bench.py — the benchmark runner.

Flow
----
  build_model / build_test_set   train or load the classifier, generate or read the test set
  build_attack_plan              pure: which images get attacked, with which seed
  execute_attack_plan            runs one attack per planned image, in worker threads
  run_benchmark                  both attacks, budget curves, fits, audits → BenchmarkReport
  write_report                   report JSON plus the record / trajectory CSVs it names

Only images the model classifies correctly are attacked; the rest are
listed as misclassified and count against clean accuracy only.  The
payload is a pure function of the config; wall-clock timings live beside
it and are excluded from its hash.
"""

from __future__ import annotations

import asyncio
import hashlib
import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TypeVar

from tqdm import tqdm

from services import local_store
from services.blackbox import BlackboxResult, BlackboxSettings, run_blackbox
from services.imaging import distortion, psnr
from services.local_store import DatasetError
from services.metrics import (
    AccuracyCurve,
    AttackRecord,
    EmptyTestSetError,
    FitError,
    TestSetSummary,
    curve_from_records,
    fit_problems,
)
from services.model import (
    ACCURACY_FLOOR,
    Classifier,
    LabeledImage,
    SyntheticDatasetSpec,
    encode_checkpoint,
    generate_dataset,
    make_rng,
    predict,
    predict_batch,
    train_adversarial,
    train_standard,
)
from services.settings import BenchmarkConfig
from services.whitebox import BpSettings, WhiteboxBudget, best_effort_pgd, bp_attack

logger = logging.getLogger(__name__)

# Test images come from the same generator as training, under another seed.
TEST_SEED_OFFSET = 1_000_003

T = TypeVar("T")


# ---------------------------------------------------------------------------
# Model and data
# ---------------------------------------------------------------------------

def training_spec(cfg: BenchmarkConfig) -> SyntheticDatasetSpec:
    return SyntheticDatasetSpec(
        num_classes=cfg.classes,
        image_size=cfg.image_size,
        samples_per_class=cfg.train_per_class,
        seed=cfg.seed,
    )


def build_model(cfg: BenchmarkConfig) -> Classifier:
    if cfg.model != "train":
        logger.info("loading checkpoint %s", cfg.model)
        return local_store.load_checkpoint(cfg.model)
    spec = training_spec(cfg)
    if cfg.adv_eps > 0:
        logger.info("adversarial training: eps %.3g, %d PGD steps, %d epochs", cfg.adv_eps, cfg.adv_pgd_steps, cfg.train_epochs)
        return train_adversarial(spec, cfg.train_epochs, cfg.seed, cfg.adv_pgd_steps, cfg.adv_eps)
    logger.info("standard training: %d epochs", cfg.train_epochs)
    return train_standard(spec, cfg.train_epochs, cfg.seed)


def build_test_set(cfg: BenchmarkConfig, m: Classifier) -> list[LabeledImage]:
    if cfg.dataset == "synthetic":
        per_class = math.ceil(cfg.images / cfg.classes)
        spec = SyntheticDatasetSpec(
            num_classes=cfg.classes,
            image_size=cfg.image_size,
            samples_per_class=per_class,
            seed=cfg.seed + TEST_SEED_OFFSET,
        )
        samples = generate_dataset(spec)[: cfg.images]
    else:
        samples = local_store.load_ppm_dataset(cfg.dataset)[: cfg.images]

    if not samples:
        raise DatasetError(f"test set {cfg.dataset!r} is empty")
    for s in samples:
        if s.image.shape != tuple(m.input_shape):
            raise DatasetError(f"{s.image_id}: shape {s.image.shape} does not match model input {tuple(m.input_shape)}")
        if s.label >= m.num_classes:
            raise DatasetError(f"{s.image_id}: label {s.label} outside the model's {m.num_classes} classes")
    return samples


# ---------------------------------------------------------------------------
# Plan / execute
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlannedAttack:
    index: int
    sample: LabeledImage


@dataclass
class AttackPlan:
    seed: int
    targets: list[PlannedAttack] = field(default_factory=list)
    misclassified: list[str] = field(default_factory=list)

    @property
    def test_size(self) -> int:
        return len(self.targets) + len(self.misclassified)

    @property
    def clean_accuracy(self) -> float:
        return len(self.targets) / self.test_size if self.test_size else 0.0


def build_attack_plan(m: Classifier, samples: Sequence[LabeledImage], seed: int) -> AttackPlan:
    """
    No attacks run here.  The index of each image in the
    test set fixes its random stream, so the plan does not depend on how
    many images end up attacked.
    """
    plan = AttackPlan(seed=seed)
    predictions = predict_batch(m, [s.image for s in samples])
    for index, (sample, pred) in enumerate(zip(samples, predictions)):
        if pred == sample.label:
            plan.targets.append(PlannedAttack(index, sample))
        else:
            plan.misclassified.append(sample.image_id)
    return plan


async def execute_attack_plan(
    plan: AttackPlan,
    attack: Callable[[PlannedAttack], T],
    workers: int = 1,
    desc: str = "attack",
) -> list[T]:
    """
    Runs attack(target) for every planned image, at most `workers` at a time,
    each in its own thread.  Results come back keyed by image id and are
    returned sorted by it, whatever order the threads finish in.
    """
    semaphore = asyncio.Semaphore(max(1, workers))
    results: dict[str, T] = {}
    with tqdm(total=len(plan.targets), desc=desc, unit="img", leave=False) as progress:

        async def run_one(target: PlannedAttack) -> None:
            async with semaphore:
                results[target.sample.image_id] = await asyncio.to_thread(attack, target)
            progress.update(1)

        await asyncio.gather(*(run_one(t) for t in plan.targets))
    return [results[k] for k in sorted(results)]


def _run(plan: AttackPlan, attack: Callable[[PlannedAttack], T], workers: int, desc: str) -> list[T]:
    return asyncio.run(execute_attack_plan(plan, attack, workers, desc))


# ---------------------------------------------------------------------------
# Attacks
# ---------------------------------------------------------------------------

def bp_settings(cfg: BenchmarkConfig) -> BpSettings:
    return BpSettings(
        pull=cfg.bp_pull,
        margin=cfg.bp_margin,
        quantize_every_step=cfg.wb_quantization == "per_step",
    )


def blackbox_settings(cfg: BenchmarkConfig) -> BlackboxSettings:
    return BlackboxSettings(
        init_draws=cfg.bb_init_draws,
        init_bisections=cfg.bb_init_bisections,
        refine_steps=cfg.bb_refine_steps,
        thetas=cfg.bb_thetas,
        dct_fraction=cfg.bb_dct_fraction,
        quantize_queries=cfg.bb_quantization == "per_query",
    )


def whitebox_budgets(k: int) -> list[int]:
    """K/8, K/4, K/2, K, floored at 2 and deduplicated."""
    return sorted({max(2, k // 8), max(2, k // 4), max(2, k // 2), k})


def blackbox_budgets(q: int, points: int) -> list[int]:
    """Evenly spaced query budgets ending at q."""
    return sorted({max(1, round(q * j / points)) for j in range(1, points + 1)})


def _bp(m: Classifier, budget: int, settings: BpSettings) -> Callable[[PlannedAttack], AttackRecord]:
    return lambda t: bp_attack(m, t.sample, WhiteboxBudget(budget), settings)


def _pgd(m: Classifier, steps: int, per_step: bool) -> Callable[[PlannedAttack], AttackRecord]:
    return lambda t: best_effort_pgd(m, t.sample, steps, quantize_every_step=per_step)


def _blackbox(m: Classifier, plan: AttackPlan, queries: int, settings: BlackboxSettings) -> Callable[[PlannedAttack], BlackboxResult]:
    return lambda t: run_blackbox(m, t.sample, queries, make_rng(plan.seed, t.index), settings)


def records_at_budget(results: Sequence[BlackboxResult], budget: int) -> list[AttackRecord]:
    """
    What each black-box run had reached after `budget` queries: the last
    accepted distortion at or before that query index.
    """
    records = []
    for r in results:
        reached = [(q, d) for q, d in r.trajectory if q <= budget]
        image_id = r.record.image_id
        if reached:
            q, d = reached[-1]
            records.append(AttackRecord(image_id, True, d, min(budget, r.queries)))
        else:
            records.append(AttackRecord(image_id, False, None, min(budget, r.queries)))
    return records


def fit_records(records: Sequence[AttackRecord], points: int, label: str) -> tuple[AccuracyCurve | None, str | None]:
    try:
        return curve_from_records(TestSetSummary(records), points=points), None
    except (FitError, EmptyTestSetError) as e:
        logger.warning("%s: fit failed: %s", label, e)
        return None, str(e)


def run_attack(cfg: BenchmarkConfig, m: Classifier, plan: AttackPlan, attack: str) -> list[AttackRecord] | list[BlackboxResult]:
    """One attack over the plan: 'bp' and 'pgd' give records, 'blackbox' full results."""
    per_step = cfg.wb_quantization == "per_step"
    if attack == "bp":
        return _run(plan, _bp(m, cfg.wb_budget, bp_settings(cfg)), cfg.workers, "bp")
    if attack == "pgd":
        return _run(plan, _pgd(m, cfg.wb_budget, per_step), cfg.workers, "pgd")
    if attack == "blackbox":
        return _run(plan, _blackbox(m, plan, cfg.bb_queries, blackbox_settings(cfg)), cfg.workers, "blackbox")
    raise ValueError(f"unknown attack {attack!r}")


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def _curve_entry(curve: AccuracyCurve | None, error: str | None, label: str = "curve") -> dict[str, Any]:
    if curve is None:
        return {
            "eta0": None, "lambda": None, "r2": None, "d_half": None, "psnr": None,
            "error": error, "problems": [],
        }
    problems = fit_problems(curve)
    for p in problems:
        logger.warning("%s: poor fit: %s", label, p)
    return {
        "eta0": curve.eta0,
        "lambda": curve.lam,
        "r2": curve.r2,
        "d_half": curve.d_half,
        "psnr": psnr(curve.d_half),
        "error": None,
        "problems": problems,
    }


def _series(budgets: Sequence[int], records_by_budget: dict[int, list[AttackRecord]], points: int, label: str) -> list[dict]:
    series = []
    for b in budgets:
        curve, _ = fit_records(records_by_budget[b], points, f"{label}@{b}")
        series.append({"budget": b, "d_half": None if curve is None else curve.d_half})
    return series


def _audit(
    m: Classifier,
    plan: AttackPlan,
    cfg: BenchmarkConfig,
    wb: Sequence[AttackRecord],
    bb: Sequence[BlackboxResult],
) -> dict[str, Any]:
    """Re-present every adversarial image and check the attack bookkeeping."""
    by_id = {t.sample.image_id: t.sample for t in plan.targets}
    checked = passed = consistent = 0
    for r in list(wb) + [res.record for res in bb]:
        if not r.success:
            continue
        checked += 1
        sample = by_id[r.image_id]
        if r.adversarial is not None and predict(m, r.adversarial) != sample.label:
            passed += 1
            if abs(distortion(r.adversarial, sample.image) - r.distortion) <= 1e-9:
                consistent += 1

    queries = sum(res.queries for res in bb)
    integer_queries = sum(res.integer_queries for res in bb)
    gradient_ok = all(r.cost <= cfg.wb_budget for r in wb)
    query_ok = all(res.record.cost == res.queries <= cfg.bb_queries for res in bb)
    return {
        "reverified": {"checked": checked, "passed": passed, "distortion_consistent": consistent},
        "integer_queries": {
            "applicable": cfg.bb_quantization == "per_query",
            "integer": integer_queries,
            "total": queries,
        },
        "accounting": {
            "gradient_calls": sum(r.cost for r in wb),
            "queries": queries,
            "within_budget": gradient_ok and query_ok,
        },
    }


def audits_pass(audits: dict[str, Any]) -> bool:
    rev = audits["reverified"]
    iq = audits["integer_queries"]
    return (
        rev["passed"] == rev["checked"] == rev["distortion_consistent"]
        and (not iq["applicable"] or iq["integer"] == iq["total"])
        and audits["accounting"]["within_budget"]
    )


def table_names(out: Path | str) -> dict[str, str]:
    """File names of the CSVs written next to a report."""
    stem = Path(out).stem
    return {
        "whitebox": f"{stem}_whitebox.csv",
        "blackbox": f"{stem}_blackbox.csv",
        "trajectories": f"{stem}_trajectories.csv",
    }


@dataclass
class BenchmarkReport:
    payload: dict[str, Any]
    timings: dict[str, float]
    whitebox_records: list[AttackRecord] = field(default_factory=list)
    blackbox_records: list[AttackRecord] = field(default_factory=list)
    trajectories: dict[str, list[tuple[int, float]]] = field(default_factory=dict)

    @property
    def d_half_whitebox(self) -> float | None:
        return self.payload["whitebox"]["curve"]["d_half"]

    @property
    def d_half_blackbox(self) -> float | None:
        return self.payload["blackbox"]["curve"]["d_half"]

    @property
    def eta0(self) -> float:
        return self.payload["eta0"]

    @property
    def fit_failed(self) -> bool:
        return self.d_half_whitebox is None or self.d_half_blackbox is None

    @property
    def checks(self) -> dict[str, bool]:
        return self.payload["checks"]

    @property
    def checks_passed(self) -> bool:
        return all(self.checks.values())

    @property
    def payload_sha256(self) -> str:
        return local_store.payload_digest(self.payload)


def run_benchmark(cfg: BenchmarkConfig) -> BenchmarkReport:
    timings: dict[str, float] = {}
    started = time.perf_counter()

    m = build_model(cfg)
    samples = build_test_set(cfg, m)
    plan = build_attack_plan(m, samples, cfg.seed)
    timings["model"] = time.perf_counter() - started
    logger.info(
        "%d test images, %d classified correctly (accuracy %.3f)",
        plan.test_size, len(plan.targets), plan.clean_accuracy,
    )
    accuracy_ok = plan.clean_accuracy >= ACCURACY_FLOOR
    if not accuracy_ok:
        logger.warning("held-out accuracy %.3f is below the %.2f floor", plan.clean_accuracy, ACCURACY_FLOOR)

    # White box
    t0 = time.perf_counter()
    per_step = cfg.wb_quantization == "per_step"
    settings = bp_settings(cfg)
    budgets = whitebox_budgets(cfg.wb_budget) if cfg.wb_curve else [cfg.wb_budget]
    bp_by_budget = {b: _run(plan, _bp(m, b, settings), cfg.workers, f"bp K={b}") for b in budgets}
    wb_records = bp_by_budget[cfg.wb_budget]
    pgd_by_budget = {}
    if cfg.pgd_compare:
        pgd_by_budget = {b: _run(plan, _pgd(m, b, per_step), cfg.workers, f"pgd K={b}") for b in budgets}
    timings["whitebox"] = time.perf_counter() - t0

    # Black box
    t0 = time.perf_counter()
    bb_results = _run(plan, _blackbox(m, plan, cfg.bb_queries, blackbox_settings(cfg)), cfg.workers, "blackbox")
    bb_records = [r.record for r in bb_results]
    timings["blackbox"] = time.perf_counter() - t0

    # Fits
    wb_curve, wb_error = fit_records(wb_records, cfg.grid_points, "whitebox")
    bb_curve, bb_error = fit_records(bb_records, cfg.grid_points, "blackbox")
    q_budgets = blackbox_budgets(cfg.bb_queries, cfg.bb_curve_points)
    budget_curves: dict[str, list[dict]] = {
        "bp": _series(budgets, bp_by_budget, cfg.grid_points, "bp") if cfg.wb_curve else [],
        "blackbox": _series(
            q_budgets, {q: records_at_budget(bb_results, q) for q in q_budgets}, cfg.grid_points, "blackbox"
        ),
    }
    if cfg.pgd_compare:
        budget_curves["pgd"] = _series(budgets, pgd_by_budget, cfg.grid_points, "pgd")

    audits = _audit(m, plan, cfg, wb_records, bb_results)
    audits_ok = audits_pass(audits)
    if not audits_ok:
        logger.warning("audit failed: %s", audits)
    wb_entry = _curve_entry(wb_curve, wb_error, "whitebox")
    bb_entry = _curve_entry(bb_curve, bb_error, "blackbox")

    names = table_names(cfg.out)
    payload: dict[str, Any] = {
        "config": cfg.to_dict(),
        "model_sha256": hashlib.sha256(encode_checkpoint(m)).hexdigest(),
        "eta0": plan.clean_accuracy,
        "test_images": plan.test_size,
        "attacked": len(plan.targets),
        "misclassified": sorted(plan.misclassified),
        "whitebox": {
            "attack": "bp",
            "budget": cfg.wb_budget,
            "quantization": cfg.wb_quantization,
            "successes": sum(r.success for r in wb_records),
            "curve": wb_entry,
            "records": names["whitebox"],
        },
        "blackbox": {
            "attack": "geometric",
            "budget": cfg.bb_queries,
            "quantization": cfg.bb_quantization,
            "successes": sum(r.success for r in bb_records),
            "curve": bb_entry,
            "records": names["blackbox"],
            "trajectories": names["trajectories"],
        },
        "budget_curves": budget_curves,
        "audits": audits,
        "checks": {
            "accuracy": accuracy_ok,
            "audits": audits_ok,
            "fits": all(e["error"] is None and not e["problems"] for e in (wb_entry, bb_entry)),
        },
    }
    timings["total"] = time.perf_counter() - started
    return BenchmarkReport(
        payload=payload,
        timings=timings,
        whitebox_records=wb_records,
        blackbox_records=bb_records,
        trajectories={r.record.image_id: r.trajectory for r in bb_results},
    )


def write_report(report: BenchmarkReport, out: Path | str) -> Path:
    target = local_store.resolve(out)
    names = table_names(target)
    local_store.write_records(target.parent / names["whitebox"], report.whitebox_records)
    local_store.write_records(target.parent / names["blackbox"], report.blackbox_records)
    local_store.write_trajectories(target.parent / names["trajectories"], report.trajectories)
    return local_store.save_report(target, report.payload, report.timings)


def recompute_half_distortions(report_path: Path | str) -> dict[str, float | None]:
    """
    Refit both curves from the record tables a report names, using only the
    metrics module.  Matches the report's d_half values when the report is
    self-consistent.
    """
    target = local_store.resolve(report_path)
    payload = local_store.load_report(target).get("payload")
    if not payload:
        raise DatasetError(f"{target}: no readable report")
    points = payload["config"]["grid_points"]
    out = {}
    for attack in ("whitebox", "blackbox"):
        records = local_store.read_records(target.parent / payload[attack]["records"])
        curve, _ = fit_records(records, points, attack)
        out[attack] = None if curve is None else curve.d_half
    return out
