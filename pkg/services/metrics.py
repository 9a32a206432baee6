"""
metrics.py — from per-image attack records to the half-distortion.

  operating_characteristic  P(D): fraction of the test set hacked within D
  fit_exponential           ln η(D) = ln η(0) − λD by ordinary least squares
  half_distortion           D½ = ln 2 / λ
  curve_from_records        samples η(D) on a grid and fits it
  fit_problems              flags a poor fit (low r2, prefactor above 1)

Only images the model classified correctly before the attack belong in a
TestSetSummary; clean accuracy is reported separately by the runner.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from services.imaging import Image

logger = logging.getLogger(__name__)

DEFAULT_GRID_POINTS = 50
LN2 = math.log(2.0)


class FitError(ValueError):
    pass


class InsufficientPointsError(FitError):
    pass


class NonDecayingError(FitError):
    pass


class EmptyTestSetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Data model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttackRecord:
    image_id: str
    success: bool
    distortion: float | None
    cost: int
    # Adversarial image kept for re-verification; never serialised.
    adversarial: Image | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.success and self.distortion is None:
            raise ValueError(f"record {self.image_id}: success requires a distortion")
        if not self.success and self.distortion is not None:
            raise ValueError(f"record {self.image_id}: failed attack cannot carry a distortion")
        if self.distortion is not None and self.distortion < 0:
            raise ValueError(f"record {self.image_id}: negative distortion {self.distortion}")
        if self.cost < 0:
            raise ValueError(f"record {self.image_id}: negative cost {self.cost}")


@dataclass(frozen=True)
class TestSetSummary:
    records: tuple[AttackRecord, ...]

    __test__ = False  # not a pytest class

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))

    @property
    def m(self) -> int:
        return len(self.records)

    def successful_distortions(self) -> np.ndarray:
        return np.array([r.distortion for r in self.records if r.success], dtype=np.float64)


@dataclass(frozen=True)
class AccuracyCurve:
    eta0: float
    lam: float
    r2: float
    d_half: float | None

    def __post_init__(self) -> None:
        if self.eta0 < 0:
            raise ValueError(f"eta0 must be non-negative, got {self.eta0}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.r2 > 1.0 + 1e-12:
            raise ValueError(f"r2 cannot exceed 1, got {self.r2}")

    def eta(self, d: float | np.ndarray) -> float | np.ndarray:
        return self.eta0 * np.exp(-self.lam * np.asarray(d, dtype=np.float64))


# ---------------------------------------------------------------------------
# Operating characteristic
# ---------------------------------------------------------------------------

def operating_characteristic(s: TestSetSummary, d: float) -> float:
    """P(D) = |{i : success_i and distortion_i <= D}| / m."""
    if s.m == 0:
        raise EmptyTestSetError("operating characteristic of an empty test set")
    hacked = s.successful_distortions()
    return float(np.count_nonzero(hacked <= d)) / s.m


def accuracy_at(s: TestSetSummary, d: float) -> float:
    return 1.0 - operating_characteristic(s, d)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def fit_exponential(points: Sequence[tuple[float, float]]) -> AccuracyCurve:
    """
    Least squares on ln η = ln η(0) − λD.  Points with η <= 0 carry no
    information in log space and are dropped; r2 is computed in log space.
    """
    usable = [(float(d), float(e)) for d, e in points if e > 0]
    ds = np.array([d for d, _ in usable], dtype=np.float64)
    if len(usable) < 3 or np.unique(ds).size < 3:
        raise InsufficientPointsError(
            f"need at least 3 points with distinct D and η > 0, got {len(usable)}"
        )
    log_eta = np.log([e for _, e in usable])

    if np.ptp(log_eta) == 0.0:
        raise NonDecayingError("accuracy is constant over the grid")
    fit = stats.linregress(ds, log_eta)
    lam = -float(fit.slope)
    if lam <= 0:
        raise NonDecayingError(f"fitted decay rate {lam:.6g} is not positive")

    predicted = fit.intercept + fit.slope * ds
    ss_res = float(np.sum((log_eta - predicted) ** 2))
    ss_tot = float(np.sum((log_eta - log_eta.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot
    eta0 = math.exp(fit.intercept)
    if eta0 > 1.0:
        logger.debug("fitted prefactor %.4f exceeds 1", eta0)
    return AccuracyCurve(eta0=eta0, lam=lam, r2=r2, d_half=LN2 / lam)


def half_distortion(curve: AccuracyCurve) -> float:
    if curve.lam <= 0:
        raise NonDecayingError(f"half-distortion undefined for lambda = {curve.lam}")
    return LN2 / curve.lam


def default_grid(s: TestSetSummary, points: int = DEFAULT_GRID_POINTS) -> np.ndarray:
    hacked = s.successful_distortions()
    top = float(hacked.max()) if hacked.size else 0.0
    return np.linspace(0.0, top, points)


def curve_from_records(
    s: TestSetSummary,
    grid: Sequence[float] | None = None,
    points: int = DEFAULT_GRID_POINTS,
) -> AccuracyCurve:
    """Sample η(D) on the grid (default: evenly spaced to the largest distortion) and fit."""
    if s.m == 0:
        raise EmptyTestSetError("no attacked images")
    grid = default_grid(s, points) if grid is None else np.asarray(grid, dtype=np.float64)
    samples = [(float(d), accuracy_at(s, float(d))) for d in grid]
    return fit_exponential([(d, e) for d, e in samples if e > 0])


# ---------------------------------------------------------------------------
# Fit quality
# ---------------------------------------------------------------------------

MIN_R2 = 0.95
ETA0_SLACK = 0.1


def fit_problems(curve: AccuracyCurve, min_r2: float = MIN_R2, eta0_slack: float = ETA0_SLACK) -> list[str]:
    """
    Reasons the exponential model does not describe the data.  An accuracy
    can never exceed 1, so a fitted prefactor well above 1 means the
    measured curve is not exponential near D = 0.
    """
    problems = []
    if curve.r2 < min_r2:
        problems.append(f"r2 {curve.r2:.4f} below {min_r2:.2f}")
    if curve.eta0 > 1.0 + eta0_slack:
        problems.append(f"fitted eta0 {curve.eta0:.4f} exceeds 1")
    return problems
