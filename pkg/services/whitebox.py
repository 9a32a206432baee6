"""
whitebox.py — gradient-based attacks on the margin loss.

bp_attack
  Stage 1: accelerated normalised-gradient descent
      x(t+1) = x(t) − α·γ(t+1)·∇L/‖∇L‖,   γ(t) = t
  with α chosen so that, to first order, the loss is cancelled after
  κ = max(1, ⌊K/3⌋) iterations:  α = L(x_o) / (‖∇L(x_o)‖ · κ(κ+1)/2).
  Stage 2 alternates a pull towards the original with a Newton-style
  return across the boundary until K gradient calls are spent.

pgd_attack / best_effort_pgd
  l2 PGD within a fixed RMSE radius, and the per-image search over that
  radius (geometric ladder, then bisection) keeping the smallest success.

All iterations run on unit-scale float64 tensors.  Quantization to pixels is
a post-processing step unless quantize_every_step is set, and success is
always judged on the quantized image.  Every record's cost is the exact
number of gradient evaluations, counted by GradientOracle.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from config import BP_DEFAULTS, PGD_LADDER_DEFAULTS
from services.imaging import ContinuousImage, Image, distortion, from_unit, to_unit
from services.metrics import AttackRecord
from services.model import Classifier, LabeledImage, margin_loss_and_grad, predict

logger = logging.getLogger(__name__)


class AttackError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Budget and schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WhiteboxBudget:
    K: int

    def __post_init__(self) -> None:
        if self.K < 1:
            raise AttackError(f"gradient budget must be positive, got {self.K}")

    @property
    def kappa(self) -> int:
        return max(1, self.K // 3)


def gamma(t: int) -> float:
    return float(t)


def gamma_sum(kappa: int) -> float:
    return kappa * (kappa + 1) / 2.0


@dataclass(frozen=True)
class BpSchedule:
    alpha: float

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise AttackError(f"alpha must be positive, got {self.alpha}")

    def step(self, t: int) -> float:
        return self.alpha * gamma(t)


@dataclass(frozen=True)
class BpSettings:
    pull: float = BP_DEFAULTS["pull"]
    margin: float = BP_DEFAULTS["margin"]
    repair_steps: int = BP_DEFAULTS["repair_steps"]
    repair_growth: float = BP_DEFAULTS["repair_growth"]
    quantize_every_step: bool = False


class GradientOracle:
    """Margin loss and gradient for a fixed label; counts every evaluation."""

    def __init__(self, model: Classifier, label: int):
        self.model = model
        self.label = label
        self.calls = 0

    def __call__(self, x: ContinuousImage) -> tuple[float, ContinuousImage]:
        self.calls += 1
        return margin_loss_and_grad(self.model, x, self.label)


def step_scale(loss: float, grad_norm: float, kappa: int) -> float:
    """α = L / (‖∇L‖ · Σ_{j≤κ} γ(j))."""
    if loss <= 0:
        raise AttackError(f"initial loss {loss:.6g} is not positive; image is already on or past the boundary")
    if grad_norm == 0:
        raise AttackError("gradient vanishes at the original image")
    if kappa < 1:
        raise AttackError(f"kappa must be at least 1, got {kappa}")
    return loss / (grad_norm * gamma_sum(kappa))


def compute_alpha(m: Classifier, origin: Image, y: int, kappa: int) -> float:
    loss, grad = margin_loss_and_grad(m, to_unit(origin), y)
    return step_scale(loss, float(np.linalg.norm(grad)), kappa)


def _requantize(x: ContinuousImage) -> ContinuousImage:
    return to_unit(from_unit(x))


def _unit(v: ContinuousImage) -> tuple[ContinuousImage, float]:
    norm = float(np.linalg.norm(v))
    return (v / norm if norm > 0 else v), norm


# ---------------------------------------------------------------------------
# BP
# ---------------------------------------------------------------------------

@dataclass
class Stage1Result:
    x: ContinuousImage
    loss: float
    alpha: float
    losses: list[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.losses) - 1

    @property
    def adversarial(self) -> bool:
        return self.loss < 0


def bp_stage1(
    oracle: GradientOracle,
    x_o: ContinuousImage,
    budget: WhiteboxBudget,
    quantize_every_step: bool = False,
) -> Stage1Result:
    """
    Runs until the margin loss turns negative or K gradient calls are used.
    κ only fixes α; the ramp keeps growing past κ on curved boundaries.
    losses[t] is the loss at iterate t (losses[0] at the original).
    """
    loss, grad = oracle(x_o)
    direction, norm = _unit(grad)
    schedule = BpSchedule(step_scale(loss, norm, budget.kappa))
    x = x_o
    losses = [loss]
    t = 0
    while loss >= 0 and oracle.calls < budget.K and norm > 0:
        t += 1
        x = np.clip(x - schedule.step(t) * direction, 0.0, 1.0)
        if quantize_every_step:
            x = _requantize(x)
        loss, grad = oracle(x)
        direction, norm = _unit(grad)
        losses.append(loss)
    return Stage1Result(x=x, loss=loss, alpha=schedule.alpha, losses=losses)


class _BestAdversarial:
    """Lowest-distortion quantized adversarial seen so far (forward passes only)."""

    def __init__(self, model: Classifier, origin: Image, label: int):
        self.model = model
        self.origin = origin
        self.label = label
        self.image: Image | None = None
        self.dist = math.inf

    def consider(self, x: ContinuousImage) -> bool:
        candidate = from_unit(x)
        if predict(self.model, candidate) == self.label:
            return False
        d = distortion(candidate, self.origin)
        if d < self.dist:
            self.image, self.dist = candidate, d
        return True


def bp_attack(
    m: Classifier,
    sample: LabeledImage,
    budget: WhiteboxBudget,
    settings: BpSettings | None = None,
) -> AttackRecord:
    settings = settings or BpSettings()
    if budget.K < 2:
        raise AttackError(f"BP needs a budget of at least 2 gradient calls, got {budget.K}")
    origin, y = sample.image, sample.label
    if predict(m, origin) != y:
        return AttackRecord(sample.image_id, True, 0.0, 0, adversarial=origin)

    x_o = to_unit(origin)
    oracle = GradientOracle(m, y)
    best = _BestAdversarial(m, origin, y)
    try:
        stage1 = bp_stage1(oracle, x_o, budget, settings.quantize_every_step)
    except AttackError as e:
        logger.warning("bp on %s: %s", sample.image_id, e)
        return AttackRecord(sample.image_id, False, None, oracle.calls)

    x = stage1.x
    last_adversarial = x if stage1.adversarial else None
    if stage1.adversarial:
        best.consider(x)
        margin = settings.margin * stage1.losses[0]
        while oracle.calls < budget.K:
            x_pull = x + settings.pull * (x_o - x)
            loss, grad = oracle(x_pull)
            if loss < 0:
                x = x_pull
                last_adversarial = x
            else:
                direction, norm = _unit(grad)
                if norm == 0:
                    break
                x = np.clip(x_pull - (loss + margin) / norm * direction, 0.0, 1.0)
            if settings.quantize_every_step:
                x = _requantize(x)
            if not best.consider(x) and loss >= 0:
                # rounding pushed the returned point back inside the class
                margin *= 2.0
    if best.image is None and last_adversarial is not None:
        _repair(best, x_o, last_adversarial, settings)

    if best.image is None:
        return AttackRecord(sample.image_id, False, None, oracle.calls)
    return AttackRecord(sample.image_id, True, best.dist, oracle.calls, adversarial=best.image)


def _repair(best: _BestAdversarial, x_o: ContinuousImage, x: ContinuousImage, settings: BpSettings) -> None:
    """Scale the perturbation up until its quantized version is adversarial."""
    delta = x - x_o
    for k in range(1, settings.repair_steps + 1):
        if best.consider(np.clip(x_o + (1.0 + settings.repair_growth * k) * delta, 0.0, 1.0)):
            return


# ---------------------------------------------------------------------------
# PGD and best effort
# ---------------------------------------------------------------------------

def pgd_attack(
    m: Classifier,
    sample: LabeledImage,
    eps: float,
    steps: int,
    quantize_every_step: bool = False,
) -> AttackRecord:
    """
    eps is a unit-scale RMSE radius: ‖x − x_o‖₂ ≤ eps·√n on [0, 1], so the
    quantized output stays within 255·eps + 0.5 pixel levels RMSE.
    """
    if not eps > 0:
        raise AttackError(f"eps must be positive, got {eps}")
    if steps < 1:
        raise AttackError(f"steps must be at least 1, got {steps}")
    origin, y = sample.image, sample.label
    if predict(m, origin) != y:
        return AttackRecord(sample.image_id, True, 0.0, 0, adversarial=origin)

    x_o = to_unit(origin)
    oracle = GradientOracle(m, y)
    radius = eps * math.sqrt(x_o.size)
    step = 2.5 * radius / steps
    x = x_o
    for _ in range(steps):
        _, grad = oracle(x)
        direction, norm = _unit(grad)
        if norm == 0:
            break
        delta = x - step * direction - x_o
        dnorm = float(np.linalg.norm(delta))
        if dnorm > radius:
            delta *= radius / dnorm
        x = np.clip(x_o + delta, 0.0, 1.0)
        if quantize_every_step:
            x = _requantize(x)

    adversarial = from_unit(x)
    if predict(m, adversarial) == y:
        return AttackRecord(sample.image_id, False, None, oracle.calls)
    return AttackRecord(
        sample.image_id, True, distortion(adversarial, origin), oracle.calls, adversarial=adversarial
    )


@dataclass(frozen=True)
class EpsLadder:
    """Geometric radius ladder in pixel-level RMSE."""
    start: float = PGD_LADDER_DEFAULTS["start"]
    ratio: float = PGD_LADDER_DEFAULTS["ratio"]
    rungs: int = PGD_LADDER_DEFAULTS["rungs"]
    refinement: int = PGD_LADDER_DEFAULTS["refinement"]

    def __post_init__(self) -> None:
        if self.start <= 0 or self.ratio <= 1 or self.rungs < 1 or self.refinement < 0:
            raise AttackError(f"invalid eps ladder {self}")

    def values(self) -> list[float]:
        return [self.start * self.ratio ** k for k in range(self.rungs)]


def best_effort_pgd(
    m: Classifier,
    sample: LabeledImage,
    steps: int,
    grid: EpsLadder | None = None,
    quantize_every_step: bool = False,
) -> AttackRecord:
    """
    Walk the ladder up to the first radius that succeeds, bisect between the
    last failure and that success, and keep the lowest-distortion success of
    every run.  Cost is the sum over all PGD runs.
    """
    grid = grid or EpsLadder()
    origin, y = sample.image, sample.label
    if predict(m, origin) != y:
        return AttackRecord(sample.image_id, True, 0.0, 0, adversarial=origin)

    cost = 0
    best: AttackRecord | None = None

    def run(eps_pixels: float) -> bool:
        nonlocal cost, best
        record = pgd_attack(m, sample, eps_pixels / 255.0, steps, quantize_every_step)
        cost += record.cost
        if record.success and (best is None or record.distortion < best.distortion):
            best = record
        return record.success

    lo, hi = 0.0, None
    for eps in grid.values():
        if run(eps):
            hi = eps
            break
        lo = eps
    if hi is None:
        return AttackRecord(sample.image_id, False, None, cost)

    for _ in range(grid.refinement):
        mid = 0.5 * (lo + hi)
        if run(mid):
            hi = mid
        else:
            lo = mid

    return AttackRecord(sample.image_id, True, best.distortion, cost, adversarial=best.adversarial)
