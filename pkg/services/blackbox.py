"""
blackbox.py — decision-based l2 attack with strict query accounting.

The attacker only learns whether a submitted image is classified as the
original label.  Every submission goes through QueryOracle, which charges
the QueryBudget and, under the default per-query quantization policy,
refuses anything that is not an Image.

Search
------
1. Initialisation: random images (uniform noise, alternating with noise
   blended into a random flat colour) until one is misclassified, then
   bisection along the segment back towards the original.
2. Geometric step: with v the unit vector from the original I_o to the
   current adversarial point at distance d, and u a random low-frequency
   DCT direction orthogonalised against v, candidates lie on the circle

       z(θ) = I_o + d·cos θ·(cos θ·v + sin θ·u),   |z − I_o| = d·cos θ

   θ walks the ladder ±15°, ±30°, ±45° (times an adaptive scale).  The first
   adversarial rung is refined by bisection towards 90° (the original
   itself, never adversarial) and accepted.

Points are kept on the 0–255 scale.  With per-query quantization they are
always integer valued, so the accepted point is exactly the image queried.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy import fft

from config import BLACKBOX_DEFAULTS
from services.imaging import ContinuousImage, Image, pixel_distortion, quantize
from services.metrics import AttackRecord
from services.model import Classifier, LabeledImage, predict, predict_unit

logger = logging.getLogger(__name__)

# queries held back in post-quantization mode to verify the final image
_POST_VERIFY_RESERVE = 5
_MAX_IDLE_STEPS = 100


class QueryBudgetExhausted(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Query accounting
# ---------------------------------------------------------------------------

@dataclass
class QueryBudget:
    max_queries: int
    used: int = 0

    def __post_init__(self) -> None:
        if self.max_queries < 1:
            raise ValueError(f"query budget must be positive, got {self.max_queries}")

    @property
    def remaining(self) -> int:
        return self.max_queries - self.used

    @property
    def exhausted(self) -> bool:
        return self.used >= self.max_queries

    def charge(self) -> None:
        if self.exhausted:
            raise QueryBudgetExhausted(f"all {self.max_queries} queries used")
        self.used += 1


class QueryOracle:
    """Answers "is this adversarial?" and counts every model call."""

    def __init__(self, model: Classifier, label: int, budget: QueryBudget, quantized: bool = True):
        self.model = model
        self.label = label
        self.budget = budget
        self.quantized = quantized
        self.integer_queries = 0

    @property
    def queries(self) -> int:
        return self.budget.used

    def __call__(self, query: Image | ContinuousImage) -> bool:
        if isinstance(query, Image):
            self.budget.charge()
            self.integer_queries += 1
            return predict(self.model, query) != self.label
        if self.quantized:
            raise TypeError("per-query quantization: the model only accepts Image queries")
        x = np.asarray(query, dtype=np.float64)
        self.budget.charge()
        if np.array_equal(x, np.round(x)) and x.min() >= 0 and x.max() <= 255:
            self.integer_queries += 1
        return predict_unit(self.model, x / 255.0) != self.label

    def prepare(self, x: ContinuousImage) -> tuple[Image | ContinuousImage, ContinuousImage]:
        """Turn a working point into (what is submitted, the point it stands for)."""
        if self.quantized:
            img = quantize(x)
            return img, img.pixels.astype(np.float64)
        clipped = np.clip(x, 0.0, 255.0)
        return clipped, clipped


# ---------------------------------------------------------------------------
# State and settings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlackboxSettings:
    init_draws: int = BLACKBOX_DEFAULTS["init_draws"]
    init_bisections: int = BLACKBOX_DEFAULTS["init_bisections"]
    refine_steps: int = BLACKBOX_DEFAULTS["refine_steps"]
    thetas: tuple[float, ...] = BLACKBOX_DEFAULTS["thetas"]
    dct_fraction: float = BLACKBOX_DEFAULTS["dct_fraction"]
    scale_floor: float = BLACKBOX_DEFAULTS["scale_floor"]
    quantize_queries: bool = True

    def __post_init__(self) -> None:
        if not self.thetas or any(not 0 < t < 90 for t in self.thetas):
            raise ValueError(f"thetas must lie in (0, 90) degrees, got {self.thetas}")
        if not 0 < self.dct_fraction <= 1:
            raise ValueError(f"dct_fraction must lie in (0, 1], got {self.dct_fraction}")


@dataclass(frozen=True)
class BoundaryState:
    origin: Image
    current: ContinuousImage   # 0–255 scale
    dist: float

    @property
    def direction(self) -> ContinuousImage:
        v = self.current - self.origin.pixels
        return v / np.linalg.norm(v)

    @property
    def image(self) -> Image:
        return quantize(self.current)


def _state(origin: Image, point: ContinuousImage) -> BoundaryState:
    return BoundaryState(origin, point, pixel_distortion(point, origin))


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------

@dataclass
class Bisection:
    point: ContinuousImage   # last adversarial point
    lo: float
    hi: float


def bisect_segment(
    is_adversarial: Callable[[ContinuousImage], tuple[bool, ContinuousImage]],
    origin: ContinuousImage,
    target: ContinuousImage,
    steps: int,
) -> Bisection:
    """
    Bisection on origin + t·(target − origin), t ∈ [0, 1], with t = 1 known
    adversarial and t = 0 known clean.  After k completed steps the bracket
    covers ‖target − origin‖ / 2^k.  Budget exhaustion ends it early.
    """
    result = Bisection(point=target, lo=0.0, hi=1.0)
    try:
        for _ in range(steps):
            mid = 0.5 * (result.lo + result.hi)
            adversarial, point = is_adversarial(origin + mid * (target - origin))
            if adversarial:
                result.hi, result.point = mid, point
            else:
                result.lo = mid
    except QueryBudgetExhausted:
        pass
    return result


def _submit(oracle: QueryOracle) -> Callable[[ContinuousImage], tuple[bool, ContinuousImage]]:
    def is_adversarial(x: ContinuousImage) -> tuple[bool, ContinuousImage]:
        query, point = oracle.prepare(x)
        return oracle(query), point
    return is_adversarial


def _random_start(rng: np.random.Generator, shape: tuple[int, int, int], draw: int) -> Image:
    """Even draws are uniform noise; odd draws blend it into a random flat colour."""
    noise = rng.uniform(0.0, 255.0, size=shape)
    if draw % 2 == 0:
        return quantize(noise)
    colour = rng.uniform(0.0, 255.0, size=shape[-1])
    spread = rng.uniform()
    return quantize((1.0 - spread) * colour + spread * noise)


def init_adversarial(
    oracle: QueryOracle,
    sample: LabeledImage,
    rng: np.random.Generator,
    settings: BlackboxSettings | None = None,
) -> BoundaryState | None:
    settings = settings or BlackboxSettings()
    origin = sample.image
    o = origin.pixels.astype(np.float64)
    start = None
    try:
        for draw in range(settings.init_draws):
            candidate = _random_start(rng, origin.shape, draw)
            if oracle(candidate):
                start = candidate.pixels.astype(np.float64)
                break
    except QueryBudgetExhausted:
        pass
    if start is None:
        return None
    found = bisect_segment(_submit(oracle), o, start, settings.init_bisections)
    return _state(origin, found.point)


# ---------------------------------------------------------------------------
# Geometric step
# ---------------------------------------------------------------------------

def low_frequency_direction(
    rng: np.random.Generator,
    shape: tuple[int, int, int],
    fraction: float,
) -> ContinuousImage:
    """Random direction spanned by the lowest `fraction` of DCT frequencies per axis."""
    h, w, c = shape
    kh, kw = max(1, int(h * fraction)), max(1, int(w * fraction))
    coeffs = np.zeros(shape)
    coeffs[:kh, :kw, :] = rng.standard_normal((kh, kw, c))
    return fft.idctn(coeffs, type=2, axes=(0, 1), norm="ortho")


def circle_point(o: ContinuousImage, d: float, v: ContinuousImage, u: ContinuousImage, theta: float) -> ContinuousImage:
    return o + d * math.cos(theta) * (math.cos(theta) * v + math.sin(theta) * u)


def _orthogonal_direction(
    rng: np.random.Generator,
    v: ContinuousImage,
    fraction: float,
) -> ContinuousImage | None:
    for _ in range(3):
        u = low_frequency_direction(rng, v.shape, fraction)
        u = u - np.sum(u * v) * v
        norm = np.linalg.norm(u)
        if norm > 1e-9:
            return u / norm
    return None


def geometric_step(
    oracle: QueryOracle,
    state: BoundaryState,
    rng: np.random.Generator,
    settings: BlackboxSettings | None = None,
    scale: float = 1.0,
) -> tuple[BoundaryState, bool]:
    """
    One circle search.  Returns (new state, accepted).  Candidates whose
    submitted point would not lower the distortion are never queried.
    Budget exhaustion mid-step keeps the best adversarial found so far.
    """
    settings = settings or BlackboxSettings()
    o = state.origin.pixels.astype(np.float64)
    delta = state.current - o
    d = float(np.linalg.norm(delta))
    if d == 0:
        return state, False
    v = delta / d
    u = _orthogonal_direction(rng, v, settings.dct_fraction)
    if u is None:
        return state, False

    def attempt(theta: float) -> ContinuousImage | None:
        query, point = oracle.prepare(circle_point(o, d, v, u, theta))
        if pixel_distortion(point, state.origin) >= best_dist:
            return None
        return point if oracle(query) else None

    best_dist = state.dist
    accepted: ContinuousImage | None = None
    try:
        ladder = [sign * math.radians(t * scale) for t in settings.thetas for sign in (1.0, -1.0)]
        found_theta = None
        for theta in ladder:
            point = attempt(theta)
            if point is not None:
                accepted, found_theta = point, theta
                best_dist = pixel_distortion(point, state.origin)
                break
        if found_theta is not None:
            sign = math.copysign(1.0, found_theta)
            lo, hi = abs(found_theta), math.pi / 2
            for _ in range(settings.refine_steps):
                mid = 0.5 * (lo + hi)
                point = attempt(sign * mid)
                if point is not None:
                    lo, accepted = mid, point
                    best_dist = pixel_distortion(point, state.origin)
                else:
                    hi = mid
    except QueryBudgetExhausted:
        pass
    if accepted is None:
        return state, False
    return _state(state.origin, accepted), True


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------

@dataclass
class BlackboxResult:
    record: AttackRecord
    trajectory: list[tuple[int, float]] = field(default_factory=list)
    queries: int = 0
    integer_queries: int = 0


def run_blackbox(
    m: Classifier,
    sample: LabeledImage,
    max_queries: int,
    rng: np.random.Generator,
    settings: BlackboxSettings | None = None,
) -> BlackboxResult:
    """
    Returns the record (success, final distortion, queries used) and the
    (query index → distortion) trajectory of accepted updates.
    """
    settings = settings or BlackboxSettings()
    post = not settings.quantize_queries
    search_budget = max_queries - _POST_VERIFY_RESERVE if post else max_queries
    if search_budget < 1:
        raise ValueError(f"query budget {max_queries} too small")
    budget = QueryBudget(search_budget)
    oracle = QueryOracle(m, sample.label, budget, quantized=not post)

    def result(record: AttackRecord, trajectory: list[tuple[int, float]]) -> BlackboxResult:
        return BlackboxResult(record, trajectory, oracle.queries, oracle.integer_queries)

    if oracle(sample.image):
        return result(AttackRecord(sample.image_id, True, 0.0, 1, adversarial=sample.image), [(1, 0.0)])

    state = init_adversarial(oracle, sample, rng, settings)
    if state is None:
        logger.warning("no adversarial start found for %s", sample.image_id)
        return result(AttackRecord(sample.image_id, False, None, oracle.queries), [])

    trajectory = [(oracle.queries, state.dist)]
    accepted_points = [state.current]
    scale, idle = 1.0, 0
    while not budget.exhausted and idle < _MAX_IDLE_STEPS:
        before = budget.used
        state, accepted = geometric_step(oracle, state, rng, settings, scale)
        if accepted:
            trajectory.append((oracle.queries, state.dist))
            accepted_points.append(state.current)
            scale = min(1.0, 2.0 * scale)
        else:
            scale = max(settings.scale_floor, 0.5 * scale)
        idle = idle + 1 if budget.used == before else 0

    if not post:
        return result(
            AttackRecord(sample.image_id, True, state.dist, oracle.queries, adversarial=state.image),
            trajectory,
        )

    # Continuous search: quantize the latest accepted points and keep the
    # first that still fools the model.
    budget.max_queries += _POST_VERIFY_RESERVE
    for point in reversed(accepted_points[-_POST_VERIFY_RESERVE:]):
        img = quantize(point)
        if oracle(img):
            d = pixel_distortion(img.pixels.astype(np.float64), sample.image)
            return result(AttackRecord(sample.image_id, True, d, oracle.queries, adversarial=img), trajectory)
    return result(AttackRecord(sample.image_id, False, None, oracle.queries), trajectory)
