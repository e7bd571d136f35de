"""
Certification of a sublevel set {W < c} of the Zubov certificate as a domain of attraction.

For the closed loop x' = f(x, pi(x)) on the box R2, with W0 = W(0), the level c is certified when

    W(x) > W0 and W'(x) < 0   for every x in R2 with W(x) < c and ||x|| >= eps
    W(x) > c                  on the boundary of R2

Boxes are bounded with interval arithmetic and split until every one of them is discharged,
a sampled point violates a condition, or boxes become too small or too many.
"""

import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from functools import partial
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from ddtrace import tracer

import dynamics
import net
from config import CONFIG
from constants import AREA_SAMPLES, BOX_BUDGET, DELTA_MIN_FRACTION, EPSILON, LEVEL_TOL, VERIFY_CHUNK
from dynamics import DynamicsModel
from interval import BoxRegion, Interval
from logger import set_up_logging
from util import UsageError

logger = set_up_logging(__name__)
tracer.enabled = CONFIG["DATADOG_TRACE_ENABLED"]

# classify(lo, hi) -> mask of boxes proven free of violations
Classifier = Callable[[np.ndarray, np.ndarray], np.ndarray]
# violation(points) -> violation margin per point, > 0 only for a confirmed violation
Violation = Callable[[np.ndarray], np.ndarray]


class CertificationStatus(str, Enum):
    VERIFIED = "verified"
    FALSIFIED = "falsified"
    UNKNOWN = "unknown"


@dataclass
class SearchOutcome:
    status: CertificationStatus
    boxes_processed: int
    max_depth: int
    counterexample: Optional[np.ndarray] = None
    margin: Optional[float] = None
    # boxes left undecided at the minimum width
    unresolved: int = 0


@dataclass
class CertificationResult:
    status: CertificationStatus
    c: float
    epsilon: float
    boxes_processed: int
    max_depth: int
    wall_time: float
    counterexample: Optional[np.ndarray] = None
    # which condition the counterexample violates, or which search was left open
    condition: Optional[str] = None
    margin: Optional[float] = None
    area_estimate: Optional[float] = None
    area_stderr: Optional[float] = None

    @property
    def verified(self) -> bool:
        return self.status == CertificationStatus.VERIFIED

    def to_report(self) -> dict:
        report = {
            "status": self.status.value,
            "c": self.c,
            "epsilon": self.epsilon,
            "boxes_processed": self.boxes_processed,
            "max_depth": self.max_depth,
            "wall_time": self.wall_time,
            "area_estimate": self.area_estimate,
            "area_stderr": self.area_stderr,
        }
        if self.condition is not None:
            report["condition"] = self.condition
        if self.counterexample is not None:
            report["counterexample"] = [float(v) for v in self.counterexample]
            report["margin"] = self.margin
        return report


def _split(lo: np.ndarray, hi: np.ndarray):
    """Halve every box along its widest dimension (lowest index on ties); children stay adjacent."""
    dims = np.argmax(hi - lo, axis=1)
    rows = np.arange(len(lo))
    mid = 0.5 * (lo[rows, dims] + hi[rows, dims])
    left_hi, right_lo = hi.copy(), lo.copy()
    left_hi[rows, dims] = mid
    right_lo[rows, dims] = mid
    n = lo.shape[1]
    child_lo = np.stack([lo, right_lo], axis=1).reshape(-1, n)
    child_hi = np.stack([left_hi, hi], axis=1).reshape(-1, n)
    return child_lo, child_hi


def _classify_chunk(classify: Classifier, lo: np.ndarray, hi: np.ndarray, executor, threads: int) -> np.ndarray:
    if executor is None or len(lo) < 2 * threads:
        return classify(lo, hi)
    parts = np.array_split(np.arange(len(lo)), threads)
    # map keeps submission order, so the merged mask does not depend on scheduling
    masks = executor.map(lambda idx: classify(lo[idx], hi[idx]), parts)
    return np.concatenate(list(masks))


def branch_and_bound(
    classify: Classifier,
    violation: Violation,
    roots: Sequence[BoxRegion],
    delta_min: float,
    budget: int,
    chunk: int = VERIFY_CHUNK,
    threads: int = 1,
) -> SearchOutcome:
    """
    Breadth-first search over boxes in chunks. Boxes are visited in a fixed order, so the first
    confirmed counterexample (and every statistic) is reproducible for any thread count.
    """
    if delta_min <= 0 or budget < 1:
        raise UsageError(f"need delta_min > 0 and budget >= 1, got {delta_min} and {budget}")
    if not roots:
        return SearchOutcome(CertificationStatus.VERIFIED, 0, 0)

    lo = np.stack([r.lo for r in roots])
    hi = np.stack([r.hi for r in roots])
    queue = deque([(lo, hi, np.zeros(len(roots), dtype=int))])
    processed, max_depth, unresolved = 0, 0, 0
    exhausted = False

    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        while queue:
            lo, hi, depth = queue.popleft()
            take = min(chunk, len(lo), budget - processed)
            if take <= 0:
                exhausted = True
                break
            if take < len(lo):
                queue.appendleft((lo[take:], hi[take:], depth[take:]))
                lo, hi, depth = lo[:take], hi[:take], depth[:take]
            processed += len(lo)
            max_depth = max(max_depth, int(depth.max()))

            open_ = np.flatnonzero(~_classify_chunk(classify, lo, hi, executor, threads))
            if len(open_) == 0:
                continue
            lo, hi, depth = lo[open_], hi[open_], depth[open_]
            centers = 0.5 * (lo + hi)
            margins = violation(centers)
            violated = np.flatnonzero(margins > 0)
            if len(violated):
                first = violated[0]
                return SearchOutcome(
                    CertificationStatus.FALSIFIED, processed, max_depth, centers[first], float(margins[first])
                )
            small = (hi - lo).max(axis=1) <= delta_min
            unresolved += int(small.sum())
            if np.all(small):
                continue
            child_lo, child_hi = _split(lo[~small], hi[~small])
            queue.append((child_lo, child_hi, np.repeat(depth[~small] + 1, 2)))
    finally:
        if executor is not None:
            executor.shutdown()

    if exhausted or unresolved:
        return SearchOutcome(CertificationStatus.UNKNOWN, processed, max_depth, unresolved=unresolved)
    return SearchOutcome(CertificationStatus.VERIFIED, processed, max_depth)


def _boxes(lo: np.ndarray, hi: np.ndarray) -> Interval:
    return Interval(lo, hi)


def bound_net_output(certificate: net.Mlp, box: BoxRegion) -> Interval:
    """Enclosure of W over the box, by the natural interval extension of the layers."""
    return net.forward(certificate, Interval(box.lo[None, :], box.hi[None, :]))[0, 0]


def _lie_bounds(certificate: net.Mlp, policy: net.PolicyNet, model: DynamicsModel, boxes: Interval):
    w, gradient = net.value_and_gradient(certificate, boxes)
    f = dynamics.eval_f(model, boxes, net.policy_eval(policy, boxes))
    return w[..., 0], (gradient * f).sum(axis=-1)


def bound_lie_derivative(
    certificate: net.Mlp, policy: net.PolicyNet, model: DynamicsModel, box: BoxRegion
) -> Interval:
    """Enclosure of grad W(x) . f(x, pi(x)) over the box."""
    model.validate_region(box.lo, box.hi)
    _, w_dot = _lie_bounds(certificate, policy, model, Interval(box.lo[None, :], box.hi[None, :]))
    return w_dot[0]


def lie_derivative(certificate: net.Mlp, policy: net.PolicyNet, model: DynamicsModel, x) -> np.ndarray:
    """Point evaluation of W' for a batch of states."""
    x = np.array(x, dtype=float, ndmin=2)
    gradient = net.input_gradient(certificate, x)
    return np.sum(gradient * dynamics.closed_loop(model, policy, x), axis=-1)


def boundary_conditions(certificate: net.Mlp, c: float):
    """Classifier and violation margin for W > c on boundary faces."""

    def classify(lo, hi):
        return net.forward(certificate, _boxes(lo, hi)).lo[:, 0] > c

    def violation(points):
        return c - net.forward(certificate, points)[:, 0]

    return classify, violation


def interior_conditions(
    certificate: net.Mlp, policy: net.PolicyNet, model: DynamicsModel, c: float, epsilon: float, w0: float
):
    """Classifier and violation margin for W > W0 and W' < 0 inside the level set, outside the epsilon ball."""

    def classify(lo, hi):
        boxes = _boxes(lo, hi)
        w = net.forward(certificate, boxes)[:, 0]
        done = (w.lo >= c) | (boxes.norm().hi < epsilon)
        candidates = np.flatnonzero(~done & (w.lo > w0))
        if len(candidates):
            _, w_dot = _lie_bounds(certificate, policy, model, boxes[candidates])
            done[candidates] = w_dot.hi < 0
        return done

    def violation(points):
        w = net.forward(certificate, points)[:, 0]
        active = (w < c) & (np.linalg.norm(points, axis=1) >= epsilon)
        margin = np.maximum(w0 - w, lie_derivative(certificate, policy, model, points))
        return np.where(active, margin, -np.inf)

    return classify, violation


@tracer.wrap()
def certify_conditions(
    certificate: net.Mlp,
    policy: net.PolicyNet,
    model: DynamicsModel,
    region: BoxRegion,
    c: float,
    epsilon: float = EPSILON,
    delta_min: Optional[float] = None,
    budget: int = BOX_BUDGET,
    chunk: int = VERIFY_CHUNK,
    threads: int = 1,
) -> CertificationResult:
    if not 0 < c < 1:
        raise UsageError(f"c must lie in (0, 1), got {c}")
    if epsilon <= 0:
        raise UsageError(f"epsilon must be positive, got {epsilon}")
    if certificate.input_dim != region.dim:
        raise UsageError(f"certificate takes {certificate.input_dim} inputs, region is {region.dim}-dimensional")
    model.validate_region(region.lo, region.hi)
    delta_min = DELTA_MIN_FRACTION * region.diameter() if delta_min is None else delta_min

    started = time.perf_counter()
    w0 = float(net.forward(certificate, np.zeros(region.dim))[0])
    logger.info(f"Certifying level c={c} on {region.to_bounds()} (eps={epsilon}, W(0)={w0:.6g})")

    boundary = branch_and_bound(
        *boundary_conditions(certificate, c),
        [face for _, _, face in region.faces()],
        delta_min,
        budget,
        chunk,
        threads,
    )
    searches = [("boundary", boundary)]
    if boundary.status != CertificationStatus.FALSIFIED:
        remaining = budget - boundary.boxes_processed
        if remaining >= 1:
            interior = branch_and_bound(
                *interior_conditions(certificate, policy, model, c, epsilon, w0),
                [region],
                delta_min,
                remaining,
                chunk,
                threads,
            )
        else:
            interior = SearchOutcome(CertificationStatus.UNKNOWN, 0, 0)
        searches.append(("interior", interior))

    processed = sum(s.boxes_processed for _, s in searches)
    depth = max(s.max_depth for _, s in searches)
    result = CertificationResult(CertificationStatus.VERIFIED, c, epsilon, processed, depth, 0.0)
    for name, search in searches:
        if search.status == CertificationStatus.FALSIFIED:
            result.status, result.condition = CertificationStatus.FALSIFIED, name
            result.counterexample, result.margin = search.counterexample, search.margin
            break
        if search.status == CertificationStatus.UNKNOWN and result.status == CertificationStatus.VERIFIED:
            result.status, result.condition = CertificationStatus.UNKNOWN, name
    result.wall_time = time.perf_counter() - started

    logger.info(f"Level c={c}: {result.status.value} after {processed} boxes (depth {depth}, {result.wall_time:.2f}s)")
    if result.counterexample is not None:
        logger.info(f"Counterexample {result.counterexample.tolist()} violates the {result.condition} condition")
    return result


def bisect_level(
    certify: Callable[[float], CertificationResult], tol: float = LEVEL_TOL, lower: float = 0.0, upper: float = 1.0
):
    """Largest level in (lower, upper) that certifies, to within tol. Anything but Verified counts as failure."""
    if tol <= 0:
        raise UsageError(f"tol must be positive, got {tol}")
    best: Optional[CertificationResult] = None
    last: Optional[CertificationResult] = None
    while upper - lower > tol:
        mid = 0.5 * (lower + upper)
        last = certify(mid)
        logger.debug(f"level {mid:.6f}: {last.status.value}")
        if last.status == CertificationStatus.VERIFIED:
            lower, best = mid, last
        else:
            upper = mid
    if best is None:
        return 0.0, last
    return lower, best


@tracer.wrap()
def find_max_level(
    certificate: net.Mlp,
    policy: net.PolicyNet,
    model: DynamicsModel,
    region: BoxRegion,
    epsilon: float = EPSILON,
    tol: float = LEVEL_TOL,
    budget: int = BOX_BUDGET,
    delta_min: Optional[float] = None,
    chunk: int = VERIFY_CHUNK,
    threads: int = 1,
):
    """(c*, result) for the largest certified level; (0, result at the smallest level tried) if none certifies."""
    certify = partial(
        certify_conditions,
        certificate,
        policy,
        model,
        region,
        epsilon=epsilon,
        delta_min=delta_min,
        budget=budget,
        chunk=chunk,
        threads=threads,
    )
    level, result = bisect_level(certify, tol)
    logger.info(f"Largest certified level: {level:.6f}")
    return level, result


class AreaEstimate(NamedTuple):
    area: float
    stderr: float


def doa_area(
    certificate: net.Mlp, c: float, region: BoxRegion, samples: int = AREA_SAMPLES, rng=None
) -> AreaEstimate:
    """Monte Carlo area of {x in R2 : W(x) < c}, with its standard error."""
    if samples <= 0:
        raise UsageError(f"samples must be positive, got {samples}")
    rng = np.random.default_rng(0) if rng is None else rng
    points = rng.uniform(region.lo, region.hi, size=(samples, region.dim))
    fraction = float(np.mean(net.forward(certificate, points)[:, 0] < c))
    volume = region.volume()
    return AreaEstimate(volume * fraction, volume * np.sqrt(fraction * (1.0 - fraction) / samples))


@dataclass
class GridVerdict:
    interior_violations: np.ndarray
    boundary_violations: np.ndarray
    # smallest W found on the boundary grid: levels below it keep the set inside R2
    boundary_min: float

    @property
    def holds(self) -> bool:
        return len(self.interior_violations) == 0 and len(self.boundary_violations) == 0


def grid_oracle(
    certificate: net.Mlp,
    policy: net.PolicyNet,
    model: DynamicsModel,
    region: BoxRegion,
    c: float,
    epsilon: float,
    points_per_dim: int = 100,
) -> GridVerdict:
    """Check the certified conditions pointwise on a dense grid (and on the boundary faces)."""
    axes = [np.linspace(a, b, points_per_dim) for a, b in zip(region.lo, region.hi)]
    grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)
    w0 = float(net.forward(certificate, np.zeros(region.dim))[0])
    _, violation = interior_conditions(certificate, policy, model, c, epsilon, w0)
    interior = grid[violation(grid) > 0]

    on_boundary = np.any((grid == region.lo) | (grid == region.hi), axis=1)
    boundary_points = grid[on_boundary]
    w_boundary = net.forward(certificate, boundary_points)[:, 0]
    return GridVerdict(interior, boundary_points[w_boundary <= c], float(w_boundary.min()))


def report_with_area(
    result: CertificationResult, certificate: net.Mlp, region: BoxRegion, samples: int = AREA_SAMPLES, rng=None
) -> CertificationResult:
    if result.verified:
        estimate = doa_area(certificate, result.c, region, samples, rng)
        result.area_estimate, result.area_stderr = estimate.area, estimate.stderr
    return result
