"""
LQR baseline: Riccati solution of the linearization, the saturated law u = sat(u* - K x), and the
largest ellipse {x^T P x < c} on which x^T P x decreases along the nonlinear closed loop.
"""

from dataclasses import dataclass
from functools import partial
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from ddtrace import tracer

import dynamics
import util
import verify
from config import CONFIG
from constants import ACTUATION_BOUND, BOX_BUDGET, DELTA_MIN_FRACTION, EPSILON, LEVEL_TOL, VERIFY_CHUNK
from dynamics import DynamicsModel
from interval import BoxRegion, Interval
from logger import set_up_logging
from util import UsageError

logger = set_up_logging(__name__)
tracer.enabled = CONFIG["DATADOG_TRACE_ENABLED"]

CARE_TOLERANCE = 1e-9
NEWTON_STEPS = 10


class RiccatiError(ArithmeticError):
    """The Riccati equation has no stabilizing solution, or the solver failed to reach it."""


def care_residual(a, b, q, r, p) -> float:
    return float(np.linalg.norm(a.T @ p + p @ a - p @ b @ np.linalg.solve(r, b.T @ p) + q, ord="fro"))


def _is_hurwitz(matrix: np.ndarray) -> bool:
    return bool(np.all(np.linalg.eigvals(matrix).real < 0))


def solve_care(a, b, q, r) -> np.ndarray:
    """Stabilizing solution of A^T P + P A - P B R^-1 B^T P + Q = 0, polished by Newton-Kleinman steps."""
    a, b, q, r = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (a, b, q, r))
    try:
        p = scipy.linalg.solve_continuous_are(a, b, q, r)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise RiccatiError(f"no stabilizing Riccati solution: {e}") from e
    p = 0.5 * (p + p.T)
    residual = care_residual(a, b, q, r, p)

    for _ in range(NEWTON_STEPS):
        if residual < CARE_TOLERANCE:
            break
        k = np.linalg.solve(r, b.T @ p)
        closed = a - b @ k
        if not _is_hurwitz(closed):
            break
        candidate = scipy.linalg.solve_continuous_lyapunov(closed.T, -(q + k.T @ r @ k))
        candidate = 0.5 * (candidate + candidate.T)
        candidate_residual = care_residual(a, b, q, r, candidate)
        if not candidate_residual < residual:
            break
        p, residual = candidate, candidate_residual

    logger.debug(f"CARE residual {residual:.3e}")
    if not np.isfinite(residual) or residual > 1e-6 * max(1.0, np.linalg.norm(p)):
        raise RiccatiError(f"Riccati solver did not converge, residual {residual:.3e}")
    if residual >= CARE_TOLERANCE:
        logger.warning(f"CARE residual {residual:.3e} above {CARE_TOLERANCE}")
    if not _is_hurwitz(a - b @ np.linalg.solve(r, b.T @ p)):
        raise RiccatiError("Riccati solution does not stabilize the pair (A, B)")
    return p


def lqr_gain(p, b, r) -> np.ndarray:
    """K = R^-1 B^T P"""
    p, b, r = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (p, b, r))
    try:
        return np.linalg.solve(r, b.T @ p)
    except np.linalg.LinAlgError as e:
        raise RiccatiError(f"R is singular: {e}") from e


def lqr_controller(k: np.ndarray, u_star) -> Callable:
    """u = sat(u* - K x), saturated componentwise to the actuation box."""
    k = np.atleast_2d(k)
    u_star = np.atleast_1d(np.asarray(u_star, dtype=float))

    def control(x):
        return util.clip(u_star - x @ k.T, -ACTUATION_BOUND, ACTUATION_BOUND)

    return control


def lqr_closed_loop(model: DynamicsModel, k: np.ndarray) -> Callable:
    return dynamics.vector_field(model, lqr_controller(k, model.u_star))


def ellipse_bounding_box(p: np.ndarray, c: float) -> BoxRegion:
    half = np.sqrt(c * np.diag(np.linalg.inv(p)))
    return BoxRegion(-half, half)


def input_margin(p: np.ndarray, k: np.ndarray, u_star, c: float) -> np.ndarray:
    """Largest |u_i| over the ellipse: |u*_i| + sqrt(c k_i^T P^-1 k_i)."""
    k = np.atleast_2d(k)
    support = np.sqrt(c * np.einsum("ij,jk,ik->i", k, np.linalg.inv(p), k))
    return np.abs(np.atleast_1d(u_star)) + support


def _quadratic(p: np.ndarray, x, y):
    return ((x @ p) * y).sum(axis=-1)


def lqr_conditions(model: DynamicsModel, p: np.ndarray, k: np.ndarray, c: float, epsilon: float):
    """Classifier and violation margin for x^T P x' < 0 on {x^T P x < c, ||x|| >= eps}."""
    control = lqr_controller(k, model.u_star)

    def classify(lo, hi):
        boxes = Interval(lo, hi)
        done = (_quadratic(p, boxes, boxes).lo >= c) | (boxes.norm().hi < epsilon)
        candidates = np.flatnonzero(~done)
        if len(candidates):
            inside = boxes[candidates]
            f = dynamics.eval_f(model, inside, control(inside))
            done[candidates] = _quadratic(p, inside, f).hi < 0
        return done

    def violation(points):
        active = (_quadratic(p, points, points) < c) & (np.linalg.norm(points, axis=1) >= epsilon)
        decrease = _quadratic(p, points, dynamics.eval_f(model, points, control(points)))
        return np.where(active, decrease, -np.inf)

    return classify, violation


def certify_lqr(
    model: DynamicsModel,
    p: np.ndarray,
    k: np.ndarray,
    c: float,
    epsilon: float = EPSILON,
    delta_min: Optional[float] = None,
    budget: int = BOX_BUDGET,
    chunk: int = VERIFY_CHUNK,
    threads: int = 1,
) -> bool:
    if c < 0:
        raise UsageError(f"c must be non-negative, got {c}")
    if c == 0:
        return True
    margin = input_margin(p, k, model.u_star, c)
    if np.any(margin > ACTUATION_BOUND):
        logger.debug(f"c={c}: input bound fails analytically, max |u| = {margin.max():.4f}")
        return False
    box = ellipse_bounding_box(p, c)
    try:
        model.validate_region(box.lo, box.hi)
    except dynamics.SingularityError:
        logger.debug(f"c={c}: ellipse reaches the singular set of the dynamics")
        return False
    delta_min = DELTA_MIN_FRACTION * box.diameter() if delta_min is None else delta_min
    classify, violation = lqr_conditions(model, p, k, c, epsilon)
    outcome = verify.branch_and_bound(classify, violation, [box], delta_min, budget, chunk, threads)
    logger.debug(f"c={c}: {outcome.status.value} after {outcome.boxes_processed} boxes")
    return outcome.status == verify.CertificationStatus.VERIFIED


@tracer.wrap()
def bisect_c_lqr(
    model: DynamicsModel,
    p: np.ndarray,
    k: np.ndarray,
    epsilon: float = EPSILON,
    tol: float = LEVEL_TOL,
    cap: float = 1.0,
    certify: Optional[Callable[[float], bool]] = None,
) -> float:
    """Largest certified level in (0, cap] to within tol; 0 when nothing certifies."""
    if tol <= 0 or cap <= 0:
        raise UsageError(f"tol and cap must be positive, got {tol} and {cap}")
    certify = certify or partial(certify_lqr, model, p, k, epsilon=epsilon)
    if certify(cap):
        return cap
    lower, upper = 0.0, cap
    while upper - lower > tol:
        mid = 0.5 * (lower + upper)
        if certify(mid):
            lower = mid
        else:
            upper = mid
        logger.debug(f"LQR bisection bracket [{lower:.6g}, {upper:.6g}]")
    if lower == 0:
        logger.warning(f"no LQR level certified down to {upper:.3g}; reporting c_lqr = 0")
    return lower


def ellipse_area(p: np.ndarray, c: float) -> float:
    """Area of {x^T P x < c} in two dimensions."""
    return float(np.pi * c / np.sqrt(np.linalg.det(p)))


@dataclass
class LqrSolution:
    p: np.ndarray
    k: np.ndarray
    residual: float
    c_lqr: float

    @property
    def ellipse_area(self) -> float:
        return ellipse_area(self.p, self.c_lqr)

    def to_report(self) -> dict:
        return {
            "P": self.p.tolist(),
            "K": self.k.tolist(),
            "residual": self.residual,
            "c_lqr": self.c_lqr,
            "ellipse_area": self.ellipse_area,
        }


def lqr_baseline(
    model: DynamicsModel,
    region: BoxRegion,
    epsilon: float = EPSILON,
    tol: float = LEVEL_TOL,
    budget: int = BOX_BUDGET,
    threads: int = 1,
) -> LqrSolution:
    """Linearize about (0, u*), solve the CARE with Q = I and R = I, and bisect for c_lqr."""
    a, b = dynamics.linearize(model, np.zeros(model.state_dim), model.u_star)
    q, r = np.eye(model.state_dim), np.eye(model.input_dim)
    p = solve_care(a, b, q, r)
    k = lqr_gain(p, b, r)
    cap = float(max(corner @ p @ corner for corner in region.corners()))
    certify = partial(certify_lqr, model, p, k, epsilon=epsilon, budget=budget, threads=threads)
    c_lqr = bisect_c_lqr(model, p, k, epsilon, tol, cap, certify)
    solution = LqrSolution(p, k, care_residual(a, b, q, r, p), c_lqr)
    logger.info(f"LQR baseline for {model.kind.value}: c_lqr={c_lqr:.6g}, ellipse area={solution.ellipse_area:.6g}")
    return solution
