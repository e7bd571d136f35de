"""
Fixed-step RK4 simulation of closed-loop trajectories and the value integral
V(x0) = integral of ||x(t)|| dt that the certificate is regressed onto.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd
from ddtrace import tracer

import net
import util
from config import CONFIG
from constants import DT, R_CONV, R_DIV, T_MAX
from dynamics import SingularityError
from logger import set_up_logging
from util import UsageError

logger = set_up_logging(__name__)
tracer.enabled = CONFIG["DATADOG_TRACE_ENABLED"]

Field = Callable[[np.ndarray], np.ndarray]


class TrajectoryStatus(str, Enum):
    CONVERGED = "converged"
    DIVERGED = "diverged"
    HORIZON_EXHAUSTED = "horizon-exhausted"


@dataclass
class Trajectory:
    # one row per recorded state, the initial state included
    states: np.ndarray
    dt: float
    status: TrajectoryStatus

    @property
    def steps(self) -> int:
        return len(self.states) - 1

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.states))

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def rk4_step(field: Field, x, h: float):
    """Classical four-stage Runge-Kutta step. Works on a single state or a batch of rows."""
    if h <= 0:
        raise UsageError(f"step size must be positive, got {h}")
    k1 = field(x)
    k2 = field(x + 0.5 * h * k1)
    k3 = field(x + 0.5 * h * k2)
    k4 = field(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_settings(dt: float, t_max: float, r_conv: float, r_div: float) -> int:
    if dt <= 0 or t_max <= 0:
        raise UsageError(f"dt and t_max must be positive, got dt={dt} t_max={t_max}")
    if not 0 < r_conv < r_div:
        raise UsageError(f"need 0 < r_conv < r_div, got r_conv={r_conv} r_div={r_div}")
    return int(round(t_max / dt))


def _step_rows(field: Field, x: np.ndarray, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """One RK4 step for every row; rows that hit a singularity come back flagged instead of raising."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        try:
            return rk4_step(field, x, dt), np.ones(len(x), dtype=bool)
        except SingularityError:
            pass
        out = np.full_like(x, np.nan)
        ok = np.ones(len(x), dtype=bool)
        for i, row in enumerate(x):
            try:
                out[i] = rk4_step(field, row[None, :], dt)[0]
            except SingularityError:
                ok[i] = False
        return out, ok


def _classify(norms: np.ndarray, ok: np.ndarray, r_conv: float, r_div: float) -> Tuple[np.ndarray, np.ndarray]:
    finite = np.isfinite(norms)
    diverged = ~ok | ~finite | (np.where(finite, norms, 0.0) >= r_div)
    converged = ~diverged & (norms <= r_conv)
    return converged, diverged


@tracer.wrap()
def simulate_many(
    field: Field,
    x0s,
    dt: float = DT,
    t_max: float = T_MAX,
    r_conv: float = R_CONV,
    r_div: float = R_DIV,
) -> List[Trajectory]:
    """
    Integrate every initial state (one per row) with a vectorized field. Each row stops on its own
    when it converges, diverges or runs out of horizon; results do not depend on batch composition.
    """
    max_steps = _check_settings(dt, t_max, r_conv, r_div)
    x = np.array(x0s, dtype=float, ndmin=2)
    count = len(x)

    path = [x.copy()]
    # index of the last recorded state of each row, -1 while still running
    stop = np.full(count, -1)
    status: List[Optional[TrajectoryStatus]] = [None] * count

    converged, diverged = _classify(util.row_norms(x), np.ones(count, dtype=bool), r_conv, r_div)
    for i in np.flatnonzero(diverged):
        stop[i], status[i] = 0, TrajectoryStatus.DIVERGED
    for i in np.flatnonzero(converged):
        stop[i], status[i] = 0, TrajectoryStatus.CONVERGED

    for step in range(1, max_steps + 1):
        active = np.flatnonzero(stop < 0)
        if len(active) == 0:
            break
        nxt, ok = _step_rows(field, x[active], dt)
        with np.errstate(over="ignore", invalid="ignore"):
            norms = util.row_norms(nxt)
        converged, diverged = _classify(norms, ok, r_conv, r_div)
        x[active] = nxt
        path.append(x.copy())
        for j in np.flatnonzero(diverged):
            # a failed or non-finite step is not recorded
            recorded = step if (ok[j] and np.isfinite(norms[j])) else step - 1
            stop[active[j]], status[active[j]] = recorded, TrajectoryStatus.DIVERGED
        for j in np.flatnonzero(converged):
            stop[active[j]], status[active[j]] = step, TrajectoryStatus.CONVERGED

    states = np.stack(path)
    trajectories = []
    for i in range(count):
        if status[i] is None:
            stop[i], status[i] = len(path) - 1, TrajectoryStatus.HORIZON_EXHAUSTED
        trajectories.append(Trajectory(states[: stop[i] + 1, i].copy(), dt, status[i]))
    return trajectories


def simulate(
    field: Field,
    x0,
    dt: float = DT,
    t_max: float = T_MAX,
    r_conv: float = R_CONV,
    r_div: float = R_DIV,
) -> Trajectory:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))

    def row_field(x):
        return np.reshape(field(x[0]), (1, -1))

    return simulate_many(row_field, x0[None, :], dt, t_max, r_conv, r_div)[0]


def estimate_value(trajectory: Trajectory) -> float:
    """Trapezoidal integral of ||x(t)||; +inf unless the trajectory converged."""
    if trajectory.status != TrajectoryStatus.CONVERGED:
        return np.inf
    norms = util.row_norms(trajectory.states)
    if len(norms) == 1:
        return 0.0
    return float(trajectory.dt * (norms.sum() - 0.5 * (norms[0] + norms[-1])))


def value_targets(trajectories: List[Trajectory], alpha: float) -> np.ndarray:
    """tanh(alpha * V) per trajectory, with tanh(inf) = 1."""
    return np.tanh(alpha * np.array([estimate_value(t) for t in trajectories]))


def trajectory_frame(trajectory: Trajectory) -> pd.DataFrame:
    frame = pd.DataFrame(trajectory.states, columns=[f"x{i + 1}" for i in range(trajectory.states.shape[1])])
    frame.insert(0, "t", trajectory.times)
    return frame


@dataclass
class SoundnessReport:
    samples: int
    escapes: np.ndarray

    @property
    def escape_count(self) -> int:
        return len(self.escapes)

    @property
    def passed(self) -> bool:
        return self.escape_count == 0


def sample_sublevel_set(
    certificate: "net.Mlp", c: float, lo, hi, samples: int, rng: np.random.Generator, max_rounds: int = 1000
) -> np.ndarray:
    """Uniform points of {x in box : W(x) < c} by rejection; may return fewer if the set is tiny."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    found = []
    total = 0
    for _ in range(max_rounds):
        if total >= samples:
            break
        draw = rng.uniform(lo, hi, size=(max(samples, 64), len(lo)))
        inside = draw[net.forward(certificate, draw)[:, 0] < c]
        found.append(inside)
        total += len(inside)
    points = np.concatenate(found) if found else np.empty((0, len(lo)))
    return points[:samples]


def check_empirical_soundness(
    field: Field,
    certificate: "net.Mlp",
    c: float,
    lo,
    hi,
    epsilon: float,
    samples: int,
    rng: np.random.Generator,
    dt: float = DT,
    t_max: float = T_MAX,
) -> SoundnessReport:
    """Simulate from points of the certified set; every one of them should reach the epsilon ball."""
    points = sample_sublevel_set(certificate, c, lo, hi, samples, rng)
    if len(points) == 0:
        logger.warning(f"no points with W < {c} found in the region, nothing to check")
        return SoundnessReport(0, np.empty((0, len(np.atleast_1d(lo)))))
    trajectories = simulate_many(field, points, dt=dt, t_max=t_max, r_conv=epsilon, r_div=max(R_DIV, 10 * epsilon))
    escaped = [t.states[0] for t in trajectories if t.status != TrajectoryStatus.CONVERGED]
    report = SoundnessReport(len(points), np.array(escaped).reshape(-1, points.shape[1]))
    logger.info(f"empirical soundness: {report.escape_count} of {report.samples} sampled states escaped")
    return report
