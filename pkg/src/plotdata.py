"""
Plot-ready tables for two-dimensional systems: the certificate surface, the closed-loop vector field,
the level curve W = c, the value function and a few sample trajectories. No rendering happens here.
"""

from typing import Dict, List, Tuple

import numpy as np
import pandas as pd

import dynamics
import net
import sim
from constants import FIELD_POINTS, GRID_POINTS, SAMPLE_TRAJECTORIES
from dynamics import DynamicsModel
from interval import BoxRegion
from logger import set_up_logging
from util import UsageError

logger = set_up_logging(__name__)

LEVEL_TOLERANCE = 1e-3
BISECTION_STEPS = 60

# corner order per cell: 0 (i, j), 1 (i+1, j), 2 (i+1, j+1), 3 (i, j+1)
# case index bits are corners 0..3 above the level, corner 0 most significant
MARCHING_SQUARES_TABLE = [
    (False, []),
    (False, [((0, 3), (2, 3))]),
    (False, [((1, 2), (2, 3))]),
    (False, [((0, 3), (1, 2))]),
    (False, [((0, 1), (1, 2))]),
    (True, ([((0, 1), (1, 2)), ((0, 3), (2, 3))], [((0, 1), (0, 3)), ((1, 2), (2, 3))])),
    (False, [((0, 1), (2, 3))]),
    (False, [((0, 1), (0, 3))]),
    (False, [((0, 1), (0, 3))]),
    (False, [((0, 1), (2, 3))]),
    (True, ([((0, 1), (0, 3)), ((1, 2), (2, 3))], [((0, 1), (1, 2)), ((0, 3), (2, 3))])),
    (False, [((0, 1), (1, 2))]),
    (False, [((0, 3), (1, 2))]),
    (False, [((1, 2), (2, 3))]),
    (False, [((0, 3), (2, 3))]),
    (False, []),
]
CORNER_OFFSETS = [(0, 0), (1, 0), (1, 1), (0, 1)]


def _require_planar(region: BoxRegion):
    if region.dim != 2:
        raise UsageError(f"plot data needs a two-dimensional state, got {region.dim}")


def mesh(region: BoxRegion, points: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Axis ticks and the (points^2, 2) array of mesh nodes, x1 varying slowest."""
    _require_planar(region)
    ticks1 = np.linspace(region.lo[0], region.hi[0], points)
    ticks2 = np.linspace(region.lo[1], region.hi[1], points)
    g1, g2 = np.meshgrid(ticks1, ticks2, indexing="ij")
    return ticks1, ticks2, np.stack([g1.ravel(), g2.ravel()], axis=-1)


def certificate_grid(certificate: net.Mlp, region: BoxRegion, points: int = GRID_POINTS) -> pd.DataFrame:
    _, _, nodes = mesh(region, points)
    return pd.DataFrame({"x1": nodes[:, 0], "x2": nodes[:, 1], "W": net.forward(certificate, nodes)[:, 0]})


def value_grid(certificate: net.Mlp, region: BoxRegion, alpha: float, points: int = GRID_POINTS) -> pd.DataFrame:
    frame = certificate_grid(certificate, region, points)
    frame["V"] = net.value_from_zubov(frame["W"].to_numpy(), alpha)
    return frame.drop(columns="W")


def vector_field(
    model: DynamicsModel, policy: net.PolicyNet, region: BoxRegion, points: int = FIELD_POINTS
) -> pd.DataFrame:
    _, _, nodes = mesh(region, points)
    f = dynamics.closed_loop(model, policy, nodes)
    return pd.DataFrame({"x1": nodes[:, 0], "x2": nodes[:, 1], "f1": f[:, 0], "f2": f[:, 1]})


def _refine(certificate: net.Mlp, c: float, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Bisect every edge [a, b] (W - c changes sign along it) down to a point where |W - c| is tiny."""
    fa = net.forward(certificate, a)[:, 0] - c
    fb = net.forward(certificate, b)[:, 0] - c
    below, above = np.where(fa[:, None] < 0, a, b), np.where(fa[:, None] < 0, b, a)
    mid = 0.5 * (below + above)
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (below + above)
        fm = net.forward(certificate, mid)[:, 0] - c
        if np.all(np.abs(fm) < 0.1 * LEVEL_TOLERANCE):
            break
        low = fm < 0
        below = np.where(low[:, None], mid, below)
        above = np.where(low[:, None], above, mid)
    # an endpoint on the level set is the crossing
    mid = np.where((fb == 0)[:, None], b, mid)
    return np.where((fa == 0)[:, None], a, mid)


def level_set(certificate: net.Mlp, region: BoxRegion, c: float, points: int = GRID_POINTS) -> pd.DataFrame:
    """Marching squares on the W mesh, each crossing refined along its edge. One row per segment end."""
    ticks1, ticks2, nodes = mesh(region, points)
    values = net.forward(certificate, nodes)[:, 0].reshape(points, points) - c
    above = values > 0
    index = (
        above[:-1, :-1].astype(int) * 8 + above[1:, :-1] * 4 + above[1:, 1:] * 2 + above[:-1, 1:].astype(int)
    )

    edges: Dict[tuple, int] = {}
    segments: List[Tuple[int, int]] = []

    def corner(i, j, k):
        di, dj = CORNER_OFFSETS[k]
        return i + di, j + dj

    def edge_id(i, j, pair):
        key = tuple(sorted((corner(i, j, pair[0]), corner(i, j, pair[1]))))
        return edges.setdefault(key, len(edges))

    for i, j in zip(*np.nonzero((index > 0) & (index < 15))):
        saddle, cases = MARCHING_SQUARES_TABLE[index[i, j]]
        if saddle:
            center = np.array([[0.5 * (ticks1[i] + ticks1[i + 1]), 0.5 * (ticks2[j] + ticks2[j + 1])]])
            cases = cases[int(net.forward(certificate, center)[0, 0] > c)]
        for first, second in cases:
            segments.append((edge_id(i, j, first), edge_id(i, j, second)))

    if not segments:
        return pd.DataFrame(columns=["segment", "x1", "x2"])
    keys = sorted(edges, key=edges.get)
    a = np.array([[ticks1[p[0]], ticks2[p[1]]] for p, _ in keys])
    b = np.array([[ticks1[q[0]], ticks2[q[1]]] for _, q in keys])
    crossing = _refine(certificate, c, a, b)

    rows = []
    for number, (start, end) in enumerate(segments):
        rows.append((number, *crossing[start]))
        rows.append((number, *crossing[end]))
    logger.debug(f"level set W = {c}: {len(segments)} segments")
    return pd.DataFrame(rows, columns=["segment", "x1", "x2"])


def sample_trajectories(
    model: DynamicsModel,
    policy: net.PolicyNet,
    region: BoxRegion,
    count: int = SAMPLE_TRAJECTORIES,
    rng: np.random.Generator = None,
) -> List[sim.Trajectory]:
    rng = np.random.default_rng(0) if rng is None else rng
    starts = rng.uniform(region.lo, region.hi, size=(count, region.dim))
    field = dynamics.vector_field(model, lambda x: net.policy_eval(policy, x))
    return sim.simulate_many(field, starts)
