"""
The benchmark control systems.

Each right-hand side is written once in terms of the elementary functions in util, so the same
expression is evaluated on floats and numpy batches, differentiated through autodiff Tensors,
bounded over Interval boxes, and exported as SMT-LIB terms.
"""

from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Callable, Dict, List, Mapping, Tuple

import numpy as np

import net
import util
from autodiff import Tensor
from constants import JACOBIAN_STEP, SYSTEM_DEFAULTS
from logger import set_up_logging
from util import UsageError

logger = set_up_logging(__name__)


class SingularityError(ArithmeticError):
    """The bicycle model was evaluated on its singular line d_e = 1."""


class PreconditionError(ValueError):
    """An operation was called at a point that does not satisfy its precondition."""


class SystemKind(str, Enum):
    DOUBLE_INTEGRATOR = "double-integrator"
    VAN_DER_POL = "van-der-pol"
    INVERTED_PENDULUM = "inverted-pendulum"
    BICYCLE_TRACKING = "bicycle-tracking"
    # x' = A x + B u, for sanity systems such as x' = -x
    LINEAR = "linear"


def _double_integrator(p, x, u):
    return [x[1], u[0]]


def _van_der_pol(p, x, u):
    return [x[1], x[0] - p["mu"] * (1.0 - util.square(x[0])) * x[1] + u[0]]


def _inverted_pendulum(p, x, u):
    inertia = p["m"] * p["l_p"] ** 2
    return [x[1], p["g"] / p["l_p"] * util.sin(x[0]) - p["b"] * x[1] / inertia + u[0] / inertia]


def _ensure_nonsingular(denominator):
    value = denominator.value if isinstance(denominator, Tensor) else denominator
    if isinstance(value, (float, np.ndarray, np.floating)) and np.any(np.asarray(value) == 0):
        raise SingularityError("bicycle dynamics are singular at d_e = 1")


def _bicycle_tracking(p, x, u):
    distance, heading = x
    denominator = 1.0 - distance
    _ensure_nonsingular(denominator)
    return [p["v"] * util.sin(heading), p["v"] * util.tan(u[0]) / p["l_b"] - util.cos(heading) / denominator]


def _linear(p, x, u):
    out = []
    for row_a, row_b in zip(p["A"], p["B"]):
        terms = [x[j] * a for j, a in enumerate(row_a) if a != 0]
        terms += [u[k] * b for k, b in enumerate(row_b) if b != 0]
        total = x[0] * 0.0
        for term in terms:
            total = total + term
        out.append(total)
    return out


RIGHT_HAND_SIDES: Dict[SystemKind, Callable] = {
    SystemKind.DOUBLE_INTEGRATOR: _double_integrator,
    SystemKind.VAN_DER_POL: _van_der_pol,
    SystemKind.INVERTED_PENDULUM: _inverted_pendulum,
    SystemKind.BICYCLE_TRACKING: _bicycle_tracking,
    SystemKind.LINEAR: _linear,
}


@dataclass(frozen=True)
class DynamicsModel:
    kind: SystemKind
    params: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        kind = SystemKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind == SystemKind.LINEAR:
            unknown = set(self.params) - {"A", "B"}
            if unknown:
                raise UsageError(f"unknown parameters for {kind.value}: {sorted(unknown)}")
            params = {**SYSTEM_DEFAULTS[kind.value]["params"], **self.params}
            a = np.atleast_2d(np.asarray(params["A"], dtype=float))
            b = np.asarray(params["B"], dtype=float).reshape(a.shape[0], -1)
            if a.shape[0] != a.shape[1]:
                raise UsageError(f"A must be square, got {a.shape}")
            object.__setattr__(self, "params", MappingProxyType({"A": a.tolist(), "B": b.tolist()}))
            return
        defaults = SYSTEM_DEFAULTS[kind.value]["params"]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise UsageError(f"unknown parameters for {kind.value}: {sorted(unknown)}")
        merged = {**defaults, **{k: float(v) for k, v in self.params.items()}}
        if any(value <= 0 for value in merged.values()):
            raise UsageError(f"all parameters of {kind.value} must be strictly positive, got {merged}")
        object.__setattr__(self, "params", MappingProxyType(merged))

    @classmethod
    def linear(cls, a, b) -> "DynamicsModel":
        return cls(SystemKind.LINEAR, {"A": a, "B": b})

    @property
    def state_dim(self) -> int:
        if self.kind == SystemKind.LINEAR:
            return len(self.params["A"])
        return 2

    @property
    def input_dim(self) -> int:
        if self.kind == SystemKind.LINEAR:
            return len(self.params["B"][0])
        return 1

    @property
    def u_star(self) -> np.ndarray:
        """The input that makes the origin an equilibrium."""
        if self.kind == SystemKind.BICYCLE_TRACKING:
            return np.array([np.arctan(self.params["l_b"] / self.params["v"])])
        return np.zeros(self.input_dim)

    def validate_region(self, lo, hi) -> None:
        """Reject state boxes that touch the bicycle's singular line."""
        if self.kind != SystemKind.BICYCLE_TRACKING:
            return
        touches = (np.asarray(lo)[..., 0] <= 1) & (np.asarray(hi)[..., 0] >= 1)
        if np.any(touches):
            raise SingularityError("region contains d_e = 1 where the bicycle dynamics are singular")


def eval_f(model: DynamicsModel, x, u):
    """x' = f(x, u) for a single state or a batch of states (one per row)."""
    rhs = RIGHT_HAND_SIDES[model.kind]
    components = rhs(model.params, util.columns(x, model.state_dim), util.columns(u, model.input_dim))
    return util.stack_columns(components)


def closed_loop(model: DynamicsModel, policy: "net.PolicyNet", x):
    return eval_f(model, x, net.policy_eval(policy, x))


def vector_field(model: DynamicsModel, controller: Callable) -> Callable[[np.ndarray], np.ndarray]:
    """The closed-loop field x -> f(x, controller(x)) for the simulator."""

    def field(x):
        return eval_f(model, x, controller(x))

    return field


def linearize(model: DynamicsModel, x_star, u_star) -> Tuple[np.ndarray, np.ndarray]:
    """A = df/dx and B = df/du at an equilibrium, by central differences."""
    x_star = np.asarray(x_star, dtype=float)
    u_star = np.asarray(u_star, dtype=float)
    residual = np.linalg.norm(eval_f(model, x_star, u_star))
    if residual >= 1e-9:
        raise PreconditionError(f"({x_star}, {u_star}) is not an equilibrium: |f| = {residual:.3e}")

    def jacobian(fn, at: np.ndarray) -> np.ndarray:
        columns: List[np.ndarray] = []
        for i in range(len(at)):
            step = np.zeros_like(at)
            step[i] = JACOBIAN_STEP
            columns.append((fn(at + step) - fn(at - step)) / (2 * JACOBIAN_STEP))
        return np.stack(columns, axis=-1)

    a = jacobian(lambda x: eval_f(model, x, u_star), x_star)
    b = jacobian(lambda u: eval_f(model, x_star, u), u_star)
    logger.debug(f"linearized {model.kind.value}: A={a.tolist()} B={b.tolist()}")
    return a, b
