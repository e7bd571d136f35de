"""
Small fully connected networks: the Zubov certificate W_theta and the policy pi_gamma.

The layer pass below is written once and runs on numpy arrays (evaluation), autodiff Tensors
(training) and Intervals (verification). Networks are immutable; training produces new ones
through with_parameters().
"""

import pathlib
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, TypedDict

import numpy as np
from scipy.optimize import nnls

import autodiff
import disk
import util
from interval import Interval
from util import UsageError


class Activation(str, Enum):
    TANH = "tanh"
    IDENTITY = "identity"
    # x -> x^2, used to hand-wire analytic certificates such as tanh(|x|^2)
    SQUARE = "square"
    ABSOLUTE = "abs"


class ActuationKind(str, Enum):
    BOX_SQUASH = "box-squash"
    VERTEX_SOFTMAX = "vertex-softmax"
    # closed-form Euclidean projection onto the box; inference only
    BOX_CLAMP = "box-clamp"


def _activate(z, activation: Activation):
    if activation == Activation.TANH:
        return util.tanh(z)
    if activation == Activation.SQUARE:
        return util.square(z)
    if activation == Activation.ABSOLUTE:
        return util.absolute(z)
    return z


def _slope(z, a, activation: Activation):
    """Derivative of the activation at z, given a = activation(z)."""
    if activation == Activation.TANH:
        return 1.0 - util.square(a)
    if activation == Activation.SQUARE:
        return 2.0 * z
    if activation == Activation.ABSOLUTE:
        return util.sign(z)
    return z * 0.0 + 1.0


def _propagate(x, weights: Sequence, biases: Sequence, hidden: Activation, output: Activation):
    """Forward pass keeping the pre-activations and activations of every layer."""
    pre, post = [], []
    a = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w.T + b
        a = _activate(z, output if i == last else hidden)
        pre.append(z)
        post.append(a)
    return pre, post


def _input_gradient(pre: list, post: list, weights: Sequence, hidden: Activation, output: Activation):
    """Reverse pass through the stored pre-activations, for a scalar-output network."""
    delta = _slope(pre[-1], post[-1], output)
    for i in reversed(range(len(weights))):
        g = delta @ weights[i]
        if i == 0:
            return g
        delta = g * _slope(pre[i - 1], post[i - 1], hidden)


def _tangent(x, v, weights: Sequence, biases: Sequence, hidden: Activation, output: Activation):
    """Forward pass carrying the directional derivative along v next to each activation."""
    a, da = x, v
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w.T + b
        dz = da @ w.T
        activation = output if i == last else hidden
        a = _activate(z, activation)
        da = _slope(z, a, activation) * dz
    return a, da


@dataclass(frozen=True)
class Mlp:
    layer_dims: Tuple[int, ...]
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    hidden_activation: Activation = Activation.TANH
    output_activation: Activation = Activation.TANH

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        weights = tuple(np.array(w, dtype=float, ndmin=2) for w in self.weights)
        biases = tuple(np.array(b, dtype=float, ndmin=1) for b in self.biases)
        if len(dims) < 2 or len(weights) != len(dims) - 1 or len(biases) != len(weights):
            raise UsageError(f"{len(weights)} weight matrices do not fit layer dims {dims}")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise UsageError(f"layer {i} has weight {w.shape} and bias {b.shape}, expected dims {dims}")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)
        object.__setattr__(self, "hidden_activation", Activation(self.hidden_activation))
        object.__setattr__(self, "output_activation", Activation(self.output_activation))

    @classmethod
    def initialize(
        cls,
        layer_dims: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: Activation = Activation.TANH,
        output_activation: Activation = Activation.TANH,
    ) -> "Mlp":
        """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases alike."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(tuple(layer_dims), tuple(weights), tuple(biases), hidden_activation, output_activation)

    @classmethod
    def zeros(cls, layer_dims: Sequence[int], output_activation: Activation = Activation.TANH) -> "Mlp":
        weights = [np.zeros((o, i)) for i, o in zip(layer_dims[:-1], layer_dims[1:])]
        biases = [np.zeros(o) for o in layer_dims[1:]]
        return cls(tuple(layer_dims), tuple(weights), tuple(biases), Activation.TANH, output_activation)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> List[np.ndarray]:
        """[W1, b1, W2, b2, ...]"""
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def with_parameters(self, params: Sequence[np.ndarray]) -> "Mlp":
        params = [np.asarray(p, dtype=float) for p in params]
        weights, biases = tuple(params[0::2]), tuple(params[1::2])
        return Mlp(self.layer_dims, weights, biases, self.hidden_activation, self.output_activation)

    def layers(self, params: Optional[Sequence] = None) -> Tuple[Sequence, Sequence]:
        if params is None:
            return self.weights, self.biases
        return params[0::2], params[1::2]


@dataclass(frozen=True)
class Actuation:
    kind: ActuationKind
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    # m x M, one vertex of the input set per column
    vertices: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ActuationKind(self.kind))
        if self.kind == ActuationKind.VERTEX_SOFTMAX:
            if self.vertices is None:
                raise UsageError("vertex-softmax actuation needs a vertex matrix")
            object.__setattr__(self, "vertices", np.array(self.vertices, dtype=float, ndmin=2))
            return
        if self.lower is None or self.upper is None:
            raise UsageError(f"{self.kind.value} actuation needs lower and upper bounds")
        lower = np.array(self.lower, dtype=float, ndmin=1)
        upper = np.array(self.upper, dtype=float, ndmin=1)
        if lower.shape != upper.shape or np.any(lower >= upper):
            raise UsageError(f"invalid actuation bounds {lower} / {upper}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def box_squash(cls, lower, upper) -> "Actuation":
        return cls(ActuationKind.BOX_SQUASH, lower=lower, upper=upper)

    @classmethod
    def box_clamp(cls, lower, upper) -> "Actuation":
        return cls(ActuationKind.BOX_CLAMP, lower=lower, upper=upper)

    @classmethod
    def vertex_softmax(cls, vertices) -> "Actuation":
        return cls(ActuationKind.VERTEX_SOFTMAX, vertices=vertices)

    @classmethod
    def box_vertices(cls, lower, upper) -> "Actuation":
        """Vertex-softmax actuation spanning the corners of a box."""
        lower, upper = np.atleast_1d(lower), np.atleast_1d(upper)
        grids = np.meshgrid(*[[a, b] for a, b in zip(lower, upper)], indexing="ij")
        return cls.vertex_softmax(np.stack([g.ravel() for g in grids]))

    @property
    def input_dim(self) -> int:
        if self.kind == ActuationKind.VERTEX_SOFTMAX:
            return self.vertices.shape[0]
        return len(self.lower)

    @property
    def core_output_dim(self) -> int:
        if self.kind == ActuationKind.VERTEX_SOFTMAX:
            return self.vertices.shape[1]
        return len(self.lower)

    def hull_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.kind == ActuationKind.VERTEX_SOFTMAX:
            return self.vertices.min(axis=1), self.vertices.max(axis=1)
        return self.lower, self.upper

    def apply(self, y):
        """Map core outputs (one row per state) into the admissible input set."""
        if self.kind == ActuationKind.BOX_SQUASH:
            return self.lower + (self.upper - self.lower) * ((util.tanh(y) + 1.0) * 0.5)
        if self.kind == ActuationKind.BOX_CLAMP:
            return util.clip(y, self.lower, self.upper)
        u = util.softmax(y) @ self.vertices.T
        if isinstance(u, Interval):
            # the image is a convex combination of the vertices, so the hull bounds are sound
            lower, upper = self.hull_bounds()
            u = u.clip(lower, upper)
        return u


def anchor_logits(actuation: Actuation, u_star) -> np.ndarray:
    """Core output that the actuation maps exactly onto u_star."""
    u_star = np.atleast_1d(np.asarray(u_star, dtype=float))
    if actuation.kind == ActuationKind.VERTEX_SOFTMAX:
        count = actuation.vertices.shape[1]
        system = np.vstack([actuation.vertices, np.ones((1, count))])
        coefficients, residual = nnls(system, np.append(u_star, 1.0))
        if residual > 1e-9:
            raise UsageError(f"u* = {u_star} lies outside the vertex hull")
        return np.log(np.maximum(coefficients, 1e-12))
    if np.any(u_star <= actuation.lower) or np.any(u_star >= actuation.upper):
        raise UsageError(f"u* = {u_star} is not strictly inside the actuation box")
    if actuation.kind == ActuationKind.BOX_CLAMP:
        return u_star
    return np.arctanh(2.0 * (u_star - actuation.lower) / (actuation.upper - actuation.lower) - 1.0)


@dataclass(frozen=True)
class PolicyNet:
    """
    u = actuation(core(x)). With anchor logits the core is shifted to core(x) - core(0) + anchor,
    which pins the policy to the equilibrium input at the origin.
    """

    core: Mlp
    actuation: Actuation
    anchor: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.core.output_dim != self.actuation.core_output_dim:
            raise UsageError(
                f"core outputs {self.core.output_dim} values, {self.actuation.kind.value} expects "
                f"{self.actuation.core_output_dim}"
            )
        if self.anchor is not None:
            object.__setattr__(self, "anchor", np.array(self.anchor, dtype=float, ndmin=1))

    @property
    def input_dim(self) -> int:
        return self.actuation.input_dim

    def with_parameters(self, params: Sequence[np.ndarray]) -> "PolicyNet":
        return PolicyNet(self.core.with_parameters(params), self.actuation, self.anchor)

    def parameters(self) -> List[np.ndarray]:
        return self.core.parameters()


def _as_points(net: Mlp, x) -> Tuple[object, bool]:
    """numpy inputs may be a single state; everything else is a batch."""
    if isinstance(x, (Interval, autodiff.Tensor)):
        if x.ndim != 2 or x.shape[1] != net.input_dim:
            raise UsageError(f"expected a batch of dimension {net.input_dim}, got shape {x.shape}")
        return x, False
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    return util.as_batch(x, net.input_dim), single


def forward(net: Mlp, x, params: Optional[Sequence] = None):
    points, single = _as_points(net, x)
    weights, biases = net.layers(params)
    _, post = _propagate(points, weights, biases, net.hidden_activation, net.output_activation)
    return post[-1][0] if single else post[-1]


def value_and_gradient(net: Mlp, x, params: Optional[Sequence] = None):
    """
    W and grad W for a batch, sharing one forward pass. With Interval inputs the reverse pass runs
    over the cached pre-activation enclosures and bounds the gradient over each box.
    """
    if net.output_dim != 1:
        raise UsageError(f"input gradient needs a scalar output, network has {net.output_dim}")
    points, _ = _as_points(net, x)
    weights, biases = net.layers(params)
    pre, post = _propagate(points, weights, biases, net.hidden_activation, net.output_activation)
    return post[-1], _input_gradient(pre, post, weights, net.hidden_activation, net.output_activation)


def input_gradient(net: Mlp, x, params: Optional[Sequence] = None):
    """Exact gradient of a scalar-output network with respect to its input."""
    _, single = _as_points(net, x)
    _, g = value_and_gradient(net, x, params)
    return g[0] if single else g


def directional_derivative(net: Mlp, x, v, params: Optional[Sequence] = None):
    """(W(x), grad W(x) . v) per row, as columns of shape (B, 1); differentiable in params and v."""
    if net.output_dim != 1:
        raise UsageError(f"directional derivative needs a scalar output, network has {net.output_dim}")
    weights, biases = net.layers(params)
    return _tangent(x, v, weights, biases, net.hidden_activation, net.output_activation)


def _zero_like_batch(x, width: int):
    if isinstance(x, Interval):
        return Interval(np.zeros((1, width)))
    return np.zeros((1, width))


def policy_eval(policy: PolicyNet, x, params: Optional[Sequence] = None):
    points, single = _as_points(policy.core, x)
    y = forward(policy.core, points, params)
    if policy.anchor is not None:
        y = y - forward(policy.core, _zero_like_batch(points, policy.core.input_dim), params) + policy.anchor
    u = policy.actuation.apply(y)
    return u[0] if single else u


def value_from_zubov(w, alpha: float) -> np.ndarray:
    """V = log((1 + W) / (1 - W)) / (2 alpha); +inf where W >= 1."""
    w = np.asarray(w, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(w >= 1.0, np.inf, np.arctanh(np.clip(w, -1.0, 1.0)) / alpha)


def zubov_from_value(v, alpha: float) -> np.ndarray:
    return np.tanh(alpha * np.asarray(v, dtype=float))


def loss_param_gradients(
    loss_fn: Callable[..., autodiff.Tensor], *param_groups: Sequence[np.ndarray]
) -> Tuple[float, Tuple[List[np.ndarray], ...]]:
    """
    Evaluate a scalar loss built from Tensor operations and return its value together with the
    exact gradient for every parameter group. loss_fn receives one list of Tensors per group.
    """
    groups = [[autodiff.parameter(p) for p in group] for group in param_groups]
    loss = loss_fn(*groups)
    if not isinstance(loss, autodiff.Tensor):
        raise UsageError(f"loss function returned {type(loss).__name__}, expected a Tensor")
    flat = [t for group in groups for t in group]
    grads = autodiff.grad(loss, flat)
    out, start = [], 0
    for group in groups:
        out.append(grads[start : start + len(group)])
        start += len(group)
    return float(loss.value.reshape(())), tuple(out)


class MlpRecord(TypedDict):
    layer_dims: List[int]
    # row-major, one matrix per layer
    weights: List[List[List[float]]]
    biases: List[List[float]]
    hidden_activation: str
    output_activation: str


def serialize_mlp(net: Mlp) -> MlpRecord:
    return {
        "layer_dims": list(net.layer_dims),
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "hidden_activation": net.hidden_activation.value,
        "output_activation": net.output_activation.value,
    }


def deserialize_mlp(record: dict) -> Mlp:
    return Mlp(
        tuple(record["layer_dims"]),
        tuple(np.array(w, dtype=float) for w in record["weights"]),
        tuple(np.array(b, dtype=float) for b in record["biases"]),
        Activation(record.get("hidden_activation", Activation.TANH.value)),
        Activation(record["output_activation"]),
    )


def serialize_actuation(actuation: Actuation) -> dict:
    if actuation.kind == ActuationKind.VERTEX_SOFTMAX:
        return {"kind": actuation.kind.value, "vertices": actuation.vertices.tolist()}
    return {"kind": actuation.kind.value, "bounds": [actuation.lower.tolist(), actuation.upper.tolist()]}


def deserialize_actuation(record: dict) -> Actuation:
    kind = ActuationKind(record["kind"])
    if kind == ActuationKind.VERTEX_SOFTMAX:
        return Actuation.vertex_softmax(record["vertices"])
    lower, upper = record["bounds"]
    return Actuation(kind, lower=lower, upper=upper)


def serialize_policy(policy: PolicyNet) -> dict:
    return {
        **serialize_mlp(policy.core),
        "actuation": serialize_actuation(policy.actuation),
        "anchor": None if policy.anchor is None else policy.anchor.tolist(),
    }


def deserialize_policy(record: dict) -> PolicyNet:
    anchor = record.get("anchor")
    return PolicyNet(deserialize_mlp(record), deserialize_actuation(record["actuation"]), anchor)


CERTIFICATE_FILENAME = "certificate.json"
POLICY_FILENAME = "policy.json"


def save_networks(directory: pathlib.Path, certificate: Mlp, policy: PolicyNet) -> None:
    directory = pathlib.Path(directory)
    disk.write_json(serialize_mlp(certificate), directory / CERTIFICATE_FILENAME)
    disk.write_json(serialize_policy(policy), directory / POLICY_FILENAME)


def load_networks(directory: pathlib.Path) -> Tuple[Mlp, PolicyNet]:
    directory = pathlib.Path(directory)
    certificate = deserialize_mlp(disk.read_json(directory / CERTIFICATE_FILENAME))
    policy = deserialize_policy(disk.read_json(directory / POLICY_FILENAME))
    return certificate, policy
