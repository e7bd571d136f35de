"""
SMT-LIB 2 export of the certification conditions, for cross-checking with a delta-complete solver
such as dReal. Each query asserts the negation of one condition; unsat means the condition holds.

Networks are emitted neuron by neuron as define-fun terms. The dynamics are not re-implemented:
they are evaluated on SmtTerm objects through the same elementary functions as everywhere else.
"""

from typing import Dict, List, Sequence

import numpy as np

import dynamics
import net
import util
from constants import ACTUATION_BOUND, EPSILON
from dynamics import DynamicsModel
from interval import BoxRegion
from logger import set_up_logging

logger = set_up_logging(__name__)

LOGIC = "QF_NRA"


def format_real(value: float) -> str:
    """SMT-LIB has no negative literals and no exponent notation."""
    value = float(value)
    if not np.isfinite(value):
        raise util.UsageError(f"cannot export non-finite constant {value}")
    text = np.format_float_positional(abs(value), unique=True, trim="0")
    return f"(- {text})" if value < 0 else text


class SmtTerm:
    __slots__ = ("text",)
    # keep numpy from broadcasting over terms
    __array_ufunc__ = None

    def __init__(self, text: str):
        self.text = text

    def __str__(self):
        return self.text

    def __repr__(self):
        return f"SmtTerm({self.text!r})"

    def __add__(self, other):
        return apply("+", self, other)

    def __radd__(self, other):
        return apply("+", other, self)

    def __sub__(self, other):
        return apply("-", self, other)

    def __rsub__(self, other):
        return apply("-", other, self)

    def __mul__(self, other):
        return apply("*", self, other)

    def __rmul__(self, other):
        return apply("*", other, self)

    def __truediv__(self, other):
        return apply("/", self, other)

    def __rtruediv__(self, other):
        return apply("/", other, self)

    def __neg__(self):
        return apply("-", self)

    def __pow__(self, exponent):
        if exponent != 2:
            raise util.UsageError("only squaring is exported")
        return apply("*", self, self)


def as_term(value) -> SmtTerm:
    if isinstance(value, SmtTerm):
        return value
    return SmtTerm(format_real(value))


def apply(op: str, *args) -> SmtTerm:
    return SmtTerm(f"({op} {' '.join(as_term(a).text for a in args)})")


def total(terms: Sequence) -> SmtTerm:
    terms = list(terms)
    if not terms:
        return as_term(0.0)
    if len(terms) == 1:
        return as_term(terms[0])
    return apply("+", *terms)


for _generic, _op in [
    (util.tanh, "tanh"),
    (util.sin, "sin"),
    (util.cos, "cos"),
    (util.tan, "tan"),
    (util.exp, "exp"),
    (util.sqrt, "sqrt"),
    (util.absolute, "abs"),
]:
    _generic.register(SmtTerm)(lambda a, op=_op: apply(op, a))


@util.square.register(SmtTerm)
def _square(a: SmtTerm) -> SmtTerm:
    return apply("*", a, a)


@util.sign.register(SmtTerm)
def _sign(a: SmtTerm) -> SmtTerm:
    return apply("ite", apply(">", a, 0.0), 1.0, apply("ite", apply("<", a, 0.0), -1.0, 0.0))


@util.clip.register(SmtTerm)
def _clip(a: SmtTerm, lower, upper) -> SmtTerm:
    lower, upper = float(np.squeeze(lower)), float(np.squeeze(upper))
    return apply("ite", apply("<", a, lower), lower, apply("ite", apply(">", a, upper), upper, a))


@util.stack_like.register(SmtTerm)
def _stack(first: SmtTerm, items) -> List[SmtTerm]:
    return [as_term(item) for item in items]


class Script:
    """Accumulates declarations, definitions and assertions of one query."""

    def __init__(self, comment: str):
        self.lines = [f"; {comment}", f"(set-logic {LOGIC})"]

    def declare(self, name: str, lo: float, hi: float) -> SmtTerm:
        self.lines.append(f"(declare-fun {name} () Real)")
        self.lines.append(f"(assert (<= {format_real(lo)} {name}))")
        self.lines.append(f"(assert (<= {name} {format_real(hi)}))")
        return SmtTerm(name)

    def define(self, name: str, term: SmtTerm) -> SmtTerm:
        self.lines.append(f"(define-fun {name} () Real {as_term(term).text})")
        return SmtTerm(name)

    def require(self, *conditions: SmtTerm) -> None:
        body = conditions[0].text if len(conditions) == 1 else apply("and", *conditions).text
        self.lines.append(f"(assert {body})")

    def render(self) -> str:
        return "\n".join(self.lines + ["(check-sat)", "(exit)"]) + "\n"


def _activate(z: SmtTerm, activation: net.Activation) -> SmtTerm:
    if activation == net.Activation.TANH:
        return util.tanh(z)
    if activation == net.Activation.SQUARE:
        return util.square(z)
    if activation == net.Activation.ABSOLUTE:
        return util.absolute(z)
    return z


def _slope(z: SmtTerm, a: SmtTerm, activation: net.Activation):
    if activation == net.Activation.TANH:
        return 1.0 - util.square(a)
    if activation == net.Activation.SQUARE:
        return 2.0 * z
    if activation == net.Activation.ABSOLUTE:
        return util.sign(z)
    return 1.0


def network_terms(script: Script, mlp: net.Mlp, inputs: Sequence[SmtTerm], prefix: str, with_gradient=False):
    """
    Define every neuron of the network over the input terms. Returns the output terms and, when asked
    for a scalar network, the input gradient defined through the reverse pass.
    """
    pre, post = [], []
    a = list(inputs)
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        activation = mlp.output_activation if i == last else mlp.hidden_activation
        z_layer, a_layer = [], []
        for j in range(w.shape[0]):
            affine = total([w[j, k] * a[k] for k in range(w.shape[1]) if w[j, k] != 0] + [b[j]])
            z = script.define(f"{prefix}_z{i + 1}_{j + 1}", affine)
            z_layer.append(z)
            a_layer.append(script.define(f"{prefix}_a{i + 1}_{j + 1}", _activate(z, activation)))
        pre.append(z_layer)
        post.append(a_layer)
        a = a_layer
    if not with_gradient:
        return a, None

    delta = [_slope(pre[-1][0], post[-1][0], mlp.output_activation)]
    for i in reversed(range(len(mlp.weights))):
        w = mlp.weights[i]
        g = [total([delta[k] * w[k, j] for k in range(w.shape[0]) if w[k, j] != 0]) for j in range(w.shape[1])]
        if i == 0:
            gradient = [script.define(f"{prefix}_grad_{j + 1}", term) for j, term in enumerate(g)]
            return a, gradient
        delta = [
            script.define(f"{prefix}_d{i}_{j + 1}", g[j] * _slope(pre[i - 1][j], post[i - 1][j], mlp.hidden_activation))
            for j in range(len(g))
        ]


def policy_terms(script: Script, policy: net.PolicyNet, state: Sequence[SmtTerm]) -> List[SmtTerm]:
    logits, _ = network_terms(script, policy.core, state, "pi")
    if policy.anchor is not None:
        offset = policy.anchor - net.forward(policy.core, np.zeros(policy.core.input_dim))
        logits = [y + float(o) for y, o in zip(logits, offset)]
    actuation = policy.actuation
    if actuation.kind == net.ActuationKind.BOX_SQUASH:
        u = [
            lo + (hi - lo) * ((util.tanh(y) + 1.0) * 0.5)
            for y, lo, hi in zip(logits, actuation.lower.tolist(), actuation.upper.tolist())
        ]
    elif actuation.kind == net.ActuationKind.BOX_CLAMP:
        u = [util.clip(y, lo, hi) for y, lo, hi in zip(logits, actuation.lower, actuation.upper)]
    else:
        weights = [script.define(f"pi_e{j + 1}", util.exp(y)) for j, y in enumerate(logits)]
        norm = script.define("pi_norm", total(weights))
        u = [
            total([float(v) * e for v, e in zip(row, weights) if v != 0]) / norm
            for row in actuation.vertices
        ]
    return [script.define(f"u{i + 1}", term) for i, term in enumerate(u)]


def _declare_state(script: Script, region: BoxRegion) -> List[SmtTerm]:
    return [script.declare(f"x{i + 1}", lo, hi) for i, (lo, hi) in enumerate(zip(region.lo, region.hi))]


def _norm_squared(state: Sequence[SmtTerm]) -> SmtTerm:
    return total([util.square(x) for x in state])


def export_smt2(
    certificate: net.Mlp,
    policy: net.PolicyNet,
    model: DynamicsModel,
    region: BoxRegion,
    c: float,
    epsilon: float = EPSILON,
) -> Dict[str, str]:
    """One query per condition: positivity (W > W(0)), decrease (W' < 0), boundary (W > c on the box surface)."""
    w0 = float(net.forward(certificate, np.zeros(region.dim))[0])
    queries = {}

    script = Script(f"negated positivity: W(x) <= W(0) inside the level set {c}, outside the ball {epsilon}")
    state = _declare_state(script, region)
    (w,), _ = network_terms(script, certificate, state, "W")
    script.require(apply("<=", w, w0), apply("<", w, c), apply(">=", _norm_squared(state), epsilon**2))
    queries["positivity"] = script.render()

    script = Script(f"negated decrease: W'(x) >= 0 inside the level set {c}, outside the ball {epsilon}")
    state = _declare_state(script, region)
    (w,), gradient = network_terms(script, certificate, state, "W", with_gradient=True)
    u = policy_terms(script, policy, state)
    f = [script.define(f"f{i + 1}", term) for i, term in enumerate(dynamics.eval_f(model, state, u))]
    w_dot = script.define("W_dot", total([g * fi for g, fi in zip(gradient, f)]))
    script.require(apply(">=", w_dot, 0.0), apply("<", w, c), apply(">=", _norm_squared(state), epsilon**2))
    queries["decrease"] = script.render()

    script = Script(f"negated boundary: W(x) <= {c} somewhere on the boundary of the region")
    state = _declare_state(script, region)
    (w,), _ = network_terms(script, certificate, state, "W")
    faces = [apply("=", x, lo) for x, lo in zip(state, region.lo)]
    faces += [apply("=", x, hi) for x, hi in zip(state, region.hi)]
    script.require(apply("or", *faces), apply("<=", w, c))
    queries["boundary"] = script.render()

    logger.info(f"Exported {len(queries)} SMT-LIB queries for level {c}")
    return queries


def export_lqr_smt2(
    model: DynamicsModel, p: np.ndarray, k: np.ndarray, c: float, epsilon: float = EPSILON
) -> Dict[str, str]:
    """Negated LQR conditions on {x^T P x < c, ||x|| >= eps}: decrease of x^T P x, and the input bound."""
    half = np.sqrt(c * np.diag(np.linalg.inv(p)))
    region = BoxRegion(-half, half)
    u_star = np.atleast_1d(model.u_star)
    queries = {}

    def setup(comment: str):
        script = Script(comment)
        state = _declare_state(script, region)
        n = len(state)
        quadratic = [float(p[i, j]) * (state[i] * state[j]) for i in range(n) for j in range(n)]
        energy = script.define("energy", total(quadratic))
        inputs = [
            script.define(f"u{i + 1}", total([-float(k[i, j]) * state[j] for j in range(n)] + [u_star[i]]))
            for i in range(k.shape[0])
        ]
        return script, state, energy, inputs

    script, state, energy, inputs = setup(f"negated LQR decrease on the ellipse x'Px < {c}")
    f = dynamics.eval_f(model, state, [util.clip(u, -ACTUATION_BOUND, ACTUATION_BOUND) for u in inputs])
    decrease = total(
        [float(p[i, j]) * (state[i] * f[j]) for i in range(len(state)) for j in range(len(state)) if p[i, j] != 0]
    )
    script.require(apply(">=", decrease, 0.0), apply("<", energy, c), apply(">=", _norm_squared(state), epsilon**2))
    queries["decrease"] = script.render()

    script, state, energy, inputs = setup(f"negated LQR input bound on the ellipse x'Px < {c}")
    exceeds = [apply(">", util.absolute(u), ACTUATION_BOUND) for u in inputs]
    script.require(apply("<", energy, c), exceeds[0] if len(exceeds) == 1 else apply("or", *exceeds))
    queries["input"] = script.render()
    return queries
