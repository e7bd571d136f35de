"""
A small reverse-mode differentiation engine over numpy arrays.

Every Tensor remembers the tensors it was computed from together with a vector-Jacobian
product for each of them. grad() walks that graph backwards from a scalar loss.

Gradients of losses that themselves contain input derivatives of a network are obtained by
building the network's tangent pass out of Tensor operations (see net.directional_derivative)
and differentiating through it, so no second backward pass is ever needed.
"""

import operator
from typing import Callable, List, Sequence, Tuple

import numpy as np

import util
from util import UsageError


class UnsupportedOperationError(UsageError, TypeError):
    """A loss graph used an operation that has no derivative rule here."""


VJP = Callable[[np.ndarray], np.ndarray]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("value", "parents", "requires_grad", "op")

    def __init__(self, value, parents: Sequence[Tuple["Tensor", VJP]] = (), requires_grad: bool = False, op="leaf"):
        self.value = np.asarray(value, dtype=float)
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(parent.requires_grad for parent, _ in self.parents)
        self.op = op

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    # numpy hands mixed array/Tensor arithmetic to us; anything else has no derivative rule
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method == "__call__" and not kwargs and ufunc in _UFUNC_BINARY and len(inputs) == 2:
            return _UFUNC_BINARY[ufunc](as_tensor(inputs[0]), as_tensor(inputs[1]))
        if method == "__call__" and not kwargs and ufunc is np.negative:
            return -as_tensor(inputs[0])
        raise UnsupportedOperationError(f"numpy.{ufunc.__name__} is not a differentiable primitive")

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __rsub__(self, other):
        return add(as_tensor(other), -self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return Tensor(-self.value, [(self, lambda g: -g)], op="neg")

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise UnsupportedOperationError("only constant exponents are supported")
        return power(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        return getitem(self, index)

    def __abs__(self):
        return absolute(self)

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise UnsupportedOperationError("transpose is only defined for matrices")
        return Tensor(self.value.T, [(self, lambda g: g.T)], op="transpose")

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.value.size if axis is None else self.value.shape[axis]
        return reduce_sum(self, axis=axis, keepdims=keepdims) * (1.0 / count)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if not isinstance(value, (int, float, np.ndarray, np.floating, list, tuple)):
        raise UnsupportedOperationError(f"cannot use {type(value).__name__} inside a differentiable expression")
    return Tensor(value)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=float), requires_grad=True)


def stop_gradient(value) -> Tensor:
    """Treat the argument as a constant: it contributes its value but no derivative."""
    value = as_tensor(value)
    return Tensor(value.value, op="stop_gradient")


def add(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.value + b.value,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
        op="add",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.value * b.value,
        [(a, lambda g: _unbroadcast(g * b.value, a.shape)), (b, lambda g: _unbroadcast(g * a.value, b.shape))],
        op="mul",
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.value / b.value
    return Tensor(
        out,
        [(a, lambda g: _unbroadcast(g / b.value, a.shape)), (b, lambda g: _unbroadcast(-g * out / b.value, b.shape))],
        op="div",
    )


def power(a: Tensor, exponent: float) -> Tensor:
    return Tensor(a.value**exponent, [(a, lambda g: g * exponent * a.value ** (exponent - 1))], op="pow")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise UnsupportedOperationError("matmul is only defined between matrices")
    return Tensor(a.value @ b.value, [(a, lambda g: g @ b.value.T), (b, lambda g: a.value.T @ g)], op="matmul")


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return Tensor(a.value.sum(axis=axis, keepdims=keepdims), [(a, vjp)], op="sum")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(part, (int, slice, type(Ellipsis), type(None))) for part in parts)


def getitem(a: Tensor, index) -> Tensor:
    if not _is_basic_index(index):
        raise UnsupportedOperationError("only basic indexing (ints, slices, ...) is differentiable")

    def vjp(g):
        out = np.zeros_like(a.value)
        out[index] += g
        return out

    return Tensor(a.value[index], [(a, vjp)], op="getitem")


def stack(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise UsageError(f"cannot stack tensors of shapes {sorted(shapes)}")
    out = np.stack([t.value for t in tensors], axis=axis)

    def part(i):
        return lambda g: np.take(g, i, axis=axis)

    return Tensor(out, [(t, part(i)) for i, t in enumerate(tensors)], op="stack")


def _unary(name: str, fn, derivative) -> Callable[[Tensor], Tensor]:
    def apply(a: Tensor) -> Tensor:
        value = fn(a.value)
        return Tensor(value, [(a, lambda g: g * derivative(a.value, value))], op=name)

    apply.__name__ = name
    return apply


tanh = _unary("tanh", np.tanh, lambda x, y: 1.0 - y * y)
sin = _unary("sin", np.sin, lambda x, y: np.cos(x))
cos = _unary("cos", np.cos, lambda x, y: -np.sin(x))
tan = _unary("tan", np.tan, lambda x, y: 1.0 + y * y)
exp = _unary("exp", np.exp, lambda x, y: y)
sqrt = _unary("sqrt", np.sqrt, lambda x, y: 0.5 / y)
absolute = _unary("abs", np.abs, lambda x, y: np.sign(x))
relu = _unary("relu", lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(float))


def sign(a: Tensor) -> Tensor:
    # piecewise constant, so no derivative flows back
    return stop_gradient(Tensor(np.sign(a.value)))


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def softmax(a: Tensor) -> Tensor:
    # shifting by a constant leaves softmax unchanged, so the shift carries no derivative
    shift = stop_gradient(Tensor(a.value.max(axis=-1, keepdims=True)))
    e = exp(a - shift)
    return e / e.sum(axis=-1, keepdims=True)


_UFUNC_BINARY = {
    np.add: operator.add,
    np.subtract: operator.sub,
    np.multiply: operator.mul,
    np.true_divide: operator.truediv,
    np.matmul: operator.matmul,
}


def grad(output: Tensor, inputs: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradient of a scalar tensor with respect to each of the inputs."""
    if output.value.size != 1:
        raise UsageError(f"can only differentiate a scalar, got shape {output.shape}")

    order: List[Tensor] = []
    seen = set()
    pending = [(output, False)]
    while pending:
        node, expanded = pending.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        pending.append((node, True))
        for parent, _ in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                pending.append((parent, False))

    grads = {id(output): np.ones_like(output.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            if not parent.requires_grad:
                continue
            contribution = vjp(g)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + contribution
            else:
                grads[id(parent)] = contribution

    return [np.array(grads.get(id(t), np.zeros_like(t.value)), dtype=float).reshape(t.shape) for t in inputs]


for _generic, _impl in [
    (util.tanh, tanh),
    (util.sin, sin),
    (util.cos, cos),
    (util.tan, tan),
    (util.exp, exp),
    (util.sqrt, sqrt),
    (util.square, square),
    (util.absolute, absolute),
    (util.sign, sign),
    (util.softmax, softmax),
]:
    _generic.register(Tensor)(_impl)


@util.columns.register(Tensor)
def _columns(x: Tensor, width: int):
    if x.ndim == 0 or x.shape[-1] != width:
        raise UsageError(f"expected a last dimension of {width}, got shape {x.shape}")
    return [x[..., i] for i in range(width)]


@util.stack_like.register(Tensor)
def _stack(first: Tensor, items):
    return stack(items, axis=-1)


@util.clip.register(Tensor)
def _clip(a: Tensor, lower, upper):
    raise UnsupportedOperationError("clamping has no useful derivative; the clamp actuation is inference-only")
