from functools import singledispatch
from typing import List, Sequence

import numpy as np


class UsageError(ValueError):
    """Raised when an operation gets arguments it cannot accept (wrong shapes, unknown options)."""


# Elementary functions used by the dynamics, the networks and the policies.
# The defaults handle floats and numpy arrays; autodiff, interval and smt register their own types,
# so the same closed-form expression can be evaluated, differentiated, bounded or exported.


@singledispatch
def tanh(a):
    return np.tanh(a)


@singledispatch
def sin(a):
    return np.sin(a)


@singledispatch
def cos(a):
    return np.cos(a)


@singledispatch
def tan(a):
    return np.tan(a)


@singledispatch
def exp(a):
    return np.exp(a)


@singledispatch
def sqrt(a):
    return np.sqrt(a)


@singledispatch
def square(a):
    return np.square(a)


@singledispatch
def absolute(a):
    return np.abs(a)


@singledispatch
def sign(a):
    """-1, 0 or 1; the slope of absolute away from 0."""
    return np.sign(a)


@singledispatch
def softmax(a):
    """softmax over the last axis"""
    a = np.asarray(a, dtype=float)
    shifted = np.exp(a - a.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


@singledispatch
def clip(a, lower, upper):
    return np.clip(a, lower, upper)


@singledispatch
def columns(x, width: int) -> List:
    """Split a state (or batch of states) into its components along the last axis."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != width:
        raise UsageError(f"expected a last dimension of {width}, got shape {x.shape}")
    return [x[..., i] for i in range(width)]


@columns.register(list)
@columns.register(tuple)
def _columns_sequence(x, width: int) -> List:
    if len(x) != width:
        raise UsageError(f"expected {width} components, got {len(x)}")
    if all(isinstance(item, (int, float, np.floating)) for item in x):
        return columns(np.asarray(x, dtype=float), width)
    return list(x)


def stack_columns(items: Sequence):
    """Inverse of columns: join components back along a new last axis."""
    plain = (int, float, np.floating, np.ndarray)
    # a batch of plain states pushed through a differentiable or interval policy mixes types
    lead = next((item for item in items if not isinstance(item, plain)), items[0])
    return stack_like(lead, items)


@singledispatch
def stack_like(first, items: Sequence):
    arrays = np.broadcast_arrays(*[np.asarray(item, dtype=float) for item in items])
    return np.stack(arrays, axis=-1)


def row_norms(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.linalg.norm(x, axis=-1)


def as_batch(x, width: int) -> np.ndarray:
    """Promote a single state to a batch of one, checking the width."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise UsageError(f"expected states of dimension {width}, got shape {x.shape}")
    return x
