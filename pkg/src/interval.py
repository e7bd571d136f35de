"""
Interval arithmetic over numpy arrays.

An Interval holds elementwise lower and upper bounds of the same shape, so a whole batch of
boxes is bounded in one pass. Every operation rounds outward by one ulp, which keeps the
enclosures sound in floating point.
"""

from dataclasses import dataclass
from typing import Iterator, List, Tuple

import numpy as np

import util
from util import UsageError

HALF_PI = np.pi / 2
TWO_PI = 2 * np.pi


class IntervalDomainError(ArithmeticError):
    """An interval operation was asked to cross a pole or leave its domain."""


def _down(x):
    return np.nextafter(x, -np.inf)


def _up(x):
    return np.nextafter(x, np.inf)


class Interval:
    __slots__ = ("lo", "hi")
    # let numpy defer mixed array/Interval arithmetic to our reflected operators
    __array_ufunc__ = None

    def __init__(self, lo, hi=None):
        lo = np.asarray(lo, dtype=float)
        hi = lo if hi is None else np.asarray(hi, dtype=float)
        lo, hi = np.broadcast_arrays(lo, hi)
        if np.any(lo > hi):
            raise UsageError("interval lower bound exceeds upper bound")
        self.lo = np.array(lo)
        self.hi = np.array(hi)

    def __repr__(self):
        if self.lo.ndim == 0:
            return f"Interval([{self.lo!r}, {self.hi!r}])"
        return f"Interval(shape={self.shape})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.lo.shape

    @property
    def ndim(self) -> int:
        return self.lo.ndim

    def __len__(self) -> int:
        return len(self.lo)

    def __getitem__(self, index) -> "Interval":
        return Interval(self.lo[index], self.hi[index])

    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (self.lo <= x) & (x <= self.hi)

    def contains_zero(self) -> np.ndarray:
        return (self.lo <= 0) & (self.hi >= 0)

    def subset_of(self, other: "Interval") -> np.ndarray:
        return (other.lo <= self.lo) & (self.hi <= other.hi)

    def __add__(self, other):
        other = as_interval(other)
        return Interval(_down(self.lo + other.lo), _up(self.hi + other.hi))

    __radd__ = __add__

    def __neg__(self):
        return Interval(-self.hi, -self.lo)

    def __sub__(self, other):
        other = as_interval(other)
        return Interval(_down(self.lo - other.hi), _up(self.hi - other.lo))

    def __rsub__(self, other):
        return as_interval(other) - self

    def __mul__(self, other):
        other = as_interval(other)
        products = np.stack(
            np.broadcast_arrays(self.lo * other.lo, self.lo * other.hi, self.hi * other.lo, self.hi * other.hi)
        )
        return Interval(_down(products.min(axis=0)), _up(products.max(axis=0)))

    __rmul__ = __mul__

    def reciprocal(self) -> "Interval":
        if np.any(self.contains_zero()):
            raise IntervalDomainError("division by an interval containing zero")
        return Interval(_down(1.0 / self.hi), _up(1.0 / self.lo))

    def __truediv__(self, other):
        return self * as_interval(other).reciprocal()

    def __rtruediv__(self, other):
        return as_interval(other) * self.reciprocal()

    def __pow__(self, exponent):
        if exponent != 2:
            raise UsageError("only squaring is supported on intervals")
        return self.square()

    def __matmul__(self, matrix) -> "Interval":
        """Bound x @ M for a real matrix M, one row of x per box."""
        matrix = np.asarray(matrix, dtype=float)
        positive, negative = np.maximum(matrix, 0.0), np.minimum(matrix, 0.0)
        lo = self.lo @ positive + self.hi @ negative
        hi = self.hi @ positive + self.lo @ negative
        # accumulated rounding of the dot products
        slack = (np.maximum(np.abs(self.lo), np.abs(self.hi)) @ np.abs(matrix)) * (matrix.shape[0] + 2) * np.finfo(
            float
        ).eps
        return Interval(_down(lo - slack), _up(hi + slack))

    def sum(self, axis=-1) -> "Interval":
        count = self.lo.shape[axis]
        slack = np.maximum(np.abs(self.lo), np.abs(self.hi)).sum(axis=axis) * (count + 2) * np.finfo(float).eps
        return Interval(_down(self.lo.sum(axis=axis) - slack), _up(self.hi.sum(axis=axis) + slack))

    def square(self) -> "Interval":
        lo2, hi2 = self.lo * self.lo, self.hi * self.hi
        upper = _up(np.maximum(lo2, hi2))
        lower = np.where(self.contains_zero(), 0.0, _down(np.minimum(lo2, hi2)))
        return Interval(np.maximum(lower, 0.0), upper)

    def abs(self) -> "Interval":
        upper = np.maximum(np.abs(self.lo), np.abs(self.hi))
        lower = np.where(self.contains_zero(), 0.0, np.minimum(np.abs(self.lo), np.abs(self.hi)))
        return Interval(lower, upper)

    def sign(self) -> "Interval":
        return Interval(np.sign(self.lo), np.sign(self.hi))

    def sqrt(self) -> "Interval":
        if np.any(self.lo < 0):
            raise IntervalDomainError("square root of an interval with negative part")
        return Interval(np.maximum(_down(np.sqrt(self.lo)), 0.0), _up(np.sqrt(self.hi)))

    def tanh(self) -> "Interval":
        return Interval(np.maximum(_down(np.tanh(self.lo)), -1.0), np.minimum(_up(np.tanh(self.hi)), 1.0))

    def exp(self) -> "Interval":
        return Interval(np.maximum(_down(np.exp(self.lo)), 0.0), _up(np.exp(self.hi)))

    def sin(self) -> "Interval":
        return _periodic(self, np.sin, peak=HALF_PI, trough=-HALF_PI)

    def cos(self) -> "Interval":
        return _periodic(self, np.cos, peak=0.0, trough=np.pi)

    def tan(self) -> "Interval":
        branch_lo = np.floor((self.lo + HALF_PI) / np.pi)
        branch_hi = np.floor((self.hi + HALF_PI) / np.pi)
        at_pole = np.isclose(np.cos(self.lo), 0.0, atol=1e-15) | np.isclose(np.cos(self.hi), 0.0, atol=1e-15)
        if np.any(branch_lo != branch_hi) or np.any(at_pole):
            raise IntervalDomainError("tan over an interval that crosses an asymptote")
        return Interval(_down(np.tan(self.lo)), _up(np.tan(self.hi)))

    def clip(self, lower, upper) -> "Interval":
        return Interval(np.clip(self.lo, lower, upper), np.clip(self.hi, lower, upper))

    def norm(self) -> "Interval":
        """Euclidean norm over the last axis."""
        return self.square().sum(axis=-1).sqrt()

    def column(self, i: int) -> "Interval":
        return self[..., i]


def _contains_point(x: Interval, anchor: float) -> np.ndarray:
    """Whether anchor + 2kπ lies in x for some integer k."""
    k = np.ceil((x.lo - anchor) / TWO_PI)
    return anchor + TWO_PI * k <= x.hi


def _periodic(x: Interval, fn, peak: float, trough: float) -> Interval:
    a, b = fn(x.lo), fn(x.hi)
    lo, hi = _down(np.minimum(a, b)), _up(np.maximum(a, b))
    full = x.width() >= TWO_PI
    hi = np.where(full | _contains_point(x, peak), 1.0, np.minimum(hi, 1.0))
    lo = np.where(full | _contains_point(x, trough), -1.0, np.maximum(lo, -1.0))
    return Interval(lo, hi)


def as_interval(value) -> Interval:
    if isinstance(value, Interval):
        return value
    return Interval(value)


def stack(items, axis: int = -1) -> Interval:
    items = [as_interval(item) for item in items]
    los = np.broadcast_arrays(*[item.lo for item in items])
    his = np.broadcast_arrays(*[item.hi for item in items])
    return Interval(np.stack(los, axis=axis), np.stack(his, axis=axis))


BINARY_OPERATIONS = {
    "+": lambda a, b: a + b,
    "-": lambda a, b: a - b,
    "*": lambda a, b: a * b,
    "/": lambda a, b: a / b,
}
UNARY_OPERATIONS = ("tanh", "sin", "cos", "tan", "exp", "square", "sqrt", "abs", "norm")


def interval_elementary(op: str, a, b=None) -> Interval:
    """Apply an arithmetic operator or elementary function by name, e.g. interval_elementary("*", a, b)."""
    if op in BINARY_OPERATIONS:
        if b is None:
            raise UsageError(f"{op} takes two intervals")
        return BINARY_OPERATIONS[op](as_interval(a), as_interval(b))
    if op not in UNARY_OPERATIONS:
        raise UsageError(f"unknown interval operation {op!r}")
    return getattr(as_interval(a), op)()


def softmax(logits: Interval) -> Interval:
    """
    Enclosure of softmax over the last axis. Each coordinate is 1 / (1 + sum_j exp(z_j - z_i)),
    which increases with z_i and decreases with every other z_j.
    """
    count = logits.shape[-1]
    lows, highs = [], []
    for i in range(count):
        others = [j for j in range(count) if j != i]
        worst = np.zeros(logits.shape[:-1])
        best = np.zeros(logits.shape[:-1])
        for j in others:
            worst = _up(worst + _up(np.exp(_up(logits.hi[..., j] - logits.lo[..., i]))))
            best = _down(best + _down(np.exp(_down(logits.lo[..., j] - logits.hi[..., i]))))
        lows.append(_down(1.0 / _up(1.0 + worst)))
        highs.append(_up(1.0 / _down(1.0 + best)))
    lo = np.clip(np.stack(lows, axis=-1), 0.0, 1.0)
    hi = np.clip(np.stack(highs, axis=-1), 0.0, 1.0)
    return Interval(lo, hi)


@dataclass(frozen=True)
class BoxRegion:
    """An axis-aligned box over the state space."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise UsageError(f"box bounds must be vectors of equal length, got {lo.shape} and {hi.shape}")
        if np.any(lo > hi):
            raise UsageError("box is empty: some lower bound exceeds its upper bound")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_bounds(cls, bounds) -> "BoxRegion":
        """[[lo1, hi1], [lo2, hi2], ...] -> BoxRegion"""
        bounds = np.asarray(bounds, dtype=float)
        if bounds.ndim != 2 or bounds.shape[1] != 2:
            raise UsageError("box bounds must be a list of [lo, hi] pairs")
        return cls(bounds[:, 0], bounds[:, 1])

    def to_bounds(self) -> List[List[float]]:
        return [[float(a), float(b)] for a, b in zip(self.lo, self.hi)]

    def __eq__(self, other):
        return isinstance(other, BoxRegion) and np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    def __hash__(self):
        return hash((tuple(self.lo), tuple(self.hi)))

    @property
    def dim(self) -> int:
        return len(self.lo)

    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def volume(self) -> float:
        return float(np.prod(self.widths()))

    def diameter(self) -> float:
        return float(np.linalg.norm(self.widths()))

    def widest_dimension(self) -> int:
        # argmax returns the first maximum, so ties go to the lowest index
        return int(np.argmax(self.widths()))

    def split(self, dim: int = None) -> Tuple["BoxRegion", "BoxRegion"]:
        dim = self.widest_dimension() if dim is None else dim
        mid = 0.5 * (self.lo[dim] + self.hi[dim])
        left_hi, right_lo = self.hi.copy(), self.lo.copy()
        left_hi[dim] = mid
        right_lo[dim] = mid
        return BoxRegion(self.lo, left_hi), BoxRegion(right_lo, self.hi)

    def scale(self, factor: float) -> "BoxRegion":
        a, b = factor * self.lo, factor * self.hi
        return BoxRegion(np.minimum(a, b), np.maximum(a, b))

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((self.lo <= x) & (x <= self.hi), axis=-1)

    def contains_origin_strictly(self) -> bool:
        return bool(np.all(self.lo < 0) and np.all(self.hi > 0))

    def corners(self) -> np.ndarray:
        grids = np.meshgrid(*[[a, b] for a, b in zip(self.lo, self.hi)], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def faces(self) -> Iterator[Tuple[int, int, "BoxRegion"]]:
        """(dimension, side, face) for the 2n faces; side 0 is the lower face."""
        for dim in range(self.dim):
            for side, value in enumerate((self.lo[dim], self.hi[dim])):
                lo, hi = self.lo.copy(), self.hi.copy()
                lo[dim] = hi[dim] = value
                yield dim, side, BoxRegion(lo, hi)

    def to_interval(self) -> Interval:
        return Interval(self.lo, self.hi)


for _generic, _name in [
    (util.tanh, "tanh"),
    (util.sin, "sin"),
    (util.cos, "cos"),
    (util.tan, "tan"),
    (util.exp, "exp"),
    (util.sqrt, "sqrt"),
    (util.square, "square"),
    (util.absolute, "abs"),
    (util.sign, "sign"),
]:
    _generic.register(Interval)(getattr(Interval, _name))

util.softmax.register(Interval)(softmax)


@util.clip.register(Interval)
def _clip(a: Interval, lower, upper):
    return a.clip(lower, upper)


@util.columns.register(Interval)
def _columns(x: Interval, width: int):
    if x.ndim == 0 or x.shape[-1] != width:
        raise UsageError(f"expected a last dimension of {width}, got shape {x.shape}")
    return [x.column(i) for i in range(width)]


@util.stack_like.register(Interval)
def _stack(first: Interval, items):
    return stack(items, axis=-1)
