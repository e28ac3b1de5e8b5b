"""Reverse-mode automatic differentiation over dense float64 arrays.

Tensors wrap numpy arrays. While a ``Tape`` is recording (see ``recording``), every
operation touching a tracked tensor appends a record holding its inputs, its output
and a vector-Jacobian product. ``backward`` replays the records in reverse order.
"""

from __future__ import annotations

import logging
import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import expit, logsumexp, softmax

logger = logging.getLogger(__name__)

ArrayLike = Any
VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class DiffError(Exception):
    """Base error for the differentiation core."""


class ShapeError(DiffError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(DiffError, ValueError):
    """An operation was evaluated outside its domain."""


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: VJP | None  # None marks a watched leaf


class Tape:
    """Ordered log of recorded operations for one forward pass."""

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def _append(self, inputs: tuple[Tensor, ...], output: Tensor, vjp: VJP | None) -> None:
        output.node = len(self.records)
        output.tape = self
        self.records.append(_Record(inputs, output, vjp))

    def watch(self, tensor: Tensor) -> None:
        """Register a trainable leaf so it receives gradients from this tape."""
        if tensor.tape is not self:
            self._append((), tensor, None)


_state = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


@contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    """Record operations on ``tape`` (a fresh one by default) inside the block."""
    tape = tape if tape is not None else Tape()
    if not hasattr(_state, "stack"):
        _state.stack = []
    _state.stack.append(tape)
    try:
        yield tape
    finally:
        _state.stack.pop()


class Tensor:
    """Dense real array with an optional handle into the active tape."""

    __array_ufunc__ = None

    def __init__(self, value: ArrayLike, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self.tape: Tape | None = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += grad

    def on(self, tape: Tape) -> bool:
        return self.tape is tape and self.node is not None

    # operators

    def __add__(self, other: ArrayLike) -> Tensor:
        return elementwise("add", self, other)

    def __radd__(self, other: ArrayLike) -> Tensor:
        return elementwise("add", other, self)

    def __sub__(self, other: ArrayLike) -> Tensor:
        return elementwise("sub", self, other)

    def __rsub__(self, other: ArrayLike) -> Tensor:
        return elementwise("sub", other, self)

    def __mul__(self, other: ArrayLike) -> Tensor:
        return elementwise("mul", self, other)

    def __rmul__(self, other: ArrayLike) -> Tensor:
        return elementwise("mul", other, self)

    def __truediv__(self, other: ArrayLike) -> Tensor:
        return elementwise("div", self, other)

    def __rtruediv__(self, other: ArrayLike) -> Tensor:
        return elementwise("div", other, self)

    def __neg__(self) -> Tensor:
        return elementwise("neg", self)

    def __matmul__(self, other: ArrayLike) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return take(self, index)

    @property
    def T(self) -> Tensor:  # noqa: N802
        return transpose(self)

    def sum(self, axis: int | None = None) -> Tensor:
        return reduce("sum", self, axis)

    def mean(self, axis: int | None = None) -> Tensor:
        return reduce("mean", self, axis)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def as_tensor(x: ArrayLike) -> Tensor:
    """Wrap plain numbers and arrays as constants; tensors pass through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def primitive(value: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Create the output of a differentiable operation and record it when needed.

    ``vjp`` maps the output gradient to one gradient (or None) per input, each already
    reduced to that input's shape.
    """
    out = Tensor(value)
    tape = _active_tape()
    if tape is None:
        return out
    tracked = False
    for tensor in inputs:
        if tensor.requires_grad and tensor.tape is not tape:
            tape.watch(tensor)
        tracked = tracked or tensor.on(tape)
    if tracked:
        tape._append(tuple(inputs), out, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_axis(axis: int | None, ndim: int) -> int | None:
    if axis is None:
        return None
    if not -ndim <= axis < max(ndim, 1):
        raise ShapeError(f"axis {axis} out of range for rank-{ndim} tensor")
    return axis % max(ndim, 1)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _logcosh(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)


def _check_positive(x: np.ndarray, op: str) -> None:
    if not np.all(x > 0):
        raise DomainError(f"{op} of non-positive value (min {np.min(x)!r})")


def _check_non_negative(x: np.ndarray, op: str) -> None:
    if not np.all(x >= 0):
        raise DomainError(f"{op} of negative value (min {np.min(x)!r})")


# kind -> (forward, local derivative given (x, y), optional domain check)
_UNARY: dict[str, tuple[Callable, Callable, Callable | None]] = {
    "neg": (np.negative, lambda x, y: -np.ones_like(x), None),
    "exp": (np.exp, lambda x, y: y, None),
    "log": (np.log, lambda x, y: 1.0 / x, lambda x: _check_positive(x, "log")),
    "sqrt": (np.sqrt, lambda x, y: 0.5 / y, lambda x: _check_non_negative(x, "sqrt")),
    "square": (np.square, lambda x, y: 2.0 * x, None),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y, None),
    "sinh": (np.sinh, lambda x, y: np.cosh(x), None),
    "asinh": (np.arcsinh, lambda x, y: 1.0 / np.sqrt(1.0 + x * x), None),
    "cosh": (np.cosh, lambda x, y: np.sinh(x), None),
    "softplus": (_softplus, lambda x, y: expit(x), None),
    "logcosh": (_logcosh, lambda x, y: np.tanh(x), None),
}

_BINARY = ("add", "sub", "mul", "div")


def elementwise(kind: str, a: ArrayLike, b: ArrayLike | None = None) -> Tensor:
    """Apply an elementwise operation; binary kinds broadcast along trailing axes."""
    a = as_tensor(a)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} takes one operand")
        forward, derivative, check = _UNARY[kind]
        x = a.value
        if check is not None:
            check(x)
        y = forward(x)
        return primitive(y, (a,), lambda g: (g * derivative(x, y),))

    if kind not in _BINARY:
        raise ValueError(f"unknown elementwise operation {kind!r}")
    if b is None:
        raise ValueError(f"{kind} takes two operands")
    b = as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc

    x, z = a.value, b.value
    if kind == "add":
        value = x + z
        vjp = lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, z.shape))  # noqa: E731
    elif kind == "sub":
        value = x - z
        vjp = lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, z.shape))  # noqa: E731
    elif kind == "mul":
        value = x * z
        vjp = lambda g: (_unbroadcast(g * z, x.shape), _unbroadcast(g * x, z.shape))  # noqa: E731
    else:
        if np.any(z == 0):
            raise DomainError("division by zero")
        value = x / z

        def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            return _unbroadcast(g / z, x.shape), _unbroadcast(-g * x / (z * z), z.shape)

    return primitive(value, (a, b), vjp)


def exp(a: ArrayLike) -> Tensor:
    return elementwise("exp", a)


def log(a: ArrayLike) -> Tensor:
    return elementwise("log", a)


def sqrt(a: ArrayLike) -> Tensor:
    return elementwise("sqrt", a)


def square(a: ArrayLike) -> Tensor:
    return elementwise("square", a)


def tanh(a: ArrayLike) -> Tensor:
    return elementwise("tanh", a)


def sinh(a: ArrayLike) -> Tensor:
    return elementwise("sinh", a)


def asinh(a: ArrayLike) -> Tensor:
    return elementwise("asinh", a)


def cosh(a: ArrayLike) -> Tensor:
    return elementwise("cosh", a)


def softplus(a: ArrayLike) -> Tensor:
    return elementwise("softplus", a)


def logcosh(a: ArrayLike) -> Tensor:
    return elementwise("logcosh", a)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Rank-2 matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    x, z = a.value, b.value
    return primitive(x @ z, (a, b), lambda g: (g @ z.T, x.T @ g))


def reduce(kind: str, a: ArrayLike, axis: int | None = None) -> Tensor:
    """Sum, mean or max along ``axis`` (all elements when None)."""
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    x = a.value

    def expand(g: np.ndarray) -> np.ndarray:
        return g if axis is None else np.expand_dims(g, axis)

    if kind == "sum":
        return primitive(x.sum(axis=axis), (a,), lambda g: (np.broadcast_to(expand(g), x.shape).copy(),))
    if kind == "mean":
        count = x.size if axis is None else x.shape[axis]
        return primitive(
            x.mean(axis=axis),
            (a,),
            lambda g: (np.broadcast_to(expand(g) / count, x.shape).copy(),),
        )
    if kind == "max":
        if axis is None:
            flat = int(np.argmax(x))
            mask = np.zeros(x.size)
            mask[flat] = 1.0
            mask = mask.reshape(x.shape)
        else:
            idx = np.expand_dims(np.argmax(x, axis=axis), axis)
            mask = np.zeros_like(x)
            np.put_along_axis(mask, idx, 1.0, axis=axis)
        return primitive(x.max(axis=axis), (a,), lambda g: (mask * expand(g),))
    raise ValueError(f"unknown reduction {kind!r}")


def log_sum_exp(a: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max-shifted log-sum-exp along ``axis``; its gradient is the softmax of the inputs."""
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    x = a.value
    value = logsumexp(x, axis=axis, keepdims=keepdims)
    weights = softmax(x, axis=axis)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return primitive(value, (a,), vjp)


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return a - log_sum_exp(a, axis=axis, keepdims=True)


def take(a: ArrayLike, index: Any) -> Tensor:
    """Basic numpy indexing (ints, slices, tuples of them)."""
    a = as_tensor(a)
    x = a.value

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros_like(x)
        np.add.at(out, index, g)
        return (out,)

    return primitive(x[index], (a,), vjp)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        value = a.value.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return primitive(value, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return primitive(a.value.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concatenate(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[p.shape for p in parts]}") from exc
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return primitive(value, parts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        value = np.stack([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot stack shapes {[p.shape for p in parts]}") from exc
    return primitive(
        value, parts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(parts)))
    )


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every watched leaf's ``grad``.

    Returns the table of gradients contributed by this pass, keyed by leaf tensor.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or loss.node is None:
        raise DiffError("loss is not connected to a recording tape")

    grads: list[np.ndarray | None] = [None] * len(tape)
    grads[loss.node] = np.ones_like(loss.value)
    table: dict[Tensor, np.ndarray] = {}

    for node in range(loss.node, -1, -1):
        record = tape.records[node]
        g = grads[node]
        if g is None:
            continue
        if record.vjp is None:
            record.output._accumulate(g)
            table[record.output] = g
            continue
        for tensor, contribution in zip(record.inputs, record.vjp(g), strict=True):
            if contribution is None or not tensor.on(tape):
                continue
            slot = grads[tensor.node]
            grads[tensor.node] = contribution.copy() if slot is None else slot + contribution
    return table
