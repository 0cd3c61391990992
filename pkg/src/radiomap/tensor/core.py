"""Dense tensors with a tape-based reverse-mode autodiff.

Every differentiable op appends one node to the active :class:`Tape`.
:func:`backward` walks the tape in strict reverse append order, so the
topological order is implied by construction and never recomputed.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


@dataclass
class Node:
    out: "Tensor"
    inputs: tuple["Tensor", ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    kind: str


@dataclass
class Tape:
    """Append-only record of differentiable ops."""

    nodes: list[Node] = field(default_factory=list)

    def record(self, out: "Tensor", inputs, vjp, kind: str) -> None:
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append(Node(out, tuple(inputs), vjp, kind))

    def clear(self) -> None:
        for node in self.nodes:
            node.out._tape = None
        self.nodes.clear()


_state = {"tape": Tape(), "grad": True}


def active_tape() -> Tape:
    return _state["tape"]


@contextlib.contextmanager
def tape_scope():
    """Run a block against a fresh tape and drop it on exit."""
    prev = _state["tape"]
    tape = Tape()
    _state["tape"] = tape
    try:
        yield tape
    finally:
        _state["tape"] = prev
        tape.clear()


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


class Tensor:
    """N-d array plus an optional link into the autodiff tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.id = next(_ids)
        self._tape: Tape | None = None
        self._index = -1

    # shape helpers ------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(data: np.ndarray, inputs: Sequence[Tensor], vjp, kind: str) -> Tensor:
    needs = _state["grad"] and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _state["tape"].record(out, inputs, vjp, kind)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# binary ops -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _emit(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def vjp(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _emit(out, (a, b), vjp, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.data * x.dtype.type(c), (x,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(a.data @ b.data, (a, b), vjp, "matmul")


# unary ops --------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)
    return _emit(x.data * slope, (x,), lambda g: (g * slope,), "leaky_relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _emit(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    z = x.data
    out = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    s = _sigmoid_np(z)
    return _emit(out.astype(x.dtype), (x,), lambda g: (g * s,), "softplus")


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _emit(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def square(x: Tensor) -> Tensor:
    return _emit(x.data * x.data, (x,), lambda g: (2 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise ValueError("sqrt of negative entries")
    out = np.sqrt(x.data)
    return _emit(out, (x,), lambda g: (g / (2 * out),), "sqrt")


# reductions and shape ops ----------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _emit(np.asarray(out, dtype=x.dtype), (x,), vjp, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=True),)

    return _emit(np.asarray(out, dtype=x.dtype), (x,), vjp, "mean")


def amax(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    """Max reduction; tied maxima share the incoming gradient equally."""
    axes = _norm_axis(axis, x.ndim)
    m = x.data.max(axis=axes, keepdims=True)
    hit = x.data == m
    share = hit / hit.sum(axis=axes, keepdims=True)
    out = m if keepdims else np.squeeze(m, axis=axes)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return ((g * share).astype(x.dtype),)

    return _emit(out, (x,), vjp, "amax")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Stack NCHW tensors along the channel axis."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: {t.shape} does not match {ref} outside the channel axis")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=1))

    return _emit(np.concatenate([t.data for t in tensors], axis=1), tensors, vjp, "concat")


# backward ---------------------------------------------------------------

def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None, accumulate: bool = True) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns ``{leaf.id: gradient}``. With ``wrt`` given, every listed
    tensor gets an entry, zero when it does not feed ``loss``. Leaf
    ``.grad`` fields are accumulated unless ``accumulate`` is False.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and loss._tape is not None:
        tape = loss._tape
        grads[loss.id] = np.ones_like(loss.data)
        for node in reversed(tape.nodes[: loss._index + 1]):
            g = grads.pop(node.out.id, None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    leaves[inp.id] = inp
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi
    elif loss.requires_grad:
        grads[loss.id] = np.ones_like(loss.data)
        leaves[loss.id] = loss

    result = {i: grads[i] for i in leaves}
    if wrt is not None:
        for t in wrt:
            if t.id not in result:
                result[t.id] = np.zeros_like(t.data)
            leaves.setdefault(t.id, t)
    if accumulate:
        for i, t in leaves.items():
            g = result[i]
            t.grad = g.copy() if t.grad is None else t.grad + g
    return result
