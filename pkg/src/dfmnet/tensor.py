"""Dense fp32 tensors with a reverse-mode gradient tape.

Every differentiable op records its parents and a closure mapping the output
gradient to per-parent gradients.  ``Tape`` orders the recorded graph
topologically and replays it in reverse.  Recording is switched off inside
``no_grad()``; the switch is thread-local so concurrent inference threads do
not interfere with a training thread.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import EmptyTape, NumericalError, ShapeMismatch

DTYPE = np.float32
DIV_EPS = 1e-8
# sigmoid outputs stay strictly inside (0, 1); float32 would round large logits to 1.0
SIGMOID_LO = np.finfo(DTYPE).tiny
SIGMOID_HI = np.nextafter(DTYPE(1), DTYPE(0))

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        Tape(self).backward(grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, DTYPE), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, DTYPE), requires_grad)


def ones_like(t: Tensor) -> Tensor:
    return ones(t.shape)


def make_result(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op."""
    out = Tensor(data)
    out.op = op
    parents = tuple(parents)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def check_finite(data: np.ndarray, op: str) -> np.ndarray:
    # A float32 sum is one cheap pass; fall back to the exact test only when
    # it overflows or turns NaN.
    if data.size and not math.isfinite(float(data.sum())):
        if not np.isfinite(data).all():
            raise NumericalError(f"non-finite value produced by {op}")
    return data


# -- tape ----------------------------------------------------------------


class Tape:
    """Topologically ordered record of the ops that produced ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._order(root)

    @staticmethod
    def _order(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def __len__(self) -> int:
        return sum(1 for n in self.nodes if not n.is_leaf)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def backward(self, grad: np.ndarray | None = None, retain_graph: bool = False) -> None:
        root = self.root
        if not root.requires_grad or root.is_leaf:
            raise EmptyTape("nothing to differentiate: the output is not attached to any tape")
        if grad is None:
            if root.data.size != 1:
                raise ShapeMismatch(f"backward() needs a scalar loss, got shape {root.shape}")
            grad = np.ones_like(root.data)
        grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, DTYPE)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                check_finite(g, "backward")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if not retain_graph:
                node._parents = ()
                node._backward = None
                node.requires_grad = False


def backward(loss: Tensor) -> None:
    loss.backward()


# -- broadcasting helpers -------------------------------------------------


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeMismatch(f"shapes {a} and {b} are not broadcastable") from None


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    out = check_finite(a.data + b.data, "add")
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    out = check_finite(a.data - b.data, "sub")
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = check_finite(ad * bd, "mul")

    def back(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), back, "mul")


def div(a, b, eps: float = DIV_EPS) -> Tensor:
    """``a / (b + eps)``; the eps keeps all-zero denominators finite."""
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad = a.data
    den = b.data + DTYPE(eps)
    out = check_finite(ad / den, "div")

    def back(g):
        ga = unbroadcast(g / den, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / den, den.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


# relu, relu6 and sigmoid map finite inputs to finite outputs, so they skip
# the finiteness check.


def relu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0)
    return make_result(out, (a,), lambda g: (g * (x > 0),), "relu")


def relu6(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if kernels.ENABLED and x.flags.c_contiguous:
        out = kernels.relu6_forward(x)
        return make_result(out, (a,), lambda g: (kernels.relu6_backward(np.ascontiguousarray(g), x),), "relu6")
    out = np.clip(x, 0, 6)
    return make_result(out, (a,), lambda g: (g * ((x > 0) & (x < 6)),), "relu6")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.clip(expit(a.data).astype(DTYPE, copy=False), SIGMOID_LO, SIGMOID_HI)
    return make_result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = check_finite(x * x, "square")
    return make_result(out, (a,), lambda g: (2 * g * x,), "square")


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: ``add``, ``mul``, ``div``, ``relu`` or ``sigmoid``."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"relu": relu, "relu6": relu6, "sigmoid": sigmoid, "neg": neg, "square": square}
    if op in binary:
        if b is None:
            raise ShapeMismatch(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions and shape ops ------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims), DTYPE)
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).astype(DTYPE),)

    return make_result(out, (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axis, keepdims), DTYPE(1.0 / count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {src} to {shape}") from None
    return make_result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def index(a, key) -> Tensor:
    """Basic or advanced indexing; the gradient scatters back into zeros."""
    a = as_tensor(a)
    out = np.array(a.data[key], dtype=DTYPE)

    def back(g):
        full = np.zeros(a.shape, DTYPE)
        np.add.at(full, key, g)
        return (full,)

    return make_result(out, (a,), back, "index")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, back, "concat")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    return make_result(out, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")
