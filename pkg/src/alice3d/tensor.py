"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` is both a value and a node of the computation graph: it
holds the array, references to its parents and a closure that pushes the
output gradient back into them.  Calling :meth:`Tensor.backward` on a scalar
walks the graph in reverse topological order once.

Only the operations the model needs are provided.  Every op output is checked
for NaN/Inf; a non-finite value raises :class:`NonFiniteError`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; outputs are constants."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum proves every element finite; an overflowing one falls through to the full test
    if np.isfinite(np.sum(arr)):
        return
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    # -- basics -------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- graph --------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operators ----------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` following numpy broadcasting rules."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner),)

    return _make(out, (x,), backward, "gelu")


# -- linear algebra and shape ----------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dims")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[:-2] + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, backward, "concat")


def gather(x: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """``np.take_along_axis`` with scatter-add backward (duplicate indices allowed)."""
    idx = np.asarray(idx, dtype=np.intp)
    axis = axis % x.ndim
    out = np.take_along_axis(x.data, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        fancy = []
        for d, n in enumerate(g.shape):
            if d == axis:
                fancy.append(np.broadcast_to(idx, g.shape))
            else:
                shp = [1] * g.ndim
                shp[d] = n
                fancy.append(np.broadcast_to(np.arange(n).reshape(shp), g.shape))
        np.add.at(full, tuple(fancy), g)
        return (full,)

    return _make(out, (x,), backward, "gather")


def index(x: Tensor, key) -> Tensor:
    """Basic or advanced numpy indexing."""
    out = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward, "index")


# -- reductions -------------------------------------------------------------
def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    return _make(
        np.asarray(x.data.sum(axis=axis, keepdims=keepdims)),
        (x,),
        lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)),),
        "sum",
    )


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[a] for a in axes]))
    return _make(
        np.asarray(x.data.mean(axis=axis, keepdims=keepdims)),
        (x,),
        lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)) / count,),
        "mean",
    )


# -- fused normalisations --------------------------------------------------
def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    _check_finite(logits.data, "softmax input")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (logits,), backward, "softmax")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    _check_finite(logits.data, "log_softmax input")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (logits,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    gain, bias = as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _make(out, (x, gain, bias), backward, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float | None = None) -> Tensor:
    """Scale each slice along ``axis`` to unit Euclidean norm.

    With ``eps=None`` a zero-norm slice is an error; otherwise the norm is
    floored at ``eps``.
    """
    norm = np.sqrt((x.data**2).sum(axis=axis, keepdims=True))
    if eps is None:
        if np.any(norm == 0.0):
            raise ZeroDivisionError("l2_normalize: zero-norm row")
        denom = norm
        clipped = np.zeros_like(norm, dtype=bool)
    else:
        clipped = norm < eps
        denom = np.maximum(norm, eps)
    out = x.data / denom

    def backward(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(clipped, g / denom, (g - out * proj) / denom),)

    return _make(out, (x,), backward, "l2_normalize")


# -- losses -----------------------------------------------------------------
def cosine_loss(student: Tensor, teacher) -> Tensor:
    """Mean over rows of ``-cos(student_row, teacher_row)``; teacher is a constant."""
    teacher = as_tensor(teacher).detach()
    if student.shape != teacher.shape:
        raise ValueError(f"shape mismatch {student.shape} vs {teacher.shape}")
    s = student if student.ndim > 1 else reshape(student, (1, -1))
    t = teacher if teacher.ndim > 1 else reshape(teacher, (1, -1))
    cos = tsum(l2_normalize(s, axis=-1) * l2_normalize(t, axis=-1), axis=-1)
    return mul(mean(cos), -1.0)


def cross_entropy(logits: Tensor, targets: np.ndarray, axis: int = -1) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` along ``axis``."""
    logp = log_softmax(logits, axis=axis)
    idx = np.expand_dims(np.asarray(targets, dtype=np.intp), axis)
    picked = gather(logp, idx, axis=axis)
    return mul(mean(picked), -1.0)


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float((a * a).sum()) for a in arrays))
