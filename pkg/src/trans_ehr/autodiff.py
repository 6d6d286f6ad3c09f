"""Reverse-mode automatic differentiation over dense numpy arrays.

The primitive set is deliberately small: it covers what the TRANS model needs
(linear maps, gathers, row-wise softmax attention, gated updates, sinusoidal
time encodings and a multi-label BCE loss) and nothing else.  Every primitive
records a closure that maps the upstream gradient to one gradient per parent.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_grad_fn", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: GradFn | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Iterable[Tensor], grad_fn: GradFn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), grad_fn, "mul")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


# --------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b) -> Tensor:
    """Matrix product of ``(..., n, k) @ (..., k, m)``.

    Leading batch dimensions must agree exactly, or ``b`` may be a plain
    2-D matrix shared across the batch.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > a.ndim:
        raise DimensionError(f"matmul: right operand has more batch dimensions, {a.shape} @ {b.shape}")

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _node(a.data @ b.data, (a, b), grad_fn, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: no tensors given")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {ref.shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, grad_fn, "concat")


def getitem(x: Tensor, key) -> Tensor:
    """Slice with basic or integer-array indexing."""
    try:
        out = x.data[key]
    except IndexError as exc:
        raise DimensionError(f"slice: {exc}") from None

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _node(np.array(out, copy=True), (x,), grad_fn, "slice")


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Embedding gather: rows of ``x`` selected by an integer index array."""
    index = np.asarray(index, dtype=np.intp)
    if axis != 0:
        raise DimensionError("take: only axis 0 gathers are supported")
    if index.size and (index.min() < -x.shape[0] or index.max() >= x.shape[0]):
        raise DimensionError(f"take: index out of range for {x.shape[0]} rows")

    def grad_fn(g):
        flat = index.reshape(-1) % x.shape[0]
        rows = g.reshape(flat.size, -1)
        if x.shape[0] * flat.size <= 4_000_000:
            # scatter-add as a one-hot product; much faster than np.add.at
            onehot = np.zeros((x.shape[0], flat.size), dtype=g.dtype)
            onehot[flat, np.arange(flat.size)] = 1.0
            return ((onehot @ rows).reshape(x.shape),)
        full = np.zeros_like(x.data)
        np.add.at(full, flat, g.reshape(-1, *x.shape[1:]))
        return (full,)

    return _node(x.data[index], (x,), grad_fn, "take")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), grad_fn, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: bad axes {axes} for shape {x.shape}")
    inverse = np.argsort([a % x.ndim for a in axes])

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _node(np.transpose(x.data, axes), (x,), grad_fn, "transpose")


# --------------------------------------------------------------------------
# reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out), (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


# --------------------------------------------------------------------------
# nonlinearities


def _unary(x: Tensor, out: np.ndarray, local_grad: Callable[[], np.ndarray], op: str) -> Tensor:
    def grad_fn(g):
        return (g * local_grad(),)

    return _node(out, (x,), grad_fn, op)


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _unary(x, out, lambda: out * (1.0 - out), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _unary(x, out, lambda: 1.0 - out * out, "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0.0).astype(x.dtype), lambda: mask.astype(x.dtype), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    z = x.data
    inner = _GELU_C * (z + 0.044715 * z**3)
    th = np.tanh(inner)
    out = 0.5 * z * (1.0 + th)

    def local():
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * z * z)
        return 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * dinner

    return _unary(x, out, local, "gelu")


def identity(x: Tensor) -> Tensor:
    return x


def sin(x: Tensor) -> Tensor:
    return _unary(x, np.sin(x.data), lambda: np.cos(x.data), "sin")


def cos(x: Tensor) -> Tensor:
    return _unary(x, np.cos(x.data), lambda: -np.sin(x.data), "cos")


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax along the last axis.

    ``mask`` (boolean, broadcastable to ``x``) marks valid entries; rows with
    no valid entry produce all zeros.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    total = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, total, out=np.zeros_like(e), where=total > 0).astype(x.dtype, copy=False)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), grad_fn, "softmax")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on raw logits; ``targets`` is a constant array."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"bce_with_logits: logits {logits.shape} vs targets {y.shape}")
    z = logits.data
    elem = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    if reduction == "none":
        out, scale = elem, None
    elif reduction == "sum":
        out, scale = np.asarray(elem.sum()), 1.0
    elif reduction == "mean":
        out, scale = np.asarray(elem.mean()), 1.0 / max(elem.size, 1)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def grad_fn(g):
        d = _stable_sigmoid(z) - y
        return ((d * g) if scale is None else (d * (g * scale)),)

    return _node(out.astype(logits.dtype, copy=False), (logits,), grad_fn, "bce_with_logits")


# --------------------------------------------------------------------------
# backward pass


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every leaf requiring grad."""
    if loss.data.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves
