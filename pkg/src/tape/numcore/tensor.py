"""Reverse-mode differentiable tensors on top of numpy float64 arrays.

:func:`precision` switches the working dtype (e.g. to float32 for faster
training); everything that checks numerics runs at the float64 default.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``Tensor.backward`` walks the recorded DAG once in reverse
topological order. Recording only happens when at least one input requires a
gradient and recording is enabled (see :func:`no_grad`).
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np



class _Mode(threading.local):
    # per thread, so no_grad/precision blocks in worker threads do not interfere
    grad_enabled = True
    dtype = np.dtype(np.float64)


_MODE = _Mode()


@contextlib.contextmanager
def precision(dtype):
    """Run the block with tensors stored as ``dtype`` (float64 or float32)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported tensor dtype {dtype}")
    prev = _MODE.dtype
    _MODE.dtype = dtype
    try:
        yield
    finally:
        _MODE.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _MODE.grad_enabled
    _MODE.grad_enabled = False
    try:
        yield
    finally:
        _MODE.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, *, check: bool = True):
        arr = np.array(data, dtype=_MODE.dtype) if not isinstance(data, np.ndarray) else data
        if arr.dtype != _MODE.dtype:
            arr = arr.astype(_MODE.dtype)
        if check and not np.all(np.isfinite(arr)):
            raise ValueError("tensor input contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # ------------------------------------------------------------------ basics
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

    def detach(self) -> Tensor:
        return Tensor(self.data, check=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # ---------------------------------------------------------------- autodiff
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=_MODE.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # checked at the leaves only; non-finite values propagate there
                if not np.all(np.isfinite(g)):
                    raise FloatingPointError("non-finite gradient reached a leaf")
                node.grad = g if node.grad is None else node.grad + g
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

    # ---------------------------------------------------------------- operators
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
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _toposort(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, check=False)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data, check=False)
    if _MODE.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    else:
        out.op = op
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data, (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out, (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)),
        "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GeLU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward, "gelu")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward, "index")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (unbroadcast(g, a.shape),), "broadcast_to")


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product with broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def einsum(subscripts: str, *operands) -> Tensor:
    """Differentiable einsum. Subscripts must be explicit (``->``), no ellipsis."""
    ops = [as_tensor(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ValueError("einsum operand count mismatch")
    sizes: dict[str, int] = {}
    for s, o in zip(in_subs, ops):
        for ch, n in zip(s, o.shape):
            sizes[ch] = n
    out = np.einsum(subscripts, *[o.data for o in ops], optimize=True)

    def backward(g):
        grads = []
        for k, o in enumerate(ops):
            if not o.requires_grad:
                grads.append(None)
                continue
            others = [(s, ops[j].data) for j, s in enumerate(in_subs) if j != k]
            avail = set(out_sub).union(*[set(s) for s, _ in others]) if others else set(out_sub)
            target = in_subs[k]
            reduced = "".join(ch for ch in target if ch in avail)
            expr = ",".join([out_sub] + [s for s, _ in others]) + "->" + reduced
            gk = np.einsum(expr, g, *[d for _, d in others], optimize=True)
            if reduced != target:
                shape = [sizes[ch] if ch in avail else 1 for ch in target]
                gk = np.broadcast_to(gk.reshape(shape), o.shape).copy()
            grads.append(gk)
        return tuple(grads)

    return _make(out, ops, backward, "einsum")


# ---------------------------------------------------------------------------
# fused neural-net ops


def softmax(a, axis: int = -1, mask: np.ndarray | None = None, allow_empty: bool = False) -> Tensor:
    """Softmax along ``axis``; masked entries (mask == 0) are exactly zero."""
    from .linalg import masked_softmax

    a = as_tensor(a)
    y = masked_softmax(a.data, mask, axis=axis, allow_empty=allow_empty)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward, "softmax")


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * weight.data + bias.data

    def backward(g):
        n = x.shape[-1]
        gx_hat = g * weight.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        gw = unbroadcast(g * xhat, weight.shape)
        gb = unbroadcast(g, bias.shape)
        return gx, gw, gb

    return _make(out, (x, weight, bias), backward, "layer_norm")


def embedding(weight, ids: np.ndarray) -> Tensor:
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (out,)

    return _make(weight.data[ids], (weight,), backward, "embedding")


def cross_entropy(logits, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean next-token cross entropy.

    ``logits`` has shape (..., V); ``targets`` the matching integer shape. Positions
    with weight 0 contribute nothing (and receive exactly zero gradient).
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    w = np.ones(targets.shape, _MODE.dtype) if weights is None else np.asarray(weights, dtype=_MODE.dtype)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs at least one weighted position")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / total

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return ((p - onehot) * (w / total)[..., None] * g,)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy")
