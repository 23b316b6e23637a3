"""Dense float64 tensors with reverse-mode differentiation.

Every op takes and returns :class:`Tensor` objects wrapping numpy arrays.
Leading axes broadcast like numpy, so a whole batch of scenes can run through
one graph.  Gradients are accumulated by :meth:`Tensor.backward`, which visits
each recorded node exactly once in reverse topological order.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class ContractError(ValueError):
    """Raised when an op's precondition is violated."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: np.ndarray | None = None) -> list["Tensor"]:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Returns the visited nodes in topological order (inputs first).
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return order

    # operator sugar
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

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological_order(root: Tensor) -> list[Tensor]:
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
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _record(out, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # two-sided form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    d = x.data
    return _record(np.log(d), (x,), lambda g: (g / d,), "log")


def tabs(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _record(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


# ----------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


# -------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(ad @ bd, (a, b), backward, "matmul")


def transpose_last(x: Tensor) -> Tensor:
    return swapaxes(x, -1, -2)


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _record(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _record(x.data[index], (x,), backward, "getitem")


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    return getitem(x, (Ellipsis, slice(start, stop)))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select entries of axis -2 by integer index (rows of a matrix)."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, (Ellipsis, idx, slice(None)), g)
        return (full,)

    return _record(np.take(x.data, idx, axis=-2), (x,), backward, "gather_rows")


def pick(x: Tensor, idx) -> Tensor:
    """out[...] = x[..., idx[...]]: one entry of the last axis per leading position."""
    idx = np.asarray(idx, dtype=np.intp)[..., None]
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _record(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), backward, "pick")


# ------------------------------------------------------------------- softmax


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    ``mask`` (broadcastable boolean, True = allowed) gives exactly zero weight
    to blocked positions.  A row with no allowed entry is a contract error.
    """
    d = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.broadcast_to(mask, d.shape).any(axis=-1)):
            raise ContractError("softmax: a row is fully masked")
        d = np.where(mask, d, -np.inf)
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), backward, "softmax")


softmax_rows = softmax


def log_softmax(x: Tensor) -> Tensor:
    d = x.data
    shifted = d - d.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), backward, "log_softmax")


# ---------------------------------------------------------------- layer norm

LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ContractError("layer_norm needs a last extent of at least 2")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bias.shape)

    return _record(out, (x, gain, bias), backward, "layer_norm")


# ------------------------------------------------------------ straight-through


def clamp_st(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values into [lo, hi]; the gradient passes through unchanged."""
    return _record(np.clip(x.data, lo, hi), (x,), lambda g: (g,), "clamp_st")


# ------------------------------------------------------------------ checking


def grad_check(fn: Callable[..., Tensor], inputs: Iterable, h: float = 1e-5) -> float:
    """Compare reverse-mode gradients with central differences.

    ``fn`` maps Tensors to a scalar Tensor.  Returns the maximum over all input
    coordinates of ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    arrays = [np.array(x, dtype=DTYPE) for x in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with _grad_mode(True):
        out = fn(*leaves)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar output, got shape {out.shape}")
    out.backward()

    worst = 0.0
    for k, base in enumerate(arrays):
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(base)
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = _eval_scalar(fn, arrays)
            flat[j] = orig - h
            fm = _eval_scalar(fn, arrays)
            flat[j] = orig
            numeric = (fp - fm) / (2 * h)
            a = float(analytic.reshape(-1)[j])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


def _eval_scalar(fn, arrays) -> float:
    with no_grad():
        return float(fn(*[Tensor(a) for a in arrays]).data)


@contextmanager
def _grad_mode(flag: bool):
    prev = grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev
