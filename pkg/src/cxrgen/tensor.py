"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds its output with :func:`_node`, which records the parents and a
closure mapping the output gradient to one gradient per parent. Node ids come
from a global counter, so a parent always has a smaller id than its children
and sorting by descending id is a valid reverse topological order.

Gradients accumulate additively; call :func:`zero_grads` between steps.
"""
from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import EmptySequence, NonScalarLoss, ShapeMismatch, TokenOutOfRange

_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording backward rules (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def single_threaded():
    """Pin BLAS to one thread so results are bitwise reproducible."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ancestor of ``loss`` that requires grad."""
    if loss.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in nodes:
            continue
        nodes[t.node_id] = t
        stack.extend(p for p in t._parents if p.requires_grad and p.node_id not in nodes)

    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        g = pending.pop(nid, None)
        if g is None:
            continue
        t = nodes[nid]
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        t.grad = g if t.grad is None else t.grad + g
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent.node_id)
            pending[parent.node_id] = pg if prev is None else prev + pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias matching ``a``'s trailing dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if 0 < b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        bshape = b.shape
        return _node(a.data + b.data, (a, b), lambda g: (g, g.reshape((-1,) + bshape).sum(axis=0)), "add_bias")
    raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _node(a.data + c, (a,), lambda g: (g,), "add_scalar")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    th = x2 * 0.044715
    th += 1.0
    th *= xd
    th *= _GELU_C
    np.tanh(th, out=th)
    out = th + 1.0
    out *= xd
    out *= 0.5

    def bw(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) C (1 + 3a x^2)
        d = th * th
        np.subtract(1.0, d, out=d)
        d *= xd
        d *= x2 * (3 * 0.044715 * _GELU_C) + _GELU_C
        d += th
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return _node(out, (x,), bw, "gelu")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeMismatch(f"layernorm params {gamma.shape}/{beta.shape} for width {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        dxhat = g * gd
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).reshape(-1, n).sum(axis=0), g.reshape(-1, n).sum(axis=0)

    return _node(out, (x, gamma, beta), bw, "layernorm")


# ------------------------------------------------------------------- products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m,k] @ [k,n] -> [m,n]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _node(ad @ bd, (a, b), bw, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched [n,m,k] @ [n,k,p] -> [n,m,p]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeMismatch(f"bmm: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (np.matmul(g, bd.transpose(0, 2, 1)) if a.requires_grad else None,
                np.matmul(ad.transpose(0, 2, 1), g) if b.requires_grad else None)

    return _node(np.matmul(ad, bd), (a, b), bw, "bmm")


# ------------------------------------------------------------ shape and index


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape {old} -> {shape}") from exc
    return _node(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch(f"transpose axes {axes} for ndim {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [t for t in xs]
    if not xs:
        raise ShapeMismatch("concat of nothing")
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat {[t.shape for t in xs]} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _node(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows (first axis) by integer index; duplicates allowed."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise TokenOutOfRange(f"row index out of range for {x.shape[0]} rows")
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), bw, "take_rows")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by ``ids`` (any integer array shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TokenOutOfRange(f"token id outside vocabulary of {table.shape[0]}")
    flat = ids.reshape(-1)
    out = take_rows(table, flat)
    return reshape(out, ids.shape + (table.shape[1],))


# --------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _node(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _node(
        np.array(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean"
    )


def l2_norm_sq(x: Tensor) -> Tensor:
    """Sum of squared entries."""
    xd = x.data
    return _node(np.array(np.dot(xd.ravel(), xd.ravel())), (x,), lambda g: (2.0 * g * xd,), "l2_norm_sq")


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` is additive (use -inf to exclude)."""
    p = x.data - x.data.max(axis=-1, keepdims=True) if mask is None else x.data + mask
    if mask is not None:
        p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)

    def bw(g):
        gp = g * p
        gp -= p * gp.sum(axis=-1, keepdims=True)
        return (gp,)

    return _node(p, (x,), bw, "softmax")


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits[t])[targets[t]]."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be [T,V], got {logits.shape}")
    T, V = logits.shape
    if T == 0 or targets.size == 0:
        raise EmptySequence("cross-entropy over an empty sequence")
    if targets.size != T:
        raise ShapeMismatch(f"{T} logit rows but {targets.size} targets")
    if targets.min() < 0 or targets.max() >= V:
        raise TokenOutOfRange(f"target id outside [0, {V})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(T)
    loss = float((lse - z[rows, targets]).mean())

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / T),)

    return _node(np.array(loss), (logits,), bw, "softmax_cross_entropy")


# --------------------------------------------------------------- verification


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      indices: Sequence[int] | None = None) -> float:
    """Max relative error between the analytic gradient and central differences.

    error = max_i |g_i - fd_i| / (|fd_i| + 1e-8). ``indices`` restricts the check
    to a subset of flat coordinates of ``x``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.grad, x.requires_grad = saved_grad, saved_flag

    flat = x.data.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            err = abs(analytic.reshape(-1)[i] - fd) / (abs(fd) + 1e-8)
            worst = max(worst, err)
    return worst
