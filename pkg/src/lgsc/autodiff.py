"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every op records a closure on the output tensor that pushes the output
gradient back into its parents. ``Tensor.backward`` linearises the graph
into a :class:`Tape` (parents before children) and walks it in reverse.
"""
from __future__ import annotations

import logging
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

logger = logging.getLogger(__name__)

_GRAD_ENABLED = True
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
COS_EPS = 1e-12


class ShapeError(ValueError):
    pass


@contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[], None] | None = None
        self._op = _op
        self._consumed = False

    # ---- basic accessors -------------------------------------------------
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
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # ---- operator sugar --------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)

    @property
    def T(self): return transpose(self, None)

    # ---- backprop --------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor.

        The graph is consumed: a second call on the same output raises.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward() already ran on this graph; rebuild it with a fresh forward pass")
        tape = Tape.from_output(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(tape.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward()
        for node in tape.nodes:
            node._consumed = True
            node._backward = None


class Tape:
    """Topologically ordered list of graph nodes reachable from an output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def is_topological(self) -> bool:
        pos = {id(n): i for i, n in enumerate(self.nodes)}
        return all(pos[id(p)] < pos[id(n)] for n in self.nodes for p in n._parents)


# ---------------------------------------------------------------------------
# helpers

def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data: np.ndarray, parents: tuple, op: str) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=track, _parents=parents if track else (), _op=op)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = _make(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _backward():
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(out.grad, b.shape))
        out._backward = _backward
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = _make(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _backward():
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(-out.grad, b.shape))
        out._backward = _backward
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = _make(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _backward():
            _accum(a, _unbroadcast(out.grad * b.data, a.shape))
            _accum(b, _unbroadcast(out.grad * a.data, b.shape))
        out._backward = _backward
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = _make(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        def _backward():
            _accum(a, _unbroadcast(out.grad / b.data, a.shape))
            _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))
        out._backward = _backward
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = _make(-a.data, (a,), "neg")
    if out.requires_grad:
        out._backward = lambda: _accum(a, -out.grad)
    return out


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = _make(a.data ** p, (a,), f"pow{p}")
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad * p * a.data ** (p - 1))
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.exp(a.data), (a,), "exp")
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad * out.data)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.log(a.data), (a,), "log")
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad / a.data)
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.sqrt(a.data), (a,), "sqrt")
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad * 0.5 / out.data)
    return out


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf-based normal CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = _make(x * cdf, (a,), "gelu")
    if out.requires_grad:
        def _backward():
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
            _accum(a, out.grad * (cdf + x * pdf))
        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need >= 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions incompatible, {a.shape} @ {b.shape}") from None
    out = _make(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _backward():
            g = out.grad
            if a.requires_grad:
                _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            if b.requires_grad:
                if b.ndim == 2:
                    # shared weight: one GEMM over all leading dims
                    k, n = b.shape
                    _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
                else:
                    _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
        out._backward = _backward
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    out = _make(data, (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad.reshape(a.shape))
    return out


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _make(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        out._backward = lambda: _accum(a, np.transpose(out.grad, inv))
    return out


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    """Slicing / fancy indexing; gradients scatter back with duplicates summed."""
    a = as_tensor(a)
    out = _make(a.data[idx], (a,), "slice")
    if out.requires_grad:
        def _backward():
            g = np.zeros_like(a.data)
            if _is_basic_index(idx):
                g[idx] += out.grad
            else:
                np.add.at(g, idx, out.grad)
            _accum(a, g)
        out._backward = _backward
    return out


def take(a, indices) -> Tensor:
    """Row gather along axis 0 (embedding lookup)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    out = _make(a.data[indices], (a,), "take")
    if out.requires_grad:
        def _backward():
            g = np.zeros_like(a.data)
            np.add.at(g, indices, out.grad)
            _accum(a, g)
        out._backward = _backward
    return out


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}") from None
    out = _make(data, tuple(ts), "concat")
    if out.requires_grad:
        bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
        def _backward():
            for t, g in zip(ts, np.split(out.grad, bounds, axis=axis)):
                _accum(t, g)
        out._backward = _backward
    return out


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: all shapes must match, got {sorted(shapes)}")
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis=axis)


# ---------------------------------------------------------------------------
# reductions

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def _backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.shape).copy())
        out._backward = _backward
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# normalisation and attention primitives

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _make(s, (a,), "softmax")
    if out.requires_grad:
        def _backward():
            g = out.grad
            _accum(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))
        out._backward = _backward
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    ls = z - lse
    out = _make(ls, (a,), "log_softmax")
    if out.requires_grad:
        def _backward():
            g = out.grad
            _accum(a, g - np.exp(ls) * g.sum(axis=axis, keepdims=True))
        out._backward = _backward
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _make(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm")
    if out.requires_grad:
        def _backward():
            g = out.grad
            _accum(gamma, _unbroadcast(g * xhat, gamma.shape))
            _accum(beta, _unbroadcast(g, beta.shape))
            if x.requires_grad:
                gx = g * gamma.data
                _accum(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                                 - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
        out._backward = _backward
    return out


def cosine_similarity(a, b, axis: int = -1, eps: float = COS_EPS) -> Tensor:
    """a.b / (|a| |b|) along ``axis``.

    Where |a||b| < eps the similarity is defined as 0 with zero gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes differ, {a.shape} vs {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    den = na * nb
    ok = den >= eps
    if not ok.all():
        logger.warning("cosine_similarity: %d zero-norm input(s), similarity set to 0", int((~ok).sum()))
    safe = np.where(ok, den, 1.0)
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    cos = np.where(ok, dot / safe, 0.0)
    out = _make(np.squeeze(cos, axis=axis), (a, b), "cosine")
    if out.requires_grad:
        def _backward():
            g = np.expand_dims(out.grad, axis) * ok
            sa = np.where(ok, na, 1.0)
            sb = np.where(ok, nb, 1.0)
            _accum(a, g * (b.data / safe - cos * a.data / (sa * sa)))
            _accum(b, g * (a.data / safe - cos * b.data / (sb * sb)))
        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# finite-difference verification

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-6,
               max_entries: int | None = None, seed: int = 0,
               floor: float = 1e-5, joint: bool = False) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar from ``params`` on each call. Per tensor the
    error is ``max|a - n| / max(max|a|, max|n|, floor)`` over the checked
    entries; ``max_entries`` subsamples large tensors. With ``joint`` the
    checked entries of all tensors form one vector and share one scale.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst, pairs = 0.0, []
    with no_grad():
        for p, a in zip(params, analytic):
            idx = np.arange(p.size)
            if max_entries is not None and p.size > max_entries:
                idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
            num = np.empty(idx.size)
            for k, i in enumerate(idx):
                pos = np.unravel_index(i, p.shape)
                orig = p.data[pos]
                p.data[pos] = orig + eps
                fp = f().item()
                p.data[pos] = orig - eps
                fm = f().item()
                p.data[pos] = orig
                num[k] = (fp - fm) / (2 * eps)
            ana = a.reshape(-1)[idx]
            pairs.append((ana, num))
    groups = [tuple(np.concatenate(x) for x in zip(*pairs))] if joint and pairs else pairs
    for ana, num in groups:
        scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), floor)
        worst = max(worst, float(np.abs(ana - num).max(initial=0.0) / scale))
    for p in params:
        p.grad = None
    return worst
