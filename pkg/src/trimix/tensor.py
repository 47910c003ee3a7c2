"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient (and recording is enabled) the output remembers its parents and a
closure that maps the output gradient to per-parent gradients. Nodes carry a
monotonically increasing creation index; since a node is always created after
its parents, sorting reachable nodes by that index gives a valid topological
order for the backward sweep.

Layout convention for images and feature maps is channels-last,
``(N, H, W, C)``, so spatial positions flatten straight into matmul rows.

No general broadcasting: binary ops require identical shapes. The only
broadcasting forms are the explicitly named ones (``scale`` by a python
scalar, ``add_bias`` along the last axis, ``add_rowvec`` and ``scale_rows``
along the leading axis).
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()
_state = {"dtype": np.float32, "grad_enabled": True}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op's contract."""


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def float64_mode():
    """Create new tensors in 64-bit precision (gradient verification only)."""
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._order = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; same contracts as the functional ops
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._order = next(_counter)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same(op: str, *ts: Tensor) -> None:
    s = ts[0].shape
    for t in ts[1:]:
        if t.shape != s:
            raise ShapeError(f"{op}: shape mismatch {s} vs {t.shape}")


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Repeated calls accumulate into existing leaf gradients; call
    :func:`zero_grad` (or ``t.zero_grad()``) between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        n = stack.pop()
        if id(n) in nodes:
            continue
        nodes[id(n)] = n
        stack.extend(p for p in n._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in sorted(nodes.values(), key=lambda n: n._order, reverse=True):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make(x.data + x.data.dtype.type(c), (x,), lambda g: (g,))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-xd))
    return _make(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (g * (2 * xd),))


# ------------------------------------------------------------- broadcast forms


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b where ``b`` has shape ``x.shape[-1:]``."""
    if b.shape != x.shape[-1:]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    red = tuple(range(x.data.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=red)))


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """x[n, ..., c] + v[n, c]: one vector per leading-axis slice."""
    if v.data.ndim != 2 or v.shape[0] != x.shape[0] or v.shape[1] != x.shape[-1]:
        raise ShapeError(f"add_rowvec: {v.shape} incompatible with {x.shape}")
    mid = (1,) * (x.data.ndim - 2)
    vb = v.data.reshape((v.shape[0],) + mid + (v.shape[1],))
    red = tuple(range(1, x.data.ndim - 1))

    def bw(g):
        return g, g.sum(axis=red) if red else g

    return _make(x.data + vb, (x, v), bw)


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """x[n, ...] * w[n]: one scalar weight per leading-axis slice."""
    if w.data.ndim != 1 or w.shape[0] != x.shape[0]:
        raise ShapeError(f"scale_rows: weights {w.shape} incompatible with {x.shape}")
    wb = w.data.reshape((-1,) + (1,) * (x.data.ndim - 1))
    xd = x.data
    red = tuple(range(1, xd.ndim))

    def bw(g):
        return g * wb, (g * xd).sum(axis=red)

    return _make(xd * wb, (x, w), bw)


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.full(shape, g.reshape(()), dtype=g.dtype),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def mean_square_error(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mean_square_error", a, b)
    d = a.data - b.data
    n = d.size

    def bw(g):
        ga = g.reshape(()) * (2.0 / n) * d
        return ga, -ga

    return _make(np.asarray(np.mean(d * d), dtype=a.dtype), (a, b), bw)


# ------------------------------------------------------------------ shaping


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    axis = axis % xs[0].data.ndim
    for t in xs[1:]:
        s0 = list(xs[0].shape)
        s1 = list(t.shape)
        s0.pop(axis), s1.pop(axis)
        if s0 != s1:
            raise ShapeError(f"concat: {xs[0].shape} vs {t.shape} along axis {axis}")
    cuts = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.data.ndim
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dt = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), bw)


def take_rows(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D table (an embedding lookup)."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("take_rows expects a 2-D table")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take_rows: index out of range for table with {table.shape[0]} rows")
    shape, dt = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.data[idx], (table,), bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an (N, H, W, C) map."""
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _make(out, (x,), lambda g: (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),))


# ------------------------------------------------------------ linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m, k) @ (k, n), or batched (B, m, k) @ (B, k, n)."""
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: inner dimensions disagree {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add_bias(y, b) if b is not None else y


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"log_softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v for q (n, d), k (m, d), v (m, d)."""
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError("scaled_dot_attention expects 2-D q, k, v")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"scaled_dot_attention: q{q.shape} k{k.shape} v{v.shape}")
    scores = scale(matmul(q, transpose(k, (1, 0))), 1.0 / math.sqrt(q.shape[1]))
    return matmul(softmax(scores, axis=-1), v)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Zero-padded 'same' convolution on (N, H, W, Cin) with w (k, k, Cin, Cout).

    Padding is k // 2, so stride 1 keeps the resolution and stride 2 halves it.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape}, {w.shape}")
    kh, kw, cin, cout = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d: kernel must be square with odd size")
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[3]} channels, kernel expects {cin}")
    if stride not in (1, 2):
        raise ShapeError("conv2d: stride must be 1 or 2")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    n, h, wd, _ = x.shape
    k, p, s = kh, kh // 2, stride
    ho, wo = (h + 2 * p - k) // s + 1, (wd + 2 * p - k) // s + 1
    xd = x.data
    w2 = w.data.reshape(k * k * cin, cout)

    if k == 1 and s == 1:
        cols2 = xd.reshape(n * h * wd, cin)
    else:
        xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0))) if p else xd
        cols = np.empty((n, ho, wo, k * k, cin), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i * k + j, :] = xp[:, i:i + s * ho:s, j:j + s * wo:s, :]
        cols2 = cols.reshape(n * ho * wo, k * k * cin)
    out = cols2 @ w2
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols2.T @ g2).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ w2.T
            if k == 1 and s == 1:
                gx = gcols.reshape(n, h, wd, cin)
            else:
                gcols = gcols.reshape(n, ho, wo, k * k, cin)
                gxp = np.zeros((n, h + 2 * p, wd + 2 * p, cin), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += gcols[:, :, :, i * k + j, :]
                gx = gxp[:, p:p + h, p:p + wd, :] if p else gxp
                gx = np.ascontiguousarray(gx)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, bw)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalisation over channels-last input (N, ..., C)."""
    c = x.shape[-1]
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("group_norm: gamma/beta must have shape (C,)")
    n = x.shape[0]
    shape = x.shape
    xg = x.data.reshape(n, -1, groups, c // groups)
    mean = xg.mean(axis=(1, 3), keepdims=True)
    xc = xg - mean
    var = (xc * xc).mean(axis=(1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    xhat_flat = xhat.reshape(shape)
    out = xhat_flat * gamma.data + beta.data
    red = tuple(range(len(shape) - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = (g * gamma.data).reshape(xg.shape)
            m1 = dxhat.mean(axis=(1, 3), keepdims=True)
            m2 = (dxhat * xhat).mean(axis=(1, 3), keepdims=True)
            gx = (inv * (dxhat - m1 - xhat * m2)).reshape(shape)
        ggamma = (g * xhat_flat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw)


# -------------------------------------------------------------- verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               indices: Sequence[int] | None = None) -> float:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences.

    Returns ``max |g_fd - g_ad| / max(1, |g_fd|)`` over the checked coordinates
    (all of them unless ``indices`` selects flat positions). ``x`` is modified
    in place during probing and restored afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    backward(loss)
    g_ad = x.grad.reshape(-1).copy()
    x.grad = None

    flat = x.data.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            g_fd = (fp - fm) / (2 * eps)
            worst = max(worst, abs(g_fd - g_ad[i]) / max(1.0, abs(g_fd)))
    return worst
