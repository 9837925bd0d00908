"""A small reverse-mode tape over numpy arrays.

Only the operations the detector and its losses need are provided. Each op
records a closure that pushes the output gradient to its inputs; calling
:func:`backward` on a scalar replays them in reverse topological order.
"""
from __future__ import annotations

import contextlib

import numpy as np

from sedkit.backend import kernels

_SG_ENABLED = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad=False, _prev=(), name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._backward = None
        self.name = name

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, k):
        if isinstance(k, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / k)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis) * (1.0 / max(int(n), 1))

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def last_sum(x: np.ndarray, keepdims: bool = False) -> np.ndarray:
    """Sum over a short last axis by adding column slices (much faster than
    a strided reduction when the axis has only a few entries)."""
    if x.shape[-1] > 16:
        return x.sum(axis=-1, keepdims=keepdims)
    out = x[..., 0].copy()
    for k in range(1, x.shape[-1]):
        out += x[..., k]
    return out[..., None] if keepdims else out


def last_max(x: np.ndarray, keepdims: bool = False) -> np.ndarray:
    if x.shape[-1] > 16:
        return x.max(axis=-1, keepdims=keepdims)
    out = x[..., 0].copy()
    for k in range(1, x.shape[-1]):
        np.maximum(out, x[..., k], out=out)
    return out[..., None] if keepdims else out


def _is_last(axis, ndim) -> bool:
    return axis is not None and not isinstance(axis, tuple) and axis in (-1, ndim - 1)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _prev=tuple(parents) if req else ())
    if req:
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


@contextlib.contextmanager
def stop_gradient_disabled():
    """Make :func:`sg` the identity inside the block (guard tests only)."""
    global _SG_ENABLED
    old = _SG_ENABLED
    _SG_ENABLED = False
    try:
        yield
    finally:
        _SG_ENABLED = old


def sg(x: Tensor) -> Tensor:
    """Stop-gradient: the returned value is a constant for :func:`backward`."""
    return x.detach() if _SG_ENABLED else x


def add(a, b):
    a = _wrap(a)
    b = _wrap(b, a)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))
    return _result(out_data, (a, b), bw)


def neg(a):
    def bw(g):
        a._accum(-g)
    return _result(-a.data, (a,), bw)


def mul(a, b):
    a = _wrap(a)
    b = _wrap(b, a)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))
    return _result(a.data * b.data, (a, b), bw)


def square(a):
    def bw(g):
        a._accum(g * 2 * a.data)
    return _result(a.data * a.data, (a,), bw)


def exp(a):
    out = np.exp(a.data)

    def bw(g):
        a._accum(g * out)
    return _result(out, (a,), bw)


def log(a):
    def bw(g):
        a._accum(g / a.data)
    return _result(np.log(a.data), (a,), bw)


def relu(a):
    out = np.maximum(a.data, 0)

    def bw(g):
        a._accum(np.where(out > 0, g, 0).astype(g.dtype, copy=False))
    return _result(out, (a,), bw)


def clamp_min(a, lo: float):
    """``max(a, lo)`` elementwise; zero gradient where clamped."""
    mask = a.data >= lo

    def bw(g):
        a._accum(g * mask)
    return _result(np.where(mask, a.data, np.asarray(lo, dtype=a.dtype)), (a,), bw)


def tsum(a, axis=None, keepdims=False):
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))
    if _is_last(axis, a.ndim):
        out = last_sum(a.data, keepdims)
    else:
        out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _result(out, (a,), bw)


def reshape(a, shape):
    def bw(g):
        a._accum(g.reshape(a.shape))
    return _result(a.data.reshape(shape), (a,), bw)


def index(a, idx):
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)
    return _result(a.data[idx], (a,), bw)


def log_softmax(a):
    """Log-softmax over the last axis."""
    z = a.data - last_max(a.data, keepdims=True)
    lse = np.log(last_sum(np.exp(z), keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        a._accum(g - p * last_sum(g, keepdims=True))
    return _result(out, (a,), bw)


def conv2d(x, w, b, stride=1, pad=0):
    """NHWC convolution; ``w`` is (kh, kw, cin, cout), ``b`` is (cout,)."""
    B, H, W, C = x.data.shape
    kh, kw, cin, cout = w.data.shape
    if cin != C:
        raise ValueError(f"conv expects {cin} input channels, got {C}")
    xd = np.ascontiguousarray(x.data)
    pointwise = kh == kw == 1 and stride == 1 and pad == 0
    cols = xd.reshape(-1, C) if pointwise else kernels.im2col(xd, kh, kw, stride, pad)
    w2 = w.data.reshape(-1, cout)
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = cols @ w2
    out += b.data
    out = out.reshape(B, Ho, Wo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        if w.requires_grad:
            w._accum((cols.T @ g2).reshape(w.shape))
        if b.requires_grad:
            b._accum(np.ones(g2.shape[0], dtype=g2.dtype) @ g2)
        if x.requires_grad:
            dcols = np.ascontiguousarray(g2 @ w2.T)
            x._accum(dcols.reshape(B, H, W, C) if pointwise
                     else kernels.col2im(dcols, B, H, W, C, kh, kw, stride, pad))
    return _result(out, (x, w, b), bw)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable tensor."""
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
