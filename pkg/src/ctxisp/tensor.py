"""Dense NCHW tensors with tape-based reverse-mode differentiation.

The engine covers exactly the operations used by the colour module, the
reconstruction network and the training losses. Every differentiable op
records one entry on the active :class:`Tape`; :func:`backward` replays
those entries in reverse order and accumulates adjoints additively.

Example
-------
>>> x = Tensor([3.0], requires_grad=True)
>>> backward((x * x).sum())
>>> float(x.grad[0])
6.0
"""

from __future__ import annotations

import contextlib
import math
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

from . import _kernels

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-6
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def record(self, out, inputs, backward_fn):
        self.records.append((out, inputs, backward_fn))

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


_local = threading.local()
_DEBUG = os.environ.get("CTXISP_DEBUG", "") not in ("", "0")


def _ctx():
    if not hasattr(_local, "tape"):
        _local.tape = Tape()
        _local.grad_enabled = True
        _local.mac_counter = None
    return _local


def current_tape() -> Tape:
    return _ctx().tape


@contextlib.contextmanager
def use_tape(tape: Tape):
    """Record onto ``tape`` instead of the thread's default tape."""
    ctx = _ctx()
    prev, ctx.tape = ctx.tape, tape
    try:
        yield tape
    finally:
        ctx.tape = prev


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops produce plain constant tensors."""
    ctx = _ctx()
    prev, ctx.grad_enabled = ctx.grad_enabled, False
    try:
        yield
    finally:
        ctx.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _ctx().grad_enabled


def set_debug(flag: bool) -> None:
    """Toggle finiteness assertions on every forward result."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates of every conv2d executed inside the block.

    Yields a one-element list whose item holds the running total.
    """
    ctx = _ctx()
    prev, ctx.mac_counter = ctx.mac_counter, [0]
    try:
        yield ctx.mac_counter
    finally:
        ctx.mac_counter = prev


class Tensor:
    """An ndarray plus an optional gradient slot.

    Tensors created directly are leaves; their ``grad`` starts at zero when
    ``requires_grad`` is set. Tensors returned by ops carry ``grad=None``
    until a backward pass reaches them.
    """

    __slots__ = ("data", "grad", "requires_grad", "is_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.is_leaf = True

    @classmethod
    def _result(cls, data, requires_grad):
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.is_leaf = False
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> Tensor:
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / other)
        return div(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _emit(data, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    ctx = _ctx()
    req = ctx.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor._result(data, req)
    if req:
        ctx.tape.record(out, tuple(inputs), backward_fn)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _emit(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _emit(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _emit(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), bw)


def scalar_mul(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = a.data.dtype.type(s)
    return _emit(a.data * s, (a,), lambda g: (g * s,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if exponent == 2:
        return square(a)
    return _emit(a.data ** exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sqrt(a) -> Tensor:
    """Square root whose adjoint is taken as 0 where the input is 0."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0).astype(out.dtype)
        return (g * d,)

    return _emit(out, (a,), bw)


def clamp(a, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _emit(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def unary(a, fn: Callable[[np.ndarray], np.ndarray], dfn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Elementwise ``fn`` with a caller-supplied derivative ``dfn``."""
    a = as_tensor(a)
    return _emit(np.asarray(fn(a.data), dtype=a.dtype), (a,), lambda g: (g * dfn(a.data),))


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _emit(out, (a,), bw)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    total = reduce_sum(a, axis, keepdims)
    return scalar_mul(total, total.size / as_tensor(a).size)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _conv_out(n, k, stride, padding, axis_name):
    padded = n + 2 * padding
    if padded < k:
        raise ShapeError(f"conv2d: padded {axis_name} extent {padded} is smaller than kernel {k}")
    return (padded - k) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is (B, Cin, H, W); ``weight`` is (Cout, Cin/groups, kh, kw).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D (B, C, H, W), got rank {x.ndim}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D, got rank {weight.ndim}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError("conv2d: stride and groups must be positive, padding non-negative")
    n_batch, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin % groups:
        raise ShapeError(f"conv2d: channel axis (1) has {cin} channels, not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(f"conv2d: channel axis (1) has {cin} channels but weight expects "
                         f"{cin_g * groups} ({cin_g} per group)")
    if cout % groups:
        raise ShapeError(f"conv2d: output channels {cout} not divisible by groups={groups}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias must have shape ({cout},), got {bias.shape}")
    ho = _conv_out(h, kh, stride, padding, "height (axis 2)")
    wo = _conv_out(w, kw, stride, padding, "width (axis 3)")

    counter = _ctx().mac_counter
    if counter is not None:
        counter[0] += n_batch * cout * cin_g * kh * kw * ho * wo

    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    pointwise = kh == 1 and kw == 1 and stride == 1 and groups == 1 and padding == 0
    depthwise = groups == cin == cout and groups > 1

    dense = groups == 1 and not pointwise
    direct = dense and stride == 1 and min(cin, cout) <= 4
    im2col = dense and not direct
    if pointwise:
        out = np.matmul(wd[:, :, 0, 0], xp.reshape(n_batch, cin, -1)).reshape(n_batch, cout, ho, wo)
    elif depthwise and stride == 1:
        out = _kernels.depthwise_forward_s1(xp, np.ascontiguousarray(wd[:, 0]), ho, wo)
    elif depthwise:
        out = _kernels.depthwise_forward(xp, wd[:, 0], stride, ho, wo)
    elif direct:
        out = _kernels.conv_direct_s1(xp, wd, ho, wo)
    elif im2col:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        out = np.matmul(wd.reshape(cout, -1), cols).reshape(n_batch, cout, ho, wo)
    else:
        out = _generic_conv_forward(xp, wd, stride, groups, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None]

    def bw(g):
        gx = gw = gb = None
        if pointwise:
            gm = g.reshape(n_batch, cout, -1)
            if x.requires_grad:
                gx = np.matmul(wd[:, :, 0, 0].T, gm).reshape(xd.shape)
            if weight.requires_grad:
                xm = xp.reshape(n_batch, cin, -1)
                acc = gm[0] @ xm[0].T
                for b in range(1, n_batch):
                    acc += gm[b] @ xm[b].T
                gw = acc.reshape(wd.shape)
        else:
            g = np.ascontiguousarray(g)
            if depthwise and stride == 1:
                gxp = None
                if x.requires_grad:
                    gpad = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                    flipped = np.ascontiguousarray(wd[:, 0, ::-1, ::-1])
                    gxp = _kernels.depthwise_forward_s1(gpad, flipped, xp.shape[2], xp.shape[3])
                if weight.requires_grad:
                    gw = _kernels.depthwise_weight_grad_s1(xp, g, kh, kw)[:, None]
            elif depthwise:
                gxp, gwk = _kernels.depthwise_backward(xp, wd[:, 0], g, stride)
                gw = gwk[:, None] if weight.requires_grad else None
            elif direct:
                gxp = None
                if x.requires_grad:
                    gpad = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                    flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                    gxp = _kernels.conv_direct_s1(gpad, flipped, xp.shape[2], xp.shape[3])
                if weight.requires_grad:
                    gw = _kernels.conv_direct_s1_weight_grad(xp, g, kh, kw)
            elif im2col:
                gm = g.reshape(n_batch, cout, -1)
                gxp = None
                if x.requires_grad:
                    gcols = np.matmul(wd.reshape(cout, -1).T, gm)
                    gxp = _col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
                if weight.requires_grad:
                    acc = gm[0] @ cols[0].T
                    for b in range(1, n_batch):
                        acc += gm[b] @ cols[b].T
                    gw = acc.reshape(wd.shape)
            else:
                gxp, gw = _generic_conv_backward(xp, wd, g, stride, groups, weight.requires_grad)
            if x.requires_grad:
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
                gx = np.ascontiguousarray(gx)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, bw if bias is not None else (lambda g: bw(g)[:2]))


def _im2col(xp, kh, kw, stride, ho, wo):
    n_batch, cin = xp.shape[:2]
    cols = np.empty((n_batch, cin, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = _tap(xp, i, j, stride, ho, wo)
    return cols.reshape(n_batch, cin * kh * kw, ho * wo)


def _col2im(gcols, shape, kh, kw, stride, ho, wo):
    gxp = np.zeros(shape, dtype=gcols.dtype)
    gcols = gcols.reshape(shape[0], shape[1], kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gcols[:, :, i, j]
    return gxp


def _tap(xs, i, j, stride, ho, wo):
    return xs[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def _generic_conv_forward(xp, wd, stride, groups, ho, wo):
    n_batch, cin = xp.shape[:2]
    cout, cin_g, kh, kw = wd.shape
    og = cout // groups
    out = np.zeros((n_batch, cout, ho * wo), dtype=np.result_type(xp, wd))
    for grp in range(groups):
        xs = xp[:, grp * cin_g:(grp + 1) * cin_g]
        wg = wd[grp * og:(grp + 1) * og]
        acc = out[:, grp * og:(grp + 1) * og]
        for i in range(kh):
            for j in range(kw):
                cols = _tap(xs, i, j, stride, ho, wo).reshape(n_batch, cin_g, ho * wo)
                acc += np.matmul(wg[:, :, i, j], cols)
    return out.reshape(n_batch, cout, ho, wo)


def _generic_conv_backward(xp, wd, g, stride, groups, need_w):
    n_batch, cin = xp.shape[:2]
    cout, cin_g, kh, kw = wd.shape
    og = cout // groups
    ho, wo = g.shape[2], g.shape[3]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(wd) if need_w else None
    gm_all = g.reshape(n_batch, cout, ho * wo)
    for grp in range(groups):
        xs = xp[:, grp * cin_g:(grp + 1) * cin_g]
        gxs = gxp[:, grp * cin_g:(grp + 1) * cin_g]
        wg = wd[grp * og:(grp + 1) * og]
        gm = gm_all[:, grp * og:(grp + 1) * og]
        for i in range(kh):
            for j in range(kw):
                back = np.matmul(wg[:, :, i, j].T, gm).reshape(n_batch, cin_g, ho, wo)
                _tap(gxs, i, j, stride, ho, wo)[...] += back
                if need_w:
                    cols = _tap(xs, i, j, stride, ho, wo).reshape(n_batch, cin_g, ho * wo)
                    acc = gm[0] @ cols[0].T
                    for b in range(1, n_batch):
                        acc += gm[b] @ cols[b].T
                    gw[grp * og:(grp + 1) * og, :, i, j] = acc
    return gxp, gw


def gelu(x) -> Tensor:
    """Exact (erf-form) GELU: ``x * Phi(x)``."""
    x = as_tensor(x)
    xd = x.data
    if xd.dtype == np.float32:
        cdf = _kernels.gelu_cdf32(xd)
        out = xd * cdf
    else:
        cdf = 0.5 * (1.0 + _erf(xd * _INV_SQRT2))
        out = xd * cdf

    def bw(g):
        pdf = np.multiply(xd, xd)
        pdf *= xd.dtype.type(-0.5)
        np.exp(pdf, out=pdf)
        pdf *= xd.dtype.type(_INV_SQRT_2PI)
        pdf *= xd
        pdf += cdf
        pdf *= g
        return (pdf,)

    return _emit(out, (x,), bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def layer_norm_channels(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Standardise each pixel's channel vector (biased variance), then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"layer_norm_channels: expected (B, C, H, W), got {x.shape}")
    n_batch, n_chan, h, w = x.shape
    if gamma.shape != (n_chan,) or beta.shape != (n_chan,):
        raise ShapeError(f"layer_norm_channels: channel axis (1) has {n_chan} channels, "
                         f"gamma/beta have {gamma.shape}/{beta.shape}")
    x3 = x.data.reshape(n_batch, n_chan, h * w)
    out, xhat, rstd = _kernels.layer_norm_forward(x3, gamma.data, beta.data, eps)

    def bw(g):
        dx, dgamma, dbeta = _kernels.layer_norm_backward(
            np.ascontiguousarray(g).reshape(n_batch, n_chan, h * w), xhat, rstd, gamma.data)
        return dx.reshape(x.shape), dgamma, dbeta

    return _emit(out.reshape(x.shape), (x, gamma, beta), bw)


def avg_pool2d(x, window: int, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    if window < 1:
        raise ValueError("avg_pool2d: window must be positive")
    stride = window if stride is None else stride
    if stride < 1:
        raise ValueError("avg_pool2d: stride must be positive")
    n_batch, n_chan, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"avg_pool2d: window {window} exceeds spatial extent {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    scale = x.dtype.type(1.0 / (window * window))
    out = np.zeros((n_batch, n_chan, ho, wo), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            out += _tap(x.data, i, j, stride, ho, wo)
    out *= scale

    def bw(g):
        gx = np.zeros_like(x.data)
        gs = g * scale
        for i in range(window):
            for j in range(window):
                _tap(gx, i, j, stride, ho, wo)[...] += gs
        return (gx,)

    return _emit(out, (x,), bw)


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected (B, C, H, W), got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)
    inv = x.dtype.type(1.0 / (h * w))
    return _emit(out, (x,), lambda g: (np.broadcast_to(g * inv, x.shape).copy(),))


def channel_scale(x, scale) -> Tensor:
    """Multiply every pixel of channel ``c`` in batch item ``b`` by ``scale[b, c]``."""
    x, scale = as_tensor(x), as_tensor(scale)
    if x.ndim != 4:
        raise ShapeError(f"channel_scale: expected (B, C, H, W), got {x.shape}")
    n_batch, n_chan = x.shape[:2]
    if scale.ndim == 4 and scale.shape[2:] == (1, 1):
        s = scale.data
    elif scale.ndim == 2:
        s = scale.data[:, :, None, None]
    else:
        raise ShapeError(f"channel_scale: scale must be (B, C) or (B, C, 1, 1), got {scale.shape}")
    if s.shape[1] != n_chan:
        raise ShapeError(f"channel_scale: channel axis (1) has {n_chan} channels, scale has {s.shape[1]}")
    if s.shape[0] not in (1, n_batch):
        raise ShapeError(f"channel_scale: batch axis (0) has {n_batch} items, scale has {s.shape[0]}")

    def bw(g):
        gx = g * s if x.requires_grad else None
        gs = None
        if scale.requires_grad:
            gs = (g * x.data).sum(axis=(2, 3), keepdims=True)
            if s.shape[0] == 1 and n_batch > 1:
                gs = gs.sum(axis=0, keepdims=True)
            gs = gs.reshape(scale.shape)
        return gx, gs

    return _emit(x.data * s, (x, scale), bw)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape, then clear it."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must hold a single element, got shape {loss.shape}")
    tape = current_tape() if tape is None else tape
    if not tape.records:
        raise RuntimeError("backward: tape is empty (was the loss computed under no_grad?)")
    adjoint = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.records):
        g = adjoint.pop(id(out), None)
        if g is None:
            continue
        out.grad = g if out.grad is None else out.grad + g
        grads = fn(g)
        for inp, gi in zip(inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            else:
                key = id(inp)
                prev = adjoint.get(key)
                adjoint[key] = gi if prev is None else prev + gi
    tape.clear()


@dataclass
class GradCheckReport:
    """Outcome of :func:`grad_check`; ``errors[i]`` belongs to ``inputs[i]``."""

    errors: list[float] = field(default_factory=list)
    tolerance: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], tolerance: float = 1e-6,
               step: float | None = None, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Non-scalar outputs are reduced with a fixed random projection so that
    output-invariant directions cannot hide errors. The error per input is
    ``max|analytic - numeric| / max(max|numeric|, max|analytic|)`` over the
    checked coordinates (all of them unless ``max_coords`` is given).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    probe = {}

    def scalar(out):
        if out.size == 1:
            return reduce_sum(out)
        if "w" not in probe:
            probe["w"] = Tensor(rng.standard_normal(out.shape), dtype=out.dtype)
        return reduce_sum(mul(out, probe["w"]))

    tape = Tape()
    for t in inputs:
        if t.requires_grad:
            t.zero_grad()
    with use_tape(tape):
        loss = scalar(fn(*inputs))
        backward(loss, tape)

    report = GradCheckReport(tolerance=tolerance)
    for t in inputs:
        if not t.requires_grad:
            report.errors.append(0.0)
            continue
        h = step if step is not None else (1e-6 if t.dtype == np.float64 else 1e-2)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(idx.size)
        with no_grad():
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(scalar(fn(*inputs)).data)
                flat[i] = orig - h
                f_minus = float(scalar(fn(*inputs)).data)
                flat[i] = orig
                numeric[k] = (f_plus - f_minus) / (2 * h)
        analytic = t.grad.reshape(-1)[idx].astype(np.float64)
        scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-300)
        report.errors.append(float(np.abs(analytic - numeric).max(initial=0.0) / scale))
    return report
