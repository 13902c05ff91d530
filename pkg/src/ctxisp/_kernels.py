"""Compiled inner loops for the hot tensor operations.

Only loops that NumPy cannot express without several full passes over
memory live here. Every kernel is dtype-generic (float32 and float64)
except ``gelu_cdf32``.
"""

import math

import numpy as np
from numba import float32, njit, vectorize


@njit(cache=True)
def depthwise_forward(xp, w, stride, out_h, out_w):
    """Per-channel correlation of a padded NCHW array with ``w[c, i, j]``."""
    n_batch, n_chan = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    out = np.zeros((n_batch, n_chan, out_h, out_w), dtype=xp.dtype)
    for b in range(n_batch):
        for c in range(n_chan):
            plane = xp[b, c]
            o = out[b, c]
            for i in range(kh):
                for j in range(kw):
                    wv = w[c, i, j]
                    for h in range(out_h):
                        row = plane[h * stride + i]
                        orow = o[h]
                        for x in range(out_w):
                            orow[x] += wv * row[x * stride + j]
    return out


@njit(cache=True)
def depthwise_backward(xp, w, grad, stride):
    """Adjoints of ``depthwise_forward`` w.r.t. the padded input and kernel."""
    n_batch, n_chan = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    out_h, out_w = grad.shape[2], grad.shape[3]
    dxp = np.zeros_like(xp)
    dw = np.zeros(w.shape, dtype=np.float64)
    for b in range(n_batch):
        for c in range(n_chan):
            plane = xp[b, c]
            dplane = dxp[b, c]
            g = grad[b, c]
            for i in range(kh):
                for j in range(kw):
                    wv = w[c, i, j]
                    acc = 0.0
                    for h in range(out_h):
                        row = plane[h * stride + i]
                        drow = dplane[h * stride + i]
                        grow = g[h]
                        for x in range(out_w):
                            gv = grow[x]
                            drow[x * stride + j] += wv * gv
                            acc += gv * row[x * stride + j]
                    dw[c, i, j] += acc
    return dxp, dw.astype(w.dtype)


@vectorize(["float32(float32)"], fastmath=True, cache=True)
def gelu_cdf32(v):
    """Standard normal CDF in float32.

    Rational minimax erf on [-4, 4]; |error| < 4e-7, i.e. float32 rounding level.
    A ufunc rather than a loop so LLVM vectorises the division.
    """
    z = v * float32(0.7071067811865476)
    z = min(max(z, float32(-4.0)), float32(4.0))
    s = z * z
    p = float32(-2.72614225801306e-10)
    p = p * s + float32(2.77068142495902e-08)
    p = p * s + float32(-2.10102402082508e-06)
    p = p * s + float32(-5.69250639462346e-05)
    p = p * s + float32(-7.34990630326855e-04)
    p = p * s + float32(-2.95459980854025e-03)
    p = p * s + float32(-1.60960333262415e-02)
    q = float32(-1.45660718464996e-05)
    q = q * s + float32(-2.13374055278905e-04)
    q = q * s + float32(-1.68282697438203e-03)
    q = q * s + float32(-7.37332916720468e-03)
    q = q * s + float32(-1.42647390514189e-02)
    return float32(0.5) * (float32(1.0) + z * p / q)


@njit(cache=True)
def layer_norm_forward(x, gamma, beta, eps):
    """Normalise the channel vector at every (b, pixel) of a (B, C, N) array."""
    n_batch, n_chan, n_pix = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty((n_batch, n_pix), dtype=x.dtype)
    mean = np.empty(n_pix, dtype=np.float64)
    var = np.empty(n_pix, dtype=np.float64)
    for b in range(n_batch):
        mean[:] = 0.0
        var[:] = 0.0
        for c in range(n_chan):
            for n in range(n_pix):
                mean[n] += x[b, c, n]
        for n in range(n_pix):
            mean[n] /= n_chan
        for c in range(n_chan):
            for n in range(n_pix):
                d = x[b, c, n] - mean[n]
                var[n] += d * d
        for n in range(n_pix):
            rstd[b, n] = 1.0 / math.sqrt(var[n] / n_chan + eps)
        for c in range(n_chan):
            g = gamma[c]
            bt = beta[c]
            for n in range(n_pix):
                xh = (x[b, c, n] - mean[n]) * rstd[b, n]
                xhat[b, c, n] = xh
                out[b, c, n] = xh * g + bt
    return out, xhat, rstd


@njit(cache=True)
def layer_norm_backward(grad, xhat, rstd, gamma):
    n_batch, n_chan, n_pix = grad.shape
    dx = np.empty_like(grad)
    dgamma = np.zeros(n_chan, dtype=np.float64)
    dbeta = np.zeros(n_chan, dtype=np.float64)
    m1 = np.empty(n_pix, dtype=np.float64)
    m2 = np.empty(n_pix, dtype=np.float64)
    for b in range(n_batch):
        m1[:] = 0.0
        m2[:] = 0.0
        for c in range(n_chan):
            g = gamma[c]
            sg = 0.0
            sgx = 0.0
            for n in range(n_pix):
                gv = grad[b, c, n]
                xh = xhat[b, c, n]
                d = gv * g
                m1[n] += d
                m2[n] += d * xh
                sg += gv
                sgx += gv * xh
            dgamma[c] += sgx
            dbeta[c] += sg
        for n in range(n_pix):
            m1[n] /= n_chan
            m2[n] /= n_chan
        for c in range(n_chan):
            g = gamma[c]
            for n in range(n_pix):
                dx[b, c, n] = rstd[b, n] * (grad[b, c, n] * g - m1[n] - xhat[b, c, n] * m2[n])
    return dx, dgamma.astype(grad.dtype), dbeta.astype(grad.dtype)


@njit(cache=True, fastmath=True)
def depthwise_forward_s1(xp, w, out_h, out_w):
    """Stride-1 specialisation of ``depthwise_forward`` (contiguous inner loop)."""
    n_batch, n_chan = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    out = np.empty((n_batch, n_chan, out_h, out_w), dtype=xp.dtype)
    for b in range(n_batch):
        for c in range(n_chan):
            plane = xp[b, c]
            for h in range(out_h):
                orow = out[b, c, h]
                orow[:] = 0
                for i in range(kh):
                    row = plane[h + i]
                    for j in range(kw):
                        wv = w[c, i, j]
                        for x in range(out_w):
                            orow[x] += wv * row[x + j]
    return out


@njit(cache=True, fastmath=True)
def depthwise_weight_grad_s1(xp, grad, kh, kw):
    n_batch, n_chan = grad.shape[0], grad.shape[1]
    out_h, out_w = grad.shape[2], grad.shape[3]
    dw = np.zeros((n_chan, kh, kw), dtype=np.float64)
    for b in range(n_batch):
        for c in range(n_chan):
            plane = xp[b, c]
            g = grad[b, c]
            for i in range(kh):
                for j in range(kw):
                    total = 0.0
                    for h in range(out_h):
                        row = plane[h + i]
                        grow = g[h]
                        acc = grow[0] * row[j]
                        for x in range(1, out_w):
                            acc += grow[x] * row[x + j]
                        total += acc
                    dw[c, i, j] += total
    return dw.astype(xp.dtype)


@njit(cache=True, fastmath=True)
def conv_direct_s1(xp, w, out_h, out_w):
    """Dense stride-1 correlation, row at a time; fast when Cin or Cout is small."""
    n_batch, cin = xp.shape[0], xp.shape[1]
    cout, kh, kw = w.shape[0], w.shape[2], w.shape[3]
    out = np.zeros((n_batch, cout, out_h, out_w), dtype=xp.dtype)
    for b in range(n_batch):
        for h in range(out_h):
            for c in range(cin):
                for i in range(kh):
                    row = xp[b, c, h + i]
                    for j in range(kw):
                        for o in range(cout):
                            wv = w[o, c, i, j]
                            orow = out[b, o, h]
                            for x in range(out_w):
                                orow[x] += wv * row[x + j]
    return out


@njit(cache=True, fastmath=True)
def conv_direct_s1_weight_grad(xp, grad, kh, kw):
    n_batch, cin = xp.shape[0], xp.shape[1]
    cout, out_h, out_w = grad.shape[1], grad.shape[2], grad.shape[3]
    dw = np.zeros((cout, cin, kh, kw), dtype=np.float64)
    for b in range(n_batch):
        for h in range(out_h):
            for c in range(cin):
                for i in range(kh):
                    row = xp[b, c, h + i]
                    for j in range(kw):
                        for o in range(cout):
                            grow = grad[b, o, h]
                            acc = grow[0] * row[j]
                            for x in range(1, out_w):
                                acc += grow[x] * row[x + j]
                            dw[o, c, i, j] += acc
    return dw.astype(xp.dtype)
