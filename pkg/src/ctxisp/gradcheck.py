"""Finite-difference verification of every differentiable operation and of the composed model."""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import cmod as cm
from . import losses as L
from . import network as N
from . import tensor as T
from .tensor import Tensor

OP_TOLERANCE = {64: 1e-6, 32: 1e-3}
COMPOSED_TOLERANCE = {64: 1e-4, 32: 5e-2}


@dataclass
class Case:
    name: str
    build: Callable  # (rng, dtype) -> (fn, inputs, step or None)
    composed: bool = False
    max_coords: int | None = 24
    # Deep compositions and kinked losses are too noisy for 32-bit central differences.
    float32: bool = True


@dataclass
class CaseResult:
    name: str
    max_error: float
    tolerance: float
    seeds: int
    composed: bool

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _t(rng, shape, dtype, lo=-1.0, hi=1.0, grad=True):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=grad, dtype=dtype)


def _away_from_zero(rng, shape, dtype):
    v = rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(v, requires_grad=True, dtype=dtype)


def _conv_case(cin, cout, k, stride=1, padding=0, groups=1, hw=(6, 7), bias=True):
    def build(rng, dtype):
        x = _t(rng, (2, cin, *hw), dtype)
        w = _t(rng, (cout, cin // groups, k, k), dtype)
        inputs = [x, w] + ([_t(rng, (cout,), dtype)] if bias else [])
        return (lambda x, w, *b: T.conv2d(x, w, b[0] if b else None, stride, padding, groups)), inputs, None
    return build


def _random_params(rng, config, dtype):
    # Non-zero residual scales and tail so every weight influences the loss.
    params = N.init_params(config, seed=rng, dtype=dtype)
    for name, p in params.items():
        if name.endswith("res_scale1") or name.endswith("res_scale2") or name.startswith("tail."):
            p.data[...] = rng.uniform(0.3, 0.8, size=p.shape) * (0.3 if name.startswith("tail.") else 1.0)
        elif name.endswith(".gamma"):
            p.data[...] = rng.uniform(0.5, 1.5, size=p.shape)
    return params


def _model_case(rng, dtype, what):
    config = N.ModelConfig(guide_size=(16, 16))
    params = _random_params(rng, config, dtype)
    x = Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 12, 12)), requires_grad=True, dtype=dtype)
    guide = Tensor(rng.uniform(0.0, 1.0, size=(1, 4, 16, 16)), dtype=dtype)
    target = Tensor(rng.uniform(0.1, 0.9, size=(1, 3, 12, 12)), dtype=dtype)
    names = list(params)
    # Deep compositions sum many rounded terms, so a wider step is needed; kinks (abs, clamp) cap it from above.
    step = 1e-5 if dtype == np.float64 else None
    if what == "composed":
        def fn(x, *ps):
            p = dict(zip(names, ps))
            y_c = cm.cmod_forward(x, guide, p)
            return L.total_loss(y_c, N.reconstruct(y_c, p), target)[0]
        return fn, [x] + [params[n] for n in names], step
    if what == "block":
        feats = Tensor(rng.standard_normal((1, config.width, 6, 6)), requires_grad=True, dtype=dtype)
        block = [n for n in names if n.startswith("blocks.0.")]
        return (lambda f, *ps: N.baseline_block_forward(f, dict(zip(block, ps)), 0)), \
            [feats] + [params[n] for n in block], step
    if what == "attention":
        feats = Tensor(rng.standard_normal((2, 2 * config.width, 5, 5)), requires_grad=True, dtype=dtype)
        ca = [n for n in names if n.startswith("blocks.1.ca_")]
        return (lambda f, *ps: N.channel_attention(f, dict(zip(ca, ps)), "blocks.1.")), \
            [feats] + [params[n] for n in ca], step
    if what == "reconstruct":
        rec = [n for n in names if not n.startswith(cm.PREFIX)]
        return (lambda y, *ps: N.reconstruct(y, dict(zip(rec, ps)))), [x] + [params[n] for n in rec], step
    if what == "cmod":
        cmn = [n for n in names if n.startswith(cm.PREFIX)]
        g = Tensor(guide.data, requires_grad=True, dtype=dtype)
        return (lambda x, g, *ps: cm.cmod_forward(x, g, dict(zip(cmn, ps)))), \
            [x, g] + [params[n] for n in cmn], step
    raise ValueError(what)


def _loss_case(fn):
    def build(rng, dtype):
        a = _t(rng, (1, 3, 13, 12), dtype, 0.05, 0.95)
        b = _t(rng, (1, 3, 13, 12), dtype, 0.05, 0.95, grad=False)
        return (lambda p: fn(p, b)), [a], None
    return build


def _conv_gelu_mean(rng, dtype):
    x = _t(rng, (2, 3, 9, 9), dtype)
    w = _t(rng, (4, 3, 3, 3), dtype)
    b = _t(rng, (4,), dtype)
    return (lambda x, w, b: T.reduce_mean(T.gelu(T.conv2d(x, w, b, 1, 1)))), [x, w, b], None


def cases() -> list[Case]:
    bcast = (2, 3, 1, 1)
    out = [
        Case("add", lambda r, d: (T.add, [_t(r, (2, 3, 4, 4), d), _t(r, bcast, d)], None)),
        Case("sub", lambda r, d: (T.sub, [_t(r, (2, 3, 4, 4), d), _t(r, (2, 3, 4, 4), d)], None)),
        Case("mul", lambda r, d: (T.mul, [_t(r, (2, 3, 4, 4), d), _t(r, bcast, d)], None)),
        Case("div", lambda r, d: (T.div, [_t(r, (2, 3, 4, 4), d), _t(r, (2, 3, 4, 4), d, 0.5, 2.0)], None)),
        Case("scalar_mul", lambda r, d: ((lambda a: T.scalar_mul(a, -1.7)), [_t(r, (3, 5), d)], None)),
        Case("power", lambda r, d: ((lambda a: T.power(a, 1.5)), [_t(r, (3, 5), d, 0.2, 2.0)], None)),
        Case("square", lambda r, d: (T.square, [_t(r, (3, 5), d)], None)),
        Case("absolute", lambda r, d: (T.absolute, [_away_from_zero(r, (3, 5), d)], None)),
        Case("sqrt", lambda r, d: (T.sqrt, [_t(r, (3, 5), d, 0.2, 2.0)], None)),
        Case("clamp", lambda r, d: ((lambda a: T.clamp(a, -0.5, 0.5)),
                                    [Tensor(r.choice([-0.9, -0.3, 0.1, 0.4, 0.8], size=(4, 5))
                                            + r.uniform(-0.05, 0.05, size=(4, 5)), requires_grad=True, dtype=d)],
                                    None)),
        Case("reduce_sum", lambda r, d: ((lambda a: T.reduce_sum(a, axis=1)), [_t(r, (2, 3, 4), d)], None)),
        Case("reduce_mean", lambda r, d: ((lambda a: T.reduce_mean(a, axis=(0, 2), keepdims=True)),
                                          [_t(r, (2, 3, 4), d)], None)),
        Case("reshape", lambda r, d: ((lambda a: T.reshape(a, (6, 4))), [_t(r, (2, 3, 4), d)], None)),
        Case("conv2d_pointwise", _conv_case(5, 4, 1)),
        Case("conv2d_3x3_small_channels", _conv_case(3, 6, 3, padding=1)),
        Case("conv2d_3x3_dense", _conv_case(6, 5, 3, padding=1)),
        Case("conv2d_depthwise", _conv_case(4, 4, 3, padding=1, groups=4)),
        Case("conv2d_strided_7x7", _conv_case(4, 5, 7, stride=2, padding=3, hw=(10, 9))),
        Case("conv2d_strided_5x5", _conv_case(5, 5, 5, stride=2, padding=2, hw=(7, 8))),
        Case("conv2d_grouped", _conv_case(6, 4, 3, padding=1, groups=2)),
        Case("conv2d_no_bias", _conv_case(3, 3, 3, stride=1, padding=0, bias=False)),
        Case("gelu", lambda r, d: (T.gelu, [_t(r, (2, 4, 8, 8), d, -3.0, 3.0)], None)),
        Case("sigmoid", lambda r, d: (T.sigmoid, [_t(r, (2, 4, 3, 3), d, -4.0, 4.0)], None)),
        Case("layer_norm_channels", lambda r, d: (T.layer_norm_channels,
                                                  [_t(r, (2, 5, 3, 3), d), _t(r, (5,), d, 0.5, 1.5),
                                                   _t(r, (5,), d)], None)),
        Case("layer_norm_near_constant", lambda r, d: (
            T.layer_norm_channels,
            [Tensor(0.7 + 1e-3 * r.standard_normal((1, 4, 3, 3)), requires_grad=True, dtype=d),
             _t(r, (4,), d, 0.5, 1.5), _t(r, (4,), d)], 1e-9), float32=False),
        Case("avg_pool2d", lambda r, d: ((lambda a: T.avg_pool2d(a, 2)), [_t(r, (2, 3, 6, 8), d)], None)),
        Case("avg_pool2d_strided", lambda r, d: ((lambda a: T.avg_pool2d(a, 3, 2)), [_t(r, (1, 2, 7, 7), d)], None)),
        Case("global_avg_pool", lambda r, d: (T.global_avg_pool, [_t(r, (2, 3, 5, 4), d)], None)),
        Case("channel_scale", lambda r, d: (T.channel_scale, [_t(r, (2, 3, 4, 4), d), _t(r, (2, 3), d)], None)),
        Case("channel_scale_4d", lambda r, d: (T.channel_scale, [_t(r, (2, 3, 4, 4), d), _t(r, (2, 3, 1, 1), d)],
                                               None)),
        Case("mse_loss", _loss_case(L.mse_loss)),
        Case("ssim_loss", _loss_case(L.ssim_loss)),
        Case("gradient_loss", _loss_case(L.gradient_loss), float32=False),
        Case("color_loss", _loss_case(L.color_loss), float32=False),
        Case("srgb_to_lab", lambda r, d: (L.srgb_to_lab, [_t(r, (1, 3, 4, 4), d, 0.02, 0.98)], None),
             float32=False),
        Case("conv_gelu_mean", _conv_gelu_mean),
        Case("channel_attention", lambda r, d: _model_case(r, d, "attention"), float32=False),
        Case("baseline_block", lambda r, d: _model_case(r, d, "block"), composed=True, max_coords=8,
             float32=False),
        Case("cmod_forward", lambda r, d: _model_case(r, d, "cmod"), composed=True, max_coords=4,
             float32=False),
        Case("reconstruct", lambda r, d: _model_case(r, d, "reconstruct"), composed=True,
             max_coords=2, float32=False),
        Case("composed_model_loss", lambda r, d: _model_case(r, d, "composed"), composed=True, max_coords=2,
             float32=False),
    ]
    return out


def run(seeds: int = 20, bits: int = 64, tolerance: float | None = None, composed_tolerance: float | None = None,
        only: list[str] | None = None, base_seed: int = 0, report=None) -> list[CaseResult]:
    """Check every case on ``seeds`` random draws; the error of a case is its worst seed."""
    if bits not in (32, 64):
        raise ValueError(f"bits must be 32 or 64, got {bits}")
    dtype = np.float64 if bits == 64 else np.float32
    tol = OP_TOLERANCE[bits] if tolerance is None else tolerance
    ctol = COMPOSED_TOLERANCE[bits] if composed_tolerance is None else composed_tolerance
    results = []
    for case in cases():
        if (only and case.name not in only) or (bits == 32 and not case.float32):
            continue
        worst = 0.0
        t0 = time.perf_counter()
        for s in range(seeds):
            rng = np.random.default_rng(np.random.SeedSequence([base_seed, s, _crc(case.name)]))
            fn, inputs, step = case.build(rng, dtype)
            rep = T.grad_check(fn, inputs, tolerance=tol, step=step, max_coords=case.max_coords, rng=rng)
            worst = max(worst, rep.max_error)
        res = CaseResult(case.name, worst, ctol if case.composed else tol, seeds, case.composed)
        results.append(res)
        if report is not None:
            report(res, time.perf_counter() - t0)
    return results


def _crc(text: str) -> int:
    return zlib.crc32(text.encode())
