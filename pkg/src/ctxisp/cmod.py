"""Colour module: pixel-wise projection, full-image modification vector, channel-wise guidance.

The module maps a demosaiced patch ``x`` to a colour-corrected image::

    x_m  = proj_in(x)          # 1x1 convs, 3 -> hidden -> k
    mv   = encoder(guide)      # large-kernel convs + pooling -> k
    x_mv = x_m * mv            # same vector for every pixel
    y_c  = proj_out(x_mv)      # 1x1 convs, k -> hidden -> 3

Parameters live in a flat ``dict[str, Tensor]`` under the ``cmod.`` prefix.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

PREFIX = "cmod."


def conv_param(rng: np.random.Generator, cout: int, cin: int, kh: int, kw: int, dtype=np.float32,
               zero: bool = False) -> tuple[Tensor, Tensor]:
    """Weight and bias drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), or zeros."""
    if zero:
        w = np.zeros((cout, cin, kh, kw))
        b = np.zeros(cout)
    else:
        bound = 1.0 / np.sqrt(cin * kh * kw)
        w = rng.uniform(-bound, bound, size=(cout, cin, kh, kw))
        b = rng.uniform(-bound, bound, size=cout)
    return Tensor(w, requires_grad=True, dtype=dtype), Tensor(b, requires_grad=True, dtype=dtype)


def init_cmod(rng: np.random.Generator, k: int = 64, hidden: int = 32, enc_width: int = 32,
              dtype=np.float32) -> dict[str, Tensor]:
    layers = [
        ("proj_in.0", hidden, 3, 1),
        ("proj_in.1", k, hidden, 1),
        ("enc.0", enc_width, 4, 7),
        ("enc.1", enc_width, enc_width, 5),
        ("enc.2", k, enc_width, 1),
        ("proj_out.0", hidden, k, 1),
        ("proj_out.1", 3, hidden, 1),
    ]
    params = {}
    for name, cout, cin, ksize in layers:
        w, b = conv_param(rng, cout, cin, ksize, ksize, dtype)
        params[f"{PREFIX}{name}.weight"] = w
        params[f"{PREFIX}{name}.bias"] = b
    return params


def _p(params, name):
    return params[PREFIX + name + ".weight"], params[PREFIX + name + ".bias"]


def project_to_mod_space(x, params) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 3:
        raise T.ShapeError(f"project_to_mod_space: expected (B, 3, H, W), got {x.shape}")
    h = T.gelu(T.conv2d(x, *_p(params, "proj_in.0")))
    return T.conv2d(h, *_p(params, "proj_in.1"))


def encode_guide(guide, params, guide_size: tuple[int, int] | None = None) -> Tensor:
    """Encode a (B, 4, Hg, Wg) guide into a (B, k, 1, 1) modification vector."""
    guide = T.as_tensor(guide)
    if guide.ndim == 3:
        guide = T.Tensor(guide.data[None], dtype=guide.dtype)
    if guide.ndim != 4 or guide.shape[1] != 4:
        raise T.ShapeError(f"encode_guide: expected (B, 4, Hg, Wg), got {guide.shape}")
    if guide_size is not None and tuple(guide.shape[2:]) != tuple(guide_size):
        raise ValueError(f"encode_guide: guide is {guide.shape[2]}x{guide.shape[3]}, "
                         f"model expects {guide_size[0]}x{guide_size[1]}")
    h = T.gelu(T.conv2d(guide, *_p(params, "enc.0"), stride=2, padding=3))
    h = T.avg_pool2d(h, 2)
    h = T.gelu(T.conv2d(h, *_p(params, "enc.1"), stride=2, padding=2))
    h = T.global_avg_pool(h)
    return T.conv2d(h, *_p(params, "enc.2"))


def apply_modification(xm, mv) -> Tensor:
    return T.channel_scale(xm, mv)


def project_to_rgb(xmv, params) -> Tensor:
    h = T.gelu(T.conv2d(xmv, *_p(params, "proj_out.0")))
    return T.conv2d(h, *_p(params, "proj_out.1"))


def cmod_forward(x, guide, params, mv=None, guide_size=None) -> Tensor:
    """Colour-corrected image ``y_c``; pass a precomputed ``mv`` to skip the encoder."""
    if mv is None:
        mv = encode_guide(guide, params, guide_size)
    return project_to_rgb(apply_modification(project_to_mod_space(x, params), mv), params)


def gain_params(gains, k: int = 64, hidden: int = 32, enc_width: int = 32, dtype=np.float32) -> dict[str, Tensor]:
    """Weights under which :func:`cmod_forward` multiplies channel c by ``gains[c]`` for any guide.

    Each projection routes a value v through the pair gelu(v) - gelu(-v),
    which equals v exactly, and the encoder ignores the guide and emits its
    output bias, which carries the gains.
    """
    if hidden < 6 or k < 3:
        raise ValueError("gain construction needs hidden >= 6 and k >= 3")
    zeros = np.zeros
    split = zeros((hidden, 3))
    split[:3] = np.eye(3)
    split[3:6] = -np.eye(3)
    merge = zeros((3, hidden))
    merge[:, :3] = np.eye(3)
    merge[:, 3:6] = -np.eye(3)
    embed = zeros((k, hidden))
    embed[:3] = merge
    select = zeros((hidden, k))
    select[:, :3] = split
    mv = np.ones(k)
    mv[:3] = gains
    arrays = {
        "proj_in.0": (split, zeros(hidden)),
        "proj_in.1": (embed, zeros(k)),
        "enc.0": (zeros((enc_width, 4, 7, 7)), zeros(enc_width)),
        "enc.1": (zeros((enc_width, enc_width, 5, 5)), zeros(enc_width)),
        "enc.2": (zeros((k, enc_width)), mv),
        "proj_out.0": (select, zeros(hidden)),
        "proj_out.1": (merge, zeros(3)),
    }
    params = {}
    for name, (w, b) in arrays.items():
        if w.ndim == 2:
            w = w[:, :, None, None]
        params[f"{PREFIX}{name}.weight"] = Tensor(w, requires_grad=True, dtype=dtype)
        params[f"{PREFIX}{name}.bias"] = Tensor(b, requires_grad=True, dtype=dtype)
    return params
