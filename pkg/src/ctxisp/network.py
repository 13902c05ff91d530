"""SimpleISP: colour module followed by a three-block reconstruction network.

``rgb = y_c + tail(blocks(head(y_c)))`` where ``y_c`` is the colour module
output. Residual scales and the tail start at zero, so a freshly initialised
network passes ``y_c`` straight through.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import cmod as cm
from . import raw
from . import tensor as T
from .tensor import Tensor

N_BLOCKS = 3


@dataclass
class ModelConfig:
    width: int = 32
    k: int = 64
    proj_hidden: int = 32
    enc_width: int = 32
    guide_size: tuple[int, int] = raw.DEFAULT_GUIDE_SIZE

    def __post_init__(self):
        self.guide_size = tuple(int(v) for v in self.guide_size)
        if self.width < 2 or self.width % 2:
            raise ValueError("width must be an even integer >= 2")
        if min(self.k, self.proj_hidden, self.enc_width) < 1:
            raise ValueError("layer widths must be positive")
        if len(self.guide_size) != 2 or min(self.guide_size) < 4:
            raise ValueError("guide_size must be two extents >= 4")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["guide_size"] = list(self.guide_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def init_params(config: ModelConfig | None = None, seed: int | np.random.Generator = 0,
                dtype=np.float32) -> dict[str, Tensor]:
    """All learnable weights, keyed by dotted names, in a fixed order."""
    config = config or ModelConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    c, c2 = config.width, 2 * config.width
    params = cm.init_cmod(rng, config.k, config.proj_hidden, config.enc_width, dtype)
    params["head.weight"], params["head.bias"] = cm.conv_param(rng, c, 3, 3, 3, dtype)
    for i in range(N_BLOCKS):
        pre = f"blocks.{i}."
        for ln in ("ln1", "ln2"):
            params[pre + ln + ".gamma"] = Tensor(np.ones(c), requires_grad=True, dtype=dtype)
            params[pre + ln + ".beta"] = Tensor(np.zeros(c), requires_grad=True, dtype=dtype)
        convs = [("conv_expand", c2, c, 1), ("conv_dw", c2, 1, 3), ("ca_reduce", c // 2, c2, 1),
                 ("ca_expand", c2, c // 2, 1), ("conv_project", c, c2, 1),
                 ("ffn_expand", c2, c, 1), ("ffn_project", c, c2, 1)]
        for name, cout, cin, ks in convs:
            w, b = cm.conv_param(rng, cout, cin, ks, ks, dtype)
            params[pre + name + ".weight"], params[pre + name + ".bias"] = w, b
        params[pre + "res_scale1"] = Tensor(np.zeros(1), requires_grad=True, dtype=dtype)
        params[pre + "res_scale2"] = Tensor(np.zeros(1), requires_grad=True, dtype=dtype)
    params["tail.weight"], params["tail.bias"] = cm.conv_param(rng, 3, c, 3, 3, dtype, zero=True)
    return params


def infer_config(params: dict[str, Tensor], guide_size=raw.DEFAULT_GUIDE_SIZE) -> ModelConfig:
    return ModelConfig(width=params["head.weight"].shape[0], k=params["cmod.enc.2.weight"].shape[0],
                       proj_hidden=params["cmod.proj_in.0.weight"].shape[0],
                       enc_width=params["cmod.enc.0.weight"].shape[0], guide_size=guide_size)


def _wb(params, name):
    return params[name + ".weight"], params[name + ".bias"]


def ca_gate(pooled, params, prefix) -> Tensor:
    """Sigmoid gate from a (B, C, 1, 1) pooled descriptor."""
    h = T.gelu(T.conv2d(pooled, *_wb(params, prefix + "ca_reduce")))
    return T.sigmoid(T.conv2d(h, *_wb(params, prefix + "ca_expand")))


def channel_attention(x, params, prefix) -> Tensor:
    return T.channel_scale(x, ca_gate(T.global_avg_pool(x), params, prefix))


def block_features(x, params, prefix) -> Tensor:
    """First branch up to (excluding) channel attention: ln -> expand -> gelu -> depthwise."""
    h = T.layer_norm_channels(x, params[prefix + "ln1.gamma"], params[prefix + "ln1.beta"])
    h = T.gelu(T.conv2d(h, *_wb(params, prefix + "conv_expand")))
    w, b = _wb(params, prefix + "conv_dw")
    return T.conv2d(h, w, b, padding=1, groups=w.shape[0])


def block_finish(x, feats, gate, params, prefix) -> Tensor:
    u = T.conv2d(T.channel_scale(feats, gate), *_wb(params, prefix + "conv_project"))
    x1 = T.add(x, T.mul(u, params[prefix + "res_scale1"]))
    h = T.layer_norm_channels(x1, params[prefix + "ln2.gamma"], params[prefix + "ln2.beta"])
    h = T.gelu(T.conv2d(h, *_wb(params, prefix + "ffn_expand")))
    v = T.conv2d(h, *_wb(params, prefix + "ffn_project"))
    return T.add(x1, T.mul(v, params[prefix + "res_scale2"]))


def baseline_block_forward(x, params, index: int) -> Tensor:
    prefix = f"blocks.{index}."
    feats = block_features(x, params, prefix)
    gate = ca_gate(T.global_avg_pool(feats), params, prefix)
    return block_finish(x, feats, gate, params, prefix)


def reconstruct(y_c, params) -> Tensor:
    y_c = T.as_tensor(y_c)
    h = T.conv2d(y_c, *_wb(params, "head"), padding=1)
    for i in range(N_BLOCKS):
        h = baseline_block_forward(h, params, i)
    return T.add(y_c, T.conv2d(h, *_wb(params, "tail"), padding=1))


def isp_forward_patch(x, guide, params, mv=None) -> tuple[Tensor, Tensor]:
    """Return ``(y_c, rgb)`` for a batch of demosaiced patches; one tape spans both."""
    y_c = cm.cmod_forward(x, guide, params, mv=mv)
    return y_c, reconstruct(y_c, params)


def _windows(h: int, w: int, tile: int, overlap: int) -> Iterator[tuple[slice, slice, slice, slice]]:
    """Yield (window_rows, window_cols, core_rows, core_cols); cores partition the image."""
    halo = overlap // 2
    step = tile - 2 * halo
    if step < 1:
        raise ValueError(f"tile {tile} too small for overlap {overlap}")
    for y0 in range(0, h, step):
        y1 = min(y0 + step, h)
        wy0, wy1 = max(0, y0 - halo), min(h, y1 + halo)
        for x0 in range(0, w, step):
            x1 = min(x0 + step, w)
            wx0, wx1 = max(0, x0 - halo), min(w, x1 + halo)
            yield (slice(wy0, wy1), slice(wx0, wx1),
                   slice(y0 - wy0, y1 - wy0), slice(x0 - wx0, x1 - wx0))


def _tiled_map(fn, src: np.ndarray, out_channels: int, tile: int, overlap: int) -> np.ndarray:
    n, _, h, w = src.shape
    dst = np.empty((n, out_channels, h, w), dtype=src.dtype)
    for wr, wc, cr, cc in _windows(h, w, tile, overlap):
        res = fn(Tensor(src[:, :, wr, wc], dtype=src.dtype)).data
        dst[:, :, wr, wc][:, :, cr, cc] = res[:, :, cr, cc]
    return dst


def _tiled_block(x: np.ndarray, params, index: int, tile: int, overlap: int) -> np.ndarray:
    prefix = f"blocks.{index}."
    n, _, h, w = x.shape
    pooled = None
    for wr, wc, cr, cc in _windows(h, w, tile, overlap):
        feats = block_features(Tensor(x[:, :, wr, wc], dtype=x.dtype), params, prefix).data
        part = feats[:, :, cr, cc].sum(axis=(2, 3), keepdims=True, dtype=np.float64)
        pooled = part if pooled is None else pooled + part
    gate = ca_gate(Tensor(pooled / (h * w), dtype=x.dtype), params, prefix)

    def finish(win):
        return block_finish(win, block_features(win, params, prefix), gate, params, prefix)

    return _tiled_map(finish, x, x.shape[1], tile, overlap)


def isp_forward_fullres(bayer: raw.BayerImage, params, guide_size=None, tile: int | None = None,
                        overlap: int = 32, return_mv: bool = False):
    """Full-resolution inference; returns an (H, W, 3) float32 image clamped to [0, 1].

    The guide and modification vector are computed once from the whole
    mosaic. With ``tile`` set, every stage runs window by window over
    full-size intermediate buffers and the channel-attention pools are
    accumulated across windows, so the result matches whole-image inference.
    """
    guide_size = guide_size or infer_config(params).guide_size
    with T.no_grad():
        guide = raw.make_guide(raw.pack_rggb(bayer), *guide_size)
        mv = cm.encode_guide(guide[None], params, guide_size)
        x = raw.demosaic_bilinear(bayer)[None]
        if tile is None:
            _, rgb = isp_forward_patch(Tensor(x), None, params, mv=mv)
            out = rgb.data
        else:
            y_c = _tiled_map(lambda t: cm.cmod_forward(t, None, params, mv=mv), x, 3, tile, overlap)
            width = params["head.weight"].shape[0]
            h = _tiled_map(lambda t: T.conv2d(t, *_wb(params, "head"), padding=1), y_c, width,
                           tile, overlap)
            for i in range(N_BLOCKS):
                h = _tiled_block(h, params, i, tile, overlap)
            tail = _tiled_map(lambda t: T.conv2d(t, *_wb(params, "tail"), padding=1), h, 3,
                              tile, overlap)
            out = y_c + tail
    img = np.clip(out[0].transpose(1, 2, 0), 0.0, 1.0)
    return (img, mv.data.reshape(-1)) if return_mv else img


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass(frozen=True)
class ConvSpec:
    """Shape of one convolution layer for MAC accounting."""

    cin: int
    cout: int
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    in_hw: tuple[int, int] | None = field(default=None)
    name: str = ""

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return ((h + 2 * self.padding - self.kernel) // self.stride + 1,
                (w + 2 * self.padding - self.kernel) // self.stride + 1)

    def macs(self, h: int, w: int) -> int:
        ho, wo = self.out_hw(h, w)
        return self.cout * (self.cin // self.groups) * self.kernel * self.kernel * ho * wo


def model_conv_specs(config: ModelConfig, height: int, width: int) -> list[ConvSpec]:
    """Every convolution of the model with the input extent it runs at."""
    c, c2, k, hid, ew = config.width, 2 * config.width, config.k, config.proj_hidden, config.enc_width
    full = (height, width)
    gh, gw = config.guide_size
    specs = [ConvSpec(3, hid, 1, in_hw=full, name="cmod.proj_in.0"),
             ConvSpec(hid, k, 1, in_hw=full, name="cmod.proj_in.1")]
    e0 = ConvSpec(4, ew, 7, stride=2, padding=3, in_hw=(gh, gw), name="cmod.enc.0")
    eh, ewd = e0.out_hw(gh, gw)
    eh, ewd = (eh - 2) // 2 + 1, (ewd - 2) // 2 + 1
    e1 = ConvSpec(ew, ew, 5, stride=2, padding=2, in_hw=(eh, ewd), name="cmod.enc.1")
    specs += [e0, e1, ConvSpec(ew, k, 1, in_hw=(1, 1), name="cmod.enc.2"),
              ConvSpec(k, hid, 1, in_hw=full, name="cmod.proj_out.0"),
              ConvSpec(hid, 3, 1, in_hw=full, name="cmod.proj_out.1"),
              ConvSpec(3, c, 3, padding=1, in_hw=full, name="head")]
    for i in range(N_BLOCKS):
        pre = f"blocks.{i}."
        specs += [ConvSpec(c, c2, 1, in_hw=full, name=pre + "conv_expand"),
                  ConvSpec(c2, c2, 3, padding=1, groups=c2, in_hw=full, name=pre + "conv_dw"),
                  ConvSpec(c2, c // 2, 1, in_hw=(1, 1), name=pre + "ca_reduce"),
                  ConvSpec(c // 2, c2, 1, in_hw=(1, 1), name=pre + "ca_expand"),
                  ConvSpec(c2, c, 1, in_hw=full, name=pre + "conv_project"),
                  ConvSpec(c, c2, 1, in_hw=full, name=pre + "ffn_expand"),
                  ConvSpec(c2, c, 1, in_hw=full, name=pre + "ffn_project")]
    specs.append(ConvSpec(c, 3, 3, padding=1, in_hw=full, name="tail"))
    return specs


def count_params(params: dict[str, Tensor]) -> int:
    return int(sum(t.size for t in params.values()))


def count_macs(layers: ModelConfig | Sequence[ConvSpec], height: int = 448, width: int = 448) -> int:
    """Multiply-accumulates of all convolutions (bias and elementwise work excluded).

    A :class:`ModelConfig` is expanded with :func:`model_conv_specs`. A plain
    sequence of :class:`ConvSpec` is treated as a chain starting at
    ``height x width`` unless a layer pins its own ``in_hw``.
    """
    if isinstance(layers, ModelConfig):
        layers = model_conv_specs(layers, height, width)
    total = 0
    h, w = height, width
    for spec in layers:
        if spec.in_hw is not None:
            h, w = spec.in_hw
        total += spec.macs(h, w)
        h, w = spec.out_hw(h, w)
    return total
