"""Training losses and evaluation metrics.

Image tensors are NCHW (a 3-D CHW input gets a batch axis). The
differentiable pieces are built from engine ops; ``psnr`` and the CIEDE2000
metric are plain NumPy since they are never differentiated.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor

PSNR_CAP = 100.0

# Lindbloom's sRGB (D65) -> XYZ matrix and the D65 reference white
SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
D65_WHITE = np.array([0.95047, 1.0, 1.08883])
_DELTA = 6.0 / 29.0
_LAB_FROM_F = np.array([[0.0, 116.0, 0.0], [500.0, -500.0, 0.0], [0.0, 200.0, -200.0]])
_LAB_OFFSET = np.array([-16.0, 0.0, 0.0])

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


@dataclass
class LossWeights:
    w_mse: float = 1.0
    w_ssim: float = 0.1
    w_grad: float = 0.05
    w_color_final: float = 0.5
    w_color_cmod: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            value = float(getattr(self, f.name))
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {f.name} must be a finite non-negative number, got {value}")
            setattr(self, f.name, value)

    def to_dict(self) -> dict:
        return asdict(self)


def _image(x) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise T.ShapeError(f"expected an image tensor (B, C, H, W), got shape {x.shape}")
    return x


def _same_shape(pred, target, name):
    pred, target = _image(pred), _image(target)
    if pred.shape != target.shape:
        raise T.ShapeError(f"{name}: shape mismatch {pred.shape} vs {target.shape}")
    return pred, T.Tensor(target.data, dtype=pred.dtype) if target.dtype != pred.dtype else target


def _const(array, like: Tensor) -> Tensor:
    return T.Tensor(array, dtype=like.dtype)


def mse_loss(pred, target) -> Tensor:
    pred, target = _same_shape(pred, target, "mse_loss")
    d = pred - target
    return T.reduce_mean(d * d)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalised 1-D Gaussian taps."""
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def _blur(x: Tensor, taps: np.ndarray) -> Tensor:
    # Separable valid-mode Gaussian, one depthwise pass per axis.
    c = x.shape[1]
    k = len(taps)
    wh = _const(np.broadcast_to(taps.reshape(1, 1, 1, k), (c, 1, 1, k)), x)
    wv = _const(np.broadcast_to(taps.reshape(1, 1, k, 1), (c, 1, k, 1)), x)
    return T.conv2d(T.conv2d(x, wh, groups=c), wv, groups=c)


def ssim_map(pred, target, data_range: float = 1.0) -> Tensor:
    pred, target = _same_shape(pred, target, "ssim")
    if min(pred.shape[2:]) < SSIM_WINDOW:
        raise T.ShapeError(f"ssim: image {pred.shape[2]}x{pred.shape[3]} is smaller than the "
                           f"{SSIM_WINDOW}x{SSIM_WINDOW} window")
    taps = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu1 = _blur(pred, taps)
    mu2 = _blur(target, taps)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s1 = _blur(pred * pred, taps) - mu1_sq
    s2 = _blur(target * target, taps) - mu2_sq
    s12 = _blur(pred * target, taps) - mu12
    num = (2.0 * mu12 + c1) * (2.0 * s12 + c2)
    den = (mu1_sq + mu2_sq + c1) * (s1 + s2 + c2)
    return num / den


def ssim(pred, target, data_range: float = 1.0) -> Tensor:
    """Mean local SSIM over all windows and channels."""
    return T.reduce_mean(ssim_map(pred, target, data_range))


def ssim_loss(pred, target) -> Tensor:
    return 1.0 - ssim(pred, target)


def psnr(pred, target, peak: float = 1.0) -> float:
    """PSNR in dB; ``inf`` when the images are identical."""
    a = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    b = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if a.shape != b.shape:
        raise T.ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def cap_psnr(value: float) -> float:
    return min(value, PSNR_CAP)


# --- colour ---------------------------------------------------------------

def _srgb_linearize(c):
    return np.where(c <= 0.04045, c / 12.92, ((np.maximum(c, 0.04045) + 0.055) / 1.055) ** 2.4)


def _srgb_linearize_grad(c):
    return np.where(c <= 0.04045, 1.0 / 12.92,
                    (2.4 / 1.055) * ((np.maximum(c, 0.04045) + 0.055) / 1.055) ** 1.4)


def _lab_f(t):
    return np.where(t > _DELTA ** 3, np.cbrt(np.maximum(t, _DELTA ** 3)), t / (3 * _DELTA ** 2) + 4.0 / 29.0)


def _lab_f_grad(t):
    safe = np.maximum(t, _DELTA ** 3)
    return np.where(t > _DELTA ** 3, 1.0 / (3.0 * np.cbrt(safe) ** 2), 1.0 / (3 * _DELTA ** 2))


def srgb_to_lab(rgb) -> Tensor:
    """Differentiable sRGB -> CIELAB on an NCHW tensor (channel axis 1)."""
    rgb = _image(rgb)
    if rgb.shape[1] != 3:
        raise T.ShapeError(f"srgb_to_lab: channel axis (1) must have 3 entries, got {rgb.shape[1]}")
    lin = T.unary(T.clamp(rgb, 0.0, 1.0), _srgb_linearize, _srgb_linearize_grad)
    to_xyz = (SRGB_TO_XYZ / D65_WHITE[:, None])[:, :, None, None]
    f = T.unary(T.conv2d(lin, _const(to_xyz, rgb)), _lab_f, _lab_f_grad)
    return T.conv2d(f, _const(_LAB_FROM_F[:, :, None, None], rgb), _const(_LAB_OFFSET, rgb))


def rgb_to_lab(rgb, axis: int = -1) -> np.ndarray:
    """NumPy sRGB -> CIELAB (float64) with the colour channels on ``axis``."""
    c = np.moveaxis(np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0), axis, -1)
    xyz = _srgb_linearize(c) @ (SRGB_TO_XYZ / D65_WHITE[:, None]).T
    lab = _lab_f(xyz) @ _LAB_FROM_F.T + _LAB_OFFSET
    return np.moveaxis(lab, -1, axis)


def color_loss(pred, target) -> Tensor:
    """Mean per-pixel CIE76 distance."""
    pred, target = _same_shape(pred, target, "color_loss")
    d = srgb_to_lab(pred) - srgb_to_lab(target)
    return T.reduce_mean(T.sqrt(T.reduce_sum(d * d, axis=1)))


def ciede2000(lab1, lab2) -> np.ndarray:
    """Per-sample CIEDE2000 for Lab arrays of shape (..., 3)."""
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    L1, a1, b1 = np.moveaxis(lab1, -1, 0)
    L2, a2, b2 = np.moveaxis(lab2, -1, 0)

    c_bar = 0.5 * (np.hypot(a1, b1) + np.hypot(a2, b2))
    c7 = c_bar ** 7
    g = 0.5 * (1.0 - np.sqrt(c7 / (c7 + 25.0 ** 7)))
    a1p, a2p = (1.0 + g) * a1, (1.0 + g) * a2
    c1p, c2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0
    # hue is undefined for achromatic samples
    h1p = np.where(c1p == 0, 0.0, h1p)
    h2p = np.where(c2p == 0, 0.0, h2p)

    dL = L2 - L1
    dC = c2p - c1p
    chroma_zero = (c1p * c2p) == 0
    dh = h2p - h1p
    dh = np.where(dh > 180.0, dh - 360.0, dh)
    dh = np.where(dh < -180.0, dh + 360.0, dh)
    dh = np.where(chroma_zero, 0.0, dh)
    dH = 2.0 * np.sqrt(c1p * c2p) * np.sin(np.radians(dh) / 2.0)

    L_bar = 0.5 * (L1 + L2)
    cp_bar = 0.5 * (c1p + c2p)
    h_sum = h1p + h2p
    h_bar = np.where(np.abs(h1p - h2p) > 180.0,
                     np.where(h_sum < 360.0, 0.5 * (h_sum + 360.0), 0.5 * (h_sum - 360.0)),
                     0.5 * h_sum)
    h_bar = np.where(chroma_zero, h_sum, h_bar)

    t = (1.0 - 0.17 * np.cos(np.radians(h_bar - 30.0)) + 0.24 * np.cos(np.radians(2.0 * h_bar))
         + 0.32 * np.cos(np.radians(3.0 * h_bar + 6.0)) - 0.20 * np.cos(np.radians(4.0 * h_bar - 63.0)))
    d_theta = 30.0 * np.exp(-(((h_bar - 275.0) / 25.0) ** 2))
    cp7 = cp_bar ** 7
    r_c = 2.0 * np.sqrt(cp7 / (cp7 + 25.0 ** 7))
    l50 = (L_bar - 50.0) ** 2
    s_l = 1.0 + 0.015 * l50 / np.sqrt(20.0 + l50)
    s_c = 1.0 + 0.045 * cp_bar
    s_h = 1.0 + 0.015 * cp_bar * t
    r_t = -np.sin(np.radians(2.0 * d_theta)) * r_c

    tl, tc, th = dL / s_l, dC / s_c, dH / s_h
    return np.sqrt(tl ** 2 + tc ** 2 + th ** 2 + r_t * tc * th)


def delta_e00(pred, target) -> float:
    """Mean CIEDE2000 between two sRGB images (channel axis -3, values clamped to [0, 1])."""
    a = np.asarray(pred.data if isinstance(pred, Tensor) else pred)
    b = np.asarray(target.data if isinstance(target, Tensor) else target)
    if a.shape != b.shape:
        raise T.ShapeError(f"delta_e00: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 3 or a.shape[-3] != 3:
        raise T.ShapeError(f"delta_e00: expected (..., 3, H, W) images, got {a.shape}")
    lab_a = rgb_to_lab(np.moveaxis(a, -3, -1))
    lab_b = rgb_to_lab(np.moveaxis(b, -3, -1))
    return float(np.mean(ciede2000(lab_a, lab_b)))


def gradient_loss(pred, target) -> Tensor:
    """Sum of the mean absolute differences of horizontal and vertical Sobel responses."""
    pred, target = _same_shape(pred, target, "gradient_loss")
    d = pred - target
    c = d.shape[1]
    total = None
    for kernel in (SOBEL_X, SOBEL_Y):
        w = _const(np.broadcast_to(kernel, (c, 1, 3, 3)), d)
        term = T.reduce_mean(T.absolute(T.conv2d(d, w, groups=c)))
        total = term if total is None else total + term
    return total


def total_loss(y_c, rgb_out, target, weights: LossWeights | None = None) -> tuple[Tensor, dict]:
    """Weighted training objective and a float breakdown of the active terms."""
    weights = weights or LossWeights()
    terms = [
        ("color_cmod", weights.w_color_cmod, lambda: color_loss(y_c, target)),
        ("mse", weights.w_mse, lambda: mse_loss(rgb_out, target)),
        ("ssim", weights.w_ssim, lambda: ssim_loss(rgb_out, target)),
        ("grad", weights.w_grad, lambda: gradient_loss(rgb_out, target)),
        ("color_final", weights.w_color_final, lambda: color_loss(rgb_out, target)),
    ]
    total = None
    breakdown = {}
    for name, w, fn in terms:
        if w == 0.0:
            continue
        value = fn()
        breakdown[name] = value.item()
        weighted = value * w
        total = weighted if total is None else total + weighted
    if total is None:
        total = T.reduce_sum(_image(rgb_out)) * 0.0
    breakdown["total"] = total.item()
    return total, breakdown
