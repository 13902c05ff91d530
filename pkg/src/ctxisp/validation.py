"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np

from .raw import CFA_OFFSETS, make_guide


def check_images(x, name: str = "X", channels: int = 3) -> np.ndarray:
    """Return ``x`` as a float32 (N, C, H, W) array, adding a batch axis to a single image."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != channels:
        raise ValueError(f"{name} must have shape (N, {channels}, H, W), got {np.shape(x)}")
    if arr.shape[0] == 0 or min(arr.shape[2:]) < 1:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = check_images(x, "X"), check_images(y, "y")
    if x.shape != y.shape:
        raise ValueError(f"X and y shapes differ: {x.shape} vs {y.shape}")
    return x, y


def check_guides(guides, n: int, guide_size: tuple[int, int]) -> np.ndarray:
    g = check_images(guides, "guides", channels=4)
    if g.shape[0] != n:
        raise ValueError(f"expected {n} guides, got {g.shape[0]}")
    if tuple(g.shape[2:]) != tuple(guide_size):
        raise ValueError(f"guides must be {guide_size[0]}x{guide_size[1]}, got {g.shape[2]}x{g.shape[3]}")
    return g


def remosaic_packed(demosaiced: np.ndarray) -> np.ndarray:
    """Packed (N, 4, H/2, W/2) raw recovered from bilinear-demosaiced images.

    Bilinear demosaicing keeps the measured sample at every CFA site, so the
    packed raw can be read straight back.
    """
    x = np.asarray(demosaiced)
    if x.shape[-2] % 2 or x.shape[-1] % 2:
        raise ValueError("images must have even height and width")
    channel = (0, 1, 1, 2)
    return np.stack([x[:, c, dy::2, dx::2] for c, (dy, dx) in zip(channel, CFA_OFFSETS)], axis=1)


def patch_guides(demosaiced: np.ndarray, guide_size: tuple[int, int]) -> np.ndarray:
    packed = remosaic_packed(demosaiced)
    return np.stack([make_guide(p, *guide_size, allow_upscale=True) for p in packed]).astype(np.float32)
