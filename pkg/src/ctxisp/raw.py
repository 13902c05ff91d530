"""RGGB mosaic handling: packing, level normalisation, bilinear demosaicing and guide images."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CFA_PATTERN = "RGGB"
# (row, col) offset of each packed channel inside the 2x2 tile: R, G1, G2, B
CFA_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))
DEFAULT_GUIDE_SIZE = (128, 128)


@dataclass
class BayerImage:
    """Single-plane RGGB mosaic of raw sensor counts."""

    plane: np.ndarray
    black_level: tuple[int, int, int, int] = (0, 0, 0, 0)
    white_level: int = 65535
    cfa: str = field(default=CFA_PATTERN)

    def __post_init__(self):
        plane = np.asarray(self.plane)
        if plane.ndim != 2:
            raise ValueError(f"Bayer plane must be 2-D, got shape {plane.shape}")
        h, w = plane.shape
        if h % 2 or w % 2 or h == 0 or w == 0:
            raise ValueError(f"Bayer plane dimensions must be even and positive, got {h}x{w}")
        if self.cfa != CFA_PATTERN:
            raise ValueError(f"only the RGGB layout is supported, got {self.cfa!r}")
        if np.isscalar(self.black_level) or np.ndim(self.black_level) == 0:
            self.black_level = (int(self.black_level),) * 4
        self.black_level = tuple(int(b) for b in self.black_level)
        if len(self.black_level) != 4:
            raise ValueError("black_level needs one value per CFA channel")
        self.white_level = int(self.white_level)
        if max(self.black_level) >= self.white_level:
            raise ValueError("black level must be below the white level")
        if plane.size and (plane.min() < 0 or plane.max() > 65535):
            raise ValueError("Bayer samples must fit in 16 bits")
        self.plane = plane.astype(np.uint16, copy=False)

    @property
    def height(self) -> int:
        return self.plane.shape[0]

    @property
    def width(self) -> int:
        return self.plane.shape[1]

    def crop(self, y: int, x: int, h: int, w: int) -> BayerImage:
        if y % 2 or x % 2:
            raise ValueError("crop offsets must be even to keep the CFA phase")
        return BayerImage(self.plane[y:y + h, x:x + w].copy(), self.black_level, self.white_level)

    def normalized(self) -> np.ndarray:
        """Mosaic as floats in [0, 1] after per-channel black/white level mapping."""
        return unpack_rggb(pack_rggb(self))


def _check_even(h, w):
    if h % 2 or w % 2:
        raise ValueError(f"mosaic dimensions must be even, got {h}x{w}")


def pack_rggb(bayer: BayerImage) -> np.ndarray:
    """Return the (4, H/2, W/2) float32 packing in channel order R, G1, G2, B."""
    _check_even(*bayer.plane.shape)
    plane = bayer.plane.astype(np.float32)
    out = np.empty((4, plane.shape[0] // 2, plane.shape[1] // 2), dtype=np.float32)
    span = float(bayer.white_level)
    for c, (dy, dx) in enumerate(CFA_OFFSETS):
        black = float(bayer.black_level[c])
        out[c] = (plane[dy::2, dx::2] - black) / (span - black)
    np.clip(out, 0.0, 1.0, out=out)
    return out


def unpack_rggb(packed: np.ndarray) -> np.ndarray:
    """Inverse placement of :func:`pack_rggb`: (4, h, w) -> (2h, 2w)."""
    packed = np.asarray(packed)
    if packed.ndim != 3 or packed.shape[0] != 4:
        raise ValueError(f"packed raw must be (4, h, w), got {packed.shape}")
    _, h, w = packed.shape
    mosaic = np.empty((2 * h, 2 * w), dtype=packed.dtype)
    for c, (dy, dx) in enumerate(CFA_OFFSETS):
        mosaic[dy::2, dx::2] = packed[c]
    return mosaic


def cfa_masks(h: int, w: int) -> np.ndarray:
    """Boolean (3, h, w) masks of the R, G and B sample sites."""
    masks = np.zeros((3, h, w), dtype=bool)
    masks[0, 0::2, 0::2] = True
    masks[1, 0::2, 1::2] = True
    masks[1, 1::2, 0::2] = True
    masks[2, 1::2, 1::2] = True
    return masks


def demosaic_mosaic(mosaic: np.ndarray) -> np.ndarray:
    """Bilinear demosaic of a normalised RGGB mosaic, returning (3, H, W).

    Missing samples average the 2 or 4 nearest same-colour neighbours. The
    mosaic is mirror-padded (reflected about the edge sample), which keeps
    the colour phase of the CFA so border pixels never mix in a wrong band.
    """
    mosaic = np.asarray(mosaic, dtype=np.float32)
    h, w = mosaic.shape
    _check_even(h, w)
    p = np.pad(mosaic, 1, mode="reflect")
    c = p[1:-1, 1:-1]
    horiz = 0.5 * (p[1:-1, :-2] + p[1:-1, 2:])
    vert = 0.5 * (p[:-2, 1:-1] + p[2:, 1:-1])
    cross = 0.25 * (p[1:-1, :-2] + p[1:-1, 2:] + p[:-2, 1:-1] + p[2:, 1:-1])
    diag = 0.25 * (p[:-2, :-2] + p[:-2, 2:] + p[2:, :-2] + p[2:, 2:])

    rgb = np.empty((3, h, w), dtype=np.float32)
    r, g, b = rgb
    # R sites (even, even)
    r[0::2, 0::2] = c[0::2, 0::2]
    g[0::2, 0::2] = cross[0::2, 0::2]
    b[0::2, 0::2] = diag[0::2, 0::2]
    # G sites on red rows (even, odd)
    r[0::2, 1::2] = horiz[0::2, 1::2]
    g[0::2, 1::2] = c[0::2, 1::2]
    b[0::2, 1::2] = vert[0::2, 1::2]
    # G sites on blue rows (odd, even)
    r[1::2, 0::2] = vert[1::2, 0::2]
    g[1::2, 0::2] = c[1::2, 0::2]
    b[1::2, 0::2] = horiz[1::2, 0::2]
    # B sites (odd, odd)
    r[1::2, 1::2] = diag[1::2, 1::2]
    g[1::2, 1::2] = cross[1::2, 1::2]
    b[1::2, 1::2] = c[1::2, 1::2]
    return rgb


def demosaic_bilinear(bayer: BayerImage) -> np.ndarray:
    return demosaic_mosaic(bayer.normalized())


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix of box-filter overlap weights."""
    scale = n_in / n_out
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        lo, hi = o * scale, (o + 1) * scale
        first, last = int(np.floor(lo)), int(np.ceil(hi))
        for i in range(first, min(last, n_in)):
            mat[o, i] = min(hi, i + 1) - max(lo, i)
    mat /= scale
    return mat


def resize_area(planes: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-average resize of each (..., h, w) plane independently.

    Every output pixel is the mean of the input area it covers, so upscaling
    degenerates to box replication.
    """
    h, w = planes.shape[-2:]
    if out_h < 1 or out_w < 1:
        raise ValueError(f"invalid output size {out_h}x{out_w}")
    rows = _area_matrix(h, out_h)
    cols = _area_matrix(w, out_w)
    out = rows @ planes.astype(np.float64) @ cols.T
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_guide(packed: np.ndarray, height: int = DEFAULT_GUIDE_SIZE[0],
               width: int = DEFAULT_GUIDE_SIZE[1], allow_upscale: bool = False) -> np.ndarray:
    """Downscale every band of a packed raw separately to (4, height, width).

    Guides are meant to summarise a larger image, so asking for more pixels
    than the source has is an error unless ``allow_upscale`` is set (patch
    guides of small training crops use it).
    """
    packed = np.asarray(packed)
    if packed.ndim != 3 or packed.shape[0] != 4:
        raise ValueError(f"guide source must be a (4, h, w) packed raw, got {packed.shape}")
    if not allow_upscale and (height > packed.shape[1] or width > packed.shape[2]):
        raise ValueError(f"guide {height}x{width} would upscale the {packed.shape[1]}x{packed.shape[2]} packed raw")
    return resize_area(packed, height, width)
