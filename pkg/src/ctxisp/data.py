"""Synthetic RAW/RGB scenes, patch extraction, alignment, manifests and file I/O.

Synthetic scenes carry a single global illuminant, so the colour of a patch
can only be corrected reliably with information from the whole image.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .raw import BayerImage, demosaic_bilinear, demosaic_mosaic, make_guide, pack_rggb, unpack_rggb

# Camera-space -> sRGB; rows sum to one so grey stays grey.
DEFAULT_CCM = ((1.62, -0.42, -0.20), (-0.28, 1.49, -0.21), (0.02, -0.51, 1.49))
GAIN_RANGE = (0.4, 2.5)
MANIFEST_VERSION = 1
GUIDE_MODES = ("full_image", "patch")


# --- file formats ---------------------------------------------------------

def write_pgm(path, plane: np.ndarray, maxval: int = 65535) -> None:
    """Binary (P5) PGM; samples above 255 are stored big-endian 16-bit."""
    plane = np.asarray(plane)
    if plane.ndim != 2:
        raise ValueError(f"PGM needs a 2-D plane, got shape {plane.shape}")
    if plane.min(initial=0) < 0 or plane.max(initial=0) > maxval:
        raise ValueError(f"PGM samples must lie in [0, {maxval}]")
    h, w = plane.shape
    body = plane.astype(">u2" if maxval > 255 else "u1").tobytes()
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(body)


def _pgm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: invalid PGM maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(data) - offset < n:
        raise ValueError(f"{path}: truncated PGM body")
    return np.frombuffer(data, dtype=dtype, count=w * h, offset=offset).reshape(h, w).astype(np.uint16)


def write_png(path, rgb: np.ndarray) -> None:
    """16-bit PNG from a (3, H, W) float image in [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {rgb.shape}")
    q = np.round(np.clip(rgb, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if not cv2.imwrite(str(path), np.ascontiguousarray(q[::-1].transpose(1, 2, 0))):
        raise OSError(f"could not write {path}")


def write_png8(path, rgb_hwc_u8: np.ndarray) -> None:
    if not cv2.imwrite(str(path), np.ascontiguousarray(rgb_hwc_u8[..., ::-1])):
        raise OSError(f"could not write {path}")


def read_png(path) -> np.ndarray:
    """Read an 8- or 16-bit RGB PNG as a (3, H, W) float32 image in [0, 1]."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(f"could not read image {path}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{path}: expected a 3-channel image")
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    return (img[..., ::-1].transpose(2, 0, 1) / scale).astype(np.float32)


# --- synthetic scenes -----------------------------------------------------

@dataclass
class SceneParams:
    """Knobs of the synthetic generator. ``gains=None`` draws a random illuminant."""

    gains: tuple[float, float, float] | None = None
    ccm: tuple | None = DEFAULT_CCM
    gamma: bool = True
    noise: bool = True
    sigma_read: float = 0.003
    shot_gain: float = 1e-4
    black_level: int = 64
    white_level: int = 1023
    n_shapes: int = 14


def srgb_encode(lin: np.ndarray) -> np.ndarray:
    lin = np.clip(lin, 0.0, 1.0)
    return np.where(lin <= 0.0031308, 12.92 * lin, 1.055 * np.power(lin, 1.0 / 2.4) - 0.055)


def oracle_isp(demosaiced: np.ndarray, meta: dict) -> np.ndarray:
    """The ground-truth global ISP: undo gains, apply the CCM, clip, gamma-encode."""
    x = np.asarray(demosaiced, dtype=np.float64)
    gains = np.asarray(meta["gains"], dtype=np.float64)
    x = x / gains[:, None, None]
    if meta.get("ccm") is not None:
        x = np.einsum("ij,jhw->ihw", np.asarray(meta["ccm"], dtype=np.float64), x)
    x = np.clip(x, 0.0, 1.0)
    if meta.get("gamma", True):
        x = srgb_encode(x)
    return x.astype(np.float32)


@dataclass
class ScenePair:
    scene_id: str
    bayer: BayerImage
    rgb: np.ndarray
    meta: dict = field(default_factory=dict)
    _guides: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.rgb.shape != (3, self.bayer.height, self.bayer.width):
            raise ValueError(f"scene {self.scene_id}: RGB {self.rgb.shape} does not match mosaic "
                             f"{self.bayer.height}x{self.bayer.width}")

    def guide(self, size=(128, 128)) -> np.ndarray:
        key = tuple(size)
        if key not in self._guides:
            self._guides[key] = make_guide(pack_rggb(self.bayer), *key)
        return self._guides[key]


@dataclass
class PatchPair:
    scene_id: str
    x: int
    y: int
    bayer: BayerImage
    rgb: np.ndarray
    ncc: float = float("nan")


def _smooth_field(rng, h, w, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="reflect")
    return f / f.std()


def _render_scene(rng: np.random.Generator, h: int, w: int, n_shapes: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = xx / (w - 1), yy / (h - 1)
    corners = rng.uniform(0.05, 1.0, size=(4, 3))
    img = (corners[0][:, None, None] * ((1 - u) * (1 - v))[None]
           + corners[1][:, None, None] * (u * (1 - v))[None]
           + corners[2][:, None, None] * ((1 - u) * v)[None]
           + corners[3][:, None, None] * (u * v)[None])
    for _ in range(n_shapes):
        color = rng.uniform(0.0, 1.0, size=3) ** 1.5 + 0.02
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.04, 0.25) * h, rng.uniform(0.04, 0.25) * w
        kind = rng.integers(3)
        if kind == 0:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        elif kind == 1:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            theta = rng.uniform(0, np.pi)
            d = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
            mask = (np.abs(d) <= 0.15 * rx) & (np.abs(yy - cy) <= 2 * ry)
        # each shape gets its own linear shading ramp
        ramp = 1.0 + 0.3 * rng.uniform(-1, 1) * (u - 0.5) + 0.3 * rng.uniform(-1, 1) * (v - 0.5)
        img = np.where(mask[None], color[:, None, None] * ramp[None], img)
    texture = 1.0 + 0.08 * _smooth_field(rng, h, w, 6.0) + 0.04 * _smooth_field(rng, h, w, 1.0)
    img = img * texture[None]
    return np.clip(img, 0.0, None)


def synth_scene_generate(seed, height: int = 512, width: int = 512, params: SceneParams | None = None,
                         scene_id: str | None = None) -> ScenePair:
    """Render a random scene under a random global illuminant and its target RGB.

    ``seed`` may be an int or a ``np.random.SeedSequence``.
    """
    params = params or SceneParams()
    if height % 2 or width % 2:
        raise ValueError(f"scene dimensions must be even, got {height}x{width}")
    if height < 256 or width < 256:
        raise ValueError(f"scene dimensions must be at least 256, got {height}x{width}")
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.default_rng(seq)

    scene = _render_scene(rng, height, width, params.n_shapes)
    # grey world over the whole scene, then a random exposure
    scene = scene / scene.reshape(3, -1).mean(axis=1)[:, None, None]
    scene = np.clip(scene * rng.uniform(0.18, 0.28), 0.0, 1.0)

    if params.gains is None:
        lo, hi = np.log(GAIN_RANGE[0]), np.log(GAIN_RANGE[1])
        g_r, g_b = np.exp(rng.uniform(lo, hi, size=2))
        gains = (float(g_r), 1.0, float(g_b))
    else:
        gains = tuple(float(g) for g in params.gains)
    lit = scene * np.asarray(gains)[:, None, None]

    masks = np.zeros((3, height, width), dtype=bool)
    masks[0, 0::2, 0::2] = True
    masks[1, 0::2, 1::2] = True
    masks[1, 1::2, 0::2] = True
    masks[2, 1::2, 1::2] = True
    clean = np.clip((lit * masks).sum(axis=0), 0.0, 1.0)
    noisy = clean
    if params.noise:
        std = np.sqrt(params.sigma_read ** 2 + params.shot_gain * clean)
        noisy = np.clip(clean + std * rng.standard_normal(clean.shape), 0.0, 1.0)

    black, white = params.black_level, params.white_level
    span = white - black

    def quantize(m):
        return np.round(black + m * span).astype(np.uint16)

    clean_q, stored = quantize(clean), quantize(noisy)
    meta = {
        "gains": list(gains),
        "ccm": [list(r) for r in params.ccm] if params.ccm is not None else None,
        "gamma": bool(params.gamma),
        "black_level": [black] * 4,
        "white_level": white,
        "noise": bool(params.noise),
        "sigma_read": params.sigma_read,
        "shot_gain": params.shot_gain,
    }
    clean_bayer = BayerImage(clean_q, black, white)
    rgb = oracle_isp(demosaic_bilinear(clean_bayer), meta)
    return ScenePair(scene_id or "scene", BayerImage(stored, black, white), rgb, meta)


def scene_seed(global_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(global_seed), int(index)])


def generate_scenes(n: int, height: int, width: int, seed: int, params: SceneParams | None = None) -> list[ScenePair]:
    return [synth_scene_generate(scene_seed(seed, i), height, width, params, scene_id=f"scene_{i:04d}")
            for i in range(n)]


def extract_patches(scene: ScenePair, size: int = 448, stride: int | None = None) -> list[PatchPair]:
    """Non-overlapping (or strided) grid crops; partial crops at the border are dropped."""
    stride = size if stride is None else stride
    if size % 2 or stride % 2 or size <= 0 or stride <= 0:
        raise ValueError("patch size and stride must be positive and even")
    h, w = scene.bayer.height, scene.bayer.width
    patches = []
    for y in range(0, h - size + 1, stride):
        for x in range(0, w - size + 1, stride):
            patches.append(PatchPair(scene.scene_id, x, y, scene.bayer.crop(y, x, size, size),
                                     scene.rgb[:, y:y + size, x:x + size].copy()))
    return patches


# --- correlation and alignment --------------------------------------------

def luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 3:
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    raise ValueError(f"expected (H, W) or (3, H, W), got {img.shape}")


def _ncc_luma(a, b) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if den == 0.0:
        return 0.0
    return float(np.clip((a * b).sum() / den, -1.0, 1.0))


def ncc(a, b) -> float:
    """Zero-mean normalised cross-correlation of the luma of two images."""
    la, lb = luma(a), luma(b)
    if la.shape != lb.shape:
        raise ValueError(f"ncc: shape mismatch {la.shape} vs {lb.shape}")
    return _ncc_luma(la, lb)


def colour_matched(proxy, target) -> np.ndarray:
    """Least-squares affine colour map of a gamma-encoded linear ``proxy`` onto ``target``.

    Luma correlation between a RAW rendering and a finished RGB is otherwise
    dominated by white balance and colour matrix differences rather than by
    image structure.
    """
    proxy = np.asarray(proxy, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    enc = srgb_encode(proxy / max(float(proxy.max()), 1e-12))
    design = np.concatenate([enc.reshape(3, -1), np.ones((1, enc[0].size))]).T
    coef, *_ = np.linalg.lstsq(design, target.reshape(3, -1).T, rcond=None)
    return (design @ coef).T.reshape(target.shape)


def pair_score(demosaiced, target) -> float:
    """Cross-correlation used to accept a RAW/RGB pair."""
    return ncc(colour_matched(demosaiced, target), target)


def align_translation(proxy, target, max_shift: int = 16) -> tuple[int, int, float]:
    """Integer shift (dx, dy) maximising NCC, with ``target[y, x] ~ proxy[y - dy, x - dx]``."""
    lp, lt = luma(proxy), luma(target)
    if lp.shape != lt.shape:
        raise ValueError(f"align_translation: shape mismatch {lp.shape} vs {lt.shape}")
    h, w = lp.shape
    best = None
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            if abs(dx) >= w or abs(dy) >= h:
                continue
            t = lt[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)]
            p = lp[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
            score = _ncc_luma(t, p)
            key = (-score, abs(dx) + abs(dy), dx, dy)
            if best is None or key < best[0]:
                best = (key, dx, dy, score)
    return best[1], best[2], best[3]


# --- manifest -------------------------------------------------------------

@dataclass
class Manifest:
    root: Path
    scenes: list[dict]
    patches: list[dict]
    info: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> Manifest:
        path = Path(path)
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        if doc.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {doc.get('version')!r}")
        scene_ids = {s["scene_id"] for s in doc["scenes"]}
        for p in doc["patches"]:
            if p["scene_id"] not in scene_ids:
                raise ValueError(f"{path}: patch {p['patch_id']} references unknown scene {p['scene_id']}")
        return cls(path.parent, doc["scenes"], doc["patches"], doc.get("info", {}))

    def to_json(self) -> str:
        doc = {"version": MANIFEST_VERSION, "info": self.info, "scenes": self.scenes, "patches": self.patches}
        return json.dumps(doc, indent=1, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    def scene_split(self, split: str) -> list[dict]:
        return [s for s in self.scenes if s["split"] == split]

    def patch_split(self, split: str) -> list[dict]:
        return [p for p in self.patches if p["split"] == split]

    def load_scene(self, record: dict) -> ScenePair:
        meta = record["meta"]
        plane = read_pgm(self.root / record["raw"])
        bayer = BayerImage(plane, meta["black_level"], meta["white_level"])
        return ScenePair(record["scene_id"], bayer, read_png(self.root / record["rgb"]), meta)


def split_scenes(n: int, split_ratio: float, seed: int) -> list[str]:
    """Split tags per scene index; at least one test scene."""
    if n < 2:
        raise ValueError(f"need at least 2 scenes to split, got {n}")
    if not 0.0 < split_ratio < 1.0:
        raise ValueError(f"split_ratio must lie in (0, 1), got {split_ratio}")
    n_test = min(n - 1, max(1, round(n * (1.0 - split_ratio))))
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5E11])).permutation(n)
    tags = ["train"] * n
    for i in order[:n_test]:
        tags[int(i)] = "test"
    return tags


def build_dataset(scenes: list[ScenePair], out_dir, split_ratio: float = 0.9, ncc_threshold: float = 0.5,
                  patch_size: int = 448, stride: int | None = None, seed: int = 0, align: bool = False,
                  max_shift: int = 16, info: dict | None = None) -> Manifest:
    """Write scenes and filtered patch pairs under ``out_dir`` and return the manifest.

    With ``align`` each target is first registered to the demosaiced RAW by a
    translation search (meant for real captures; synthetic pairs are aligned
    by construction).
    """
    if len(scenes) < 2:
        raise ValueError(f"build_dataset needs at least 2 scenes, got {len(scenes)}")
    out = Path(out_dir)
    try:
        (out / "scenes").mkdir(parents=True, exist_ok=True)
        (out / "patches").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"dataset directory {out} is not writable")

    tags = split_scenes(len(scenes), split_ratio, seed)
    scene_records, patch_records = [], []
    for scene, tag in zip(scenes, tags):
        if align:
            lin = demosaic_bilinear(scene.bayer)
            dx, dy, _ = align_translation(srgb_encode(lin / max(float(lin.max()), 1e-12)), scene.rgb, max_shift)
            scene = _apply_shift(scene, dx, dy)
        raw_rel, rgb_rel = f"scenes/{scene.scene_id}.pgm", f"scenes/{scene.scene_id}.png"
        write_pgm(out / raw_rel, scene.bayer.plane)
        write_png(out / rgb_rel, scene.rgb)
        meta = dict(scene.meta, black_level=list(scene.bayer.black_level), white_level=scene.bayer.white_level)
        (out / f"scenes/{scene.scene_id}.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
        scene_records.append({"scene_id": scene.scene_id, "raw": raw_rel, "rgb": rgb_rel, "split": tag,
                              "height": scene.bayer.height, "width": scene.bayer.width, "meta": meta})
        for patch in extract_patches(scene, patch_size, stride):
            score = pair_score(demosaic_bilinear(patch.bayer), patch.rgb)
            if not score > ncc_threshold:
                continue
            pid = f"{scene.scene_id}_y{patch.y:05d}_x{patch.x:05d}"
            praw, prgb = f"patches/{pid}.pgm", f"patches/{pid}.png"
            write_pgm(out / praw, patch.bayer.plane)
            write_png(out / prgb, patch.rgb)
            patch_records.append({"patch_id": pid, "scene_id": scene.scene_id, "x": patch.x, "y": patch.y,
                                  "size": patch_size, "raw": praw, "rgb": prgb, "ncc": round(score, 6),
                                  "split": tag})
    if not patch_records:
        raise ValueError("no patch pair survived the cross-correlation filter")
    manifest_info = {"seed": seed, "split_ratio": split_ratio, "ncc_threshold": ncc_threshold,
                     "patch_size": patch_size, "stride": stride or patch_size}
    manifest_info.update(info or {})
    manifest = Manifest(out, scene_records, patch_records, manifest_info)
    manifest.save(out / "manifest.json")
    return manifest


def _apply_shift(scene: ScenePair, dx: int, dy: int) -> ScenePair:
    # move the target so that it lines up with the RAW, replicating edges
    if dx == 0 and dy == 0:
        return scene
    h, w = scene.rgb.shape[1:]
    rows = np.clip(np.arange(h) + dy, 0, h - 1)
    cols = np.clip(np.arange(w) + dx, 0, w - 1)
    return ScenePair(scene.scene_id, scene.bayer, scene.rgb[:, rows][:, :, cols], scene.meta)


# --- training view --------------------------------------------------------

@dataclass
class PatchDataset:
    """Model-ready arrays: demosaiced inputs, targets and both kinds of guide."""

    inputs: np.ndarray        # (N, 3, P, P)
    targets: np.ndarray       # (N, 3, P, P)
    full_guides: np.ndarray   # (N, 4, Hg, Wg) from the parent scene
    patch_guides: np.ndarray  # (N, 4, Hg, Wg) from the patch alone
    ids: list[str]
    scene_ids: list[str]

    def __len__(self):
        return len(self.ids)

    def guides(self, mode: str) -> np.ndarray:
        if mode == "full_image":
            return self.full_guides
        if mode == "patch":
            return self.patch_guides
        raise ValueError(f"guide_mode must be one of {GUIDE_MODES}, got {mode!r}")

    def subset(self, index) -> PatchDataset:
        index = list(index)
        return PatchDataset(self.inputs[index], self.targets[index], self.full_guides[index],
                            self.patch_guides[index], [self.ids[i] for i in index],
                            [self.scene_ids[i] for i in index])

    @classmethod
    def from_pairs(cls, pairs: list[tuple[PatchPair, ScenePair]], guide_size=(128, 128)) -> PatchDataset:
        if not pairs:
            raise ValueError("empty patch list")
        inputs, targets, full, local, ids, sids = [], [], [], [], [], []
        for patch, scene in pairs:
            packed = pack_rggb(patch.bayer)
            inputs.append(demosaic_mosaic(unpack_rggb(packed)))
            targets.append(patch.rgb.astype(np.float32))
            full.append(scene.guide(guide_size))
            local.append(make_guide(packed, *guide_size, allow_upscale=True))
            ids.append(f"{patch.scene_id}_y{patch.y:05d}_x{patch.x:05d}")
            sids.append(patch.scene_id)
        return cls(np.stack(inputs), np.stack(targets), np.stack(full), np.stack(local), ids, sids)

    @classmethod
    def from_scenes(cls, scenes: list[ScenePair], patch_size: int, guide_size=(128, 128),
                    stride: int | None = None) -> PatchDataset:
        pairs = [(p, s) for s in scenes for p in extract_patches(s, patch_size, stride)]
        return cls.from_pairs(pairs, guide_size)

    @classmethod
    def from_manifest(cls, manifest: Manifest, split: str, guide_size=(128, 128)) -> PatchDataset:
        records = manifest.patch_split(split)
        if not records:
            raise ValueError(f"manifest has no {split!r} patches")
        scenes = {}
        pairs = []
        for rec in records:
            if rec["scene_id"] not in scenes:
                srec = next(s for s in manifest.scenes if s["scene_id"] == rec["scene_id"])
                scenes[rec["scene_id"]] = manifest.load_scene(srec)
            scene = scenes[rec["scene_id"]]
            bayer = BayerImage(read_pgm(manifest.root / rec["raw"]), scene.bayer.black_level,
                               scene.bayer.white_level)
            pairs.append((PatchPair(rec["scene_id"], rec["x"], rec["y"], bayer,
                                    read_png(manifest.root / rec["rgb"]), rec["ncc"]), scene))
        return cls.from_pairs(pairs, guide_size)


def scene_params_to_dict(params: SceneParams) -> dict:
    return asdict(params)
