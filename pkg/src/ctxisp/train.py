"""Adam training loop, evaluation and checkpoint serialisation."""

from __future__ import annotations

import json
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import losses as L
from . import tensor as T
from .data import GUIDE_MODES, PatchDataset
from .network import ModelConfig, infer_config, init_params, isp_forward_patch
from .tensor import Tensor

CHECKPOINT_MAGIC = b"CTXISP01"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("epoch", "step", "lr", "total", "color_cmod", "mse", "ssim", "grad", "color_final", "grad_norm")


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    decay_factor: float = 0.5
    decay_every_epochs: int = 40
    epochs: int = 30
    batch_size: int = 4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    guide_mode: str = "full_image"
    eval_every: int = 0
    max_steps: int | None = None
    grad_clip: float | None = None
    freeze: tuple[str, ...] = ()

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        self.betas = tuple(float(b) for b in self.betas)
        self.freeze = tuple(self.freeze)
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.guide_mode not in GUIDE_MODES:
            raise ValueError(f"guide_mode must be one of {GUIDE_MODES}, got {self.guide_mode!r}")
        if self.decay_every_epochs < 1 or not 0 < self.decay_factor <= 1:
            raise ValueError("decay_every_epochs must be >= 1 and decay_factor in (0, 1]")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError(f"betas must be two numbers in [0, 1), got {self.betas}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive when set")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["freeze"] = list(self.freeze)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Step decay: ``lr * decay_factor ** floor(epoch / decay_every_epochs)``."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return config.lr * config.decay_factor ** (epoch // config.decay_every_epochs)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], moments: dict[str, np.ndarray],
              step: int, lr_t: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place. ``moments`` holds ``m.<name>``/``v.<name>``."""
    if step < 1:
        raise ValueError(f"Adam step counter starts at 1, got {step}")
    b1, b2 = betas
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r} at step {step}")
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, g in grads.items():
        p = params[name].data
        m = moments.setdefault("m." + name, np.zeros_like(p))
        v = moments.setdefault("v." + name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr_t * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainState:
    params: dict[str, Tensor]
    model_config: ModelConfig
    config: TrainConfig
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    cursor: int = 0
    perm: np.ndarray | None = None
    rng: np.random.Generator | None = None

    @classmethod
    def create(cls, config: TrainConfig, model_config: ModelConfig | None = None,
               params: dict[str, Tensor] | None = None) -> TrainState:
        model_config = model_config or ModelConfig()
        params = params if params is not None else init_params(model_config, seed=config.seed)
        state = cls(params, model_config, config, rng=np.random.default_rng(np.random.SeedSequence([config.seed, 1])))
        state.apply_freeze()
        return state

    def trainable(self) -> list[str]:
        return [n for n in self.params if not n.startswith(self.config.freeze)] if self.config.freeze \
            else list(self.params)

    def apply_freeze(self):
        live = set(self.trainable())
        for name, p in self.params.items():
            p.requires_grad = name in live
            p.grad = np.zeros_like(p.data) if p.requires_grad else None


def _batch(dataset: PatchDataset, index, guide_mode: str, dtype=np.float32):
    return (Tensor(dataset.inputs[index], dtype=dtype), Tensor(dataset.guides(guide_mode)[index], dtype=dtype),
            Tensor(dataset.targets[index], dtype=dtype))


def train_step(state: TrainState, x: Tensor, guide: Tensor, target: Tensor, lr_t: float) -> dict:
    """One forward/backward/Adam update; returns the loss breakdown and gradient norm."""
    cfg = state.config
    names = state.trainable()
    for n in names:
        state.params[n].zero_grad()
    y_c, rgb = isp_forward_patch(x, guide, state.params)
    loss, terms = L.total_loss(y_c, rgb, target, cfg.weights)
    if not math.isfinite(terms["total"]):
        T.current_tape().clear()
        raise FloatingPointError(f"non-finite loss at step {state.step + 1}")
    T.backward(loss)
    grads = {n: state.params[n].grad for n in names}
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if cfg.grad_clip is not None and norm > cfg.grad_clip:
        scale = cfg.grad_clip / norm
        grads = {n: g * np.float32(scale) for n, g in grads.items()}
    state.step += 1
    adam_step(state.params, grads, state.moments, state.step, lr_t, cfg.betas, cfg.adam_eps)
    terms["grad_norm"] = norm
    return terms


def train_epoch(state: TrainState, dataset: PatchDataset, max_steps: int | None = None, log=None) -> dict:
    """Continue the current epoch from its cursor; stops early once ``max_steps`` is reached."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    cfg = state.config
    if state.perm is None:
        state.perm = state.rng.permutation(len(dataset))
        state.cursor = 0
    lr_t = lr_schedule(state.epoch, cfg)
    t0 = time.perf_counter()
    sums: dict[str, float] = {}
    n = 0
    while state.cursor < len(state.perm):
        if max_steps is not None and state.step >= max_steps:
            break
        index = np.sort(state.perm[state.cursor:state.cursor + cfg.batch_size])
        try:
            terms = train_step(state, *_batch(dataset, index, cfg.guide_mode), lr_t)
        except FloatingPointError as exc:
            raise FloatingPointError(f"{exc} (epoch {state.epoch}, batch {state.cursor // cfg.batch_size})") from exc
        state.cursor += cfg.batch_size
        n += 1
        for k, v in terms.items():
            sums[k] = sums.get(k, 0.0) + v
        if log is not None:
            log.write(state.epoch, state.step, lr_t, terms)
    if state.cursor >= len(state.perm):
        state.epoch += 1
        state.perm = None
        state.cursor = 0
    stats = {k: v / n for k, v in sums.items()} if n else {}
    stats.update(steps=n, seconds=time.perf_counter() - t0, lr=lr_t)
    return stats


def train(state: TrainState, dataset: PatchDataset, steps: int | None = None, epochs: int | None = None,
          log=None, on_epoch=None) -> TrainState:
    """Run until ``steps`` total optimiser steps or ``epochs`` total epochs (config values by default)."""
    cfg = state.config
    steps = cfg.max_steps if steps is None else steps
    epochs = cfg.epochs if epochs is None and steps is None else epochs
    while True:
        if steps is not None and state.step >= steps:
            break
        if epochs is not None and state.epoch >= epochs:
            break
        stats = train_epoch(state, dataset, max_steps=steps, log=log)
        if on_epoch is not None and state.cursor == 0:
            on_epoch(state, stats)
    return state


# --- evaluation -----------------------------------------------------------

def evaluate(params: dict[str, Tensor], dataset: PatchDataset, guide_mode: str = "full_image",
             batch_size: int = 4) -> tuple[list[dict], dict]:
    """Per-image PSNR/SSIM/CIEDE2000 on clamped outputs, plus their means.

    PSNR of identical images is ``inf`` in the rows and capped for the means.
    """
    rows = []
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            index = np.arange(start, min(start + batch_size, len(dataset)))
            x, guide, _ = _batch(dataset, index, guide_mode)
            _, rgb = isp_forward_patch(x, guide, params)
            out = np.clip(rgb.data, 0.0, 1.0).astype(np.float64)
            for j, i in enumerate(index):
                target = dataset.targets[i].astype(np.float64)
                rows.append({
                    "image_id": dataset.ids[i],
                    "psnr": L.psnr(out[j], target),
                    "ssim": L.ssim(Tensor(out[j], dtype=np.float64), Tensor(target, dtype=np.float64)).item(),
                    "de00": L.delta_e00(out[j], target),
                })
    return rows, summarize(rows)


def summarize(rows: list[dict]) -> dict:
    if not rows:
        return {"psnr": float("nan"), "ssim": float("nan"), "de00": float("nan"), "count": 0}
    return {
        "psnr": float(np.mean([L.cap_psnr(r["psnr"]) for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
        "de00": float(np.mean([r["de00"] for r in rows])),
        "count": len(rows),
    }


def format_metrics_table(rows: list[dict], means: dict | None = None) -> str:
    lines = ["image_id\tpsnr\tssim\tde00"]
    for r in rows:
        lines.append(f"{r['image_id']}\t{L.cap_psnr(r['psnr']):.4f}\t{r['ssim']:.6f}\t{r['de00']:.4f}")
    if means is not None:
        lines.append(f"mean\t{means['psnr']:.4f}\t{means['ssim']:.6f}\t{means['de00']:.4f}")
    return "\n".join(lines) + "\n"


class TrainingLog:
    """Append-only tab-delimited log, one line per optimiser step."""

    def __init__(self, path, every: int = 1):
        self.path = Path(path)
        self.every = max(1, int(every))
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.write_text("\t".join(LOG_COLUMNS) + "\n")

    def write(self, epoch: int, step: int, lr: float, terms: dict) -> None:
        if step % self.every:
            return
        values = [str(epoch), str(step), f"{lr:.6g}"]
        for col in LOG_COLUMNS[3:]:
            v = terms.get(col)
            values.append("-" if v is None else f"{v:.6g}")
        with open(self.path, "a") as f:
            f.write("\t".join(values) + "\n")


# --- checkpoints ----------------------------------------------------------

def _pack_entry(name: str, array: np.ndarray) -> bytes:
    raw_name = name.encode("utf-8")
    data = np.ascontiguousarray(array, dtype="<f4")
    head = struct.pack("<I", len(raw_name)) + raw_name + struct.pack("<I", data.ndim)
    head += struct.pack(f"<{data.ndim}I", *data.shape)
    return head + data.tobytes()


def checkpoint_bytes(state: TrainState) -> bytes:
    entries = [(n, p.data) for n, p in state.params.items()]
    for kind in ("m", "v"):
        entries += [(f"adam.{kind}.{n}", state.moments[f"{kind}.{n}"]) for n in state.params
                    if f"{kind}.{n}" in state.moments]
    meta = {
        "epoch": state.epoch,
        "step": state.step,
        "cursor": state.cursor,
        "perm": None if state.perm is None else [int(i) for i in state.perm],
        "rng": state.rng.bit_generator.state if state.rng is not None else None,
        "model_config": state.model_config.to_dict(),
        "train_config": state.config.to_dict(),
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(entries))]
    parts += [_pack_entry(n, a) for n, a in entries]
    parts += [struct.pack("<I", len(meta_bytes)), meta_bytes]
    return b"".join(parts)


def save_checkpoint(path, state: TrainState) -> None:
    """Write atomically: a partial file never replaces a good one."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def parse_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(buf)
    magic = r.take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, not a checkpoint")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    count = r.u32("entry count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = r.u32(f"entry {i} name length")
        try:
            name = r.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"entry {i} has an invalid name") from exc
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        rank = r.u32(f"{name} rank")
        if rank > 8:
            raise CheckpointError(f"{name}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} dims"))
        n = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * n, f"{name} data"), dtype="<f4").reshape(dims).astype(np.float32)
    meta_len = r.u32("metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint metadata") from exc
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} unexpected trailing bytes")
    return tensors, meta


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    tensors, meta = parse_checkpoint(buf)
    try:
        config = TrainConfig.from_dict(meta["train_config"])
        model_config = ModelConfig.from_dict(meta["model_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid configuration in checkpoint: {exc}") from exc
    params, moments = {}, {}
    for name, arr in tensors.items():
        if name.startswith("adam.m.") or name.startswith("adam.v."):
            moments[name[5:]] = arr.copy()
        else:
            params[name] = Tensor(arr, requires_grad=True)
    expected = set(init_params(model_config, seed=0))
    if set(params) != expected:
        missing, extra = sorted(expected - set(params)), sorted(set(params) - expected)
        raise CheckpointError(f"parameter table does not match the model (missing {missing[:3]}, extra {extra[:3]})")
    rng = None
    if meta.get("rng") is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
    perm = None if meta.get("perm") is None else np.asarray(meta["perm"], dtype=np.int64)
    state = TrainState(params, model_config, config, moments, int(meta["step"]), int(meta["epoch"]),
                       int(meta["cursor"]), perm, rng)
    state.apply_freeze()
    return state


def load_params(path) -> tuple[dict[str, Tensor], ModelConfig]:
    state = load_checkpoint(path)
    for p in state.params.values():
        p.requires_grad = False
        p.grad = None
    return state.params, state.model_config


def params_from_arrays(arrays: dict[str, np.ndarray], guide_size=(128, 128)) -> tuple[dict[str, Tensor], ModelConfig]:
    params = {n: Tensor(a) for n, a in arrays.items()}
    return params, infer_config(params, guide_size)
