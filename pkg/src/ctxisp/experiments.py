"""Small reproducible experiments on synthetic data: guide ablation, colour-module fit, overfitting."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import losses as L
from . import tensor as T
from .network import ModelConfig, isp_forward_patch
from .train import TrainConfig, TrainState, evaluate, train


@dataclass
class AblationConfig:
    scenes: int = 32
    size: int = 512
    patch_size: int = 128
    guide_size: tuple[int, int] = (64, 64)
    steps: int = 2000
    batch_size: int = 1
    lr: float = 5e-4
    data_seed: int = 0
    split_ratio: float = 0.9
    scene_params: D.SceneParams = field(default_factory=D.SceneParams)


def ablation_datasets(cfg: AblationConfig) -> tuple[D.PatchDataset, D.PatchDataset]:
    scenes = D.generate_scenes(cfg.scenes, cfg.size, cfg.size, cfg.data_seed, cfg.scene_params)
    tags = D.split_scenes(len(scenes), cfg.split_ratio, cfg.data_seed)
    train_scenes = [s for s, t in zip(scenes, tags) if t == "train"]
    test_scenes = [s for s, t in zip(scenes, tags) if t == "test"]
    return (D.PatchDataset.from_scenes(train_scenes, cfg.patch_size, cfg.guide_size),
            D.PatchDataset.from_scenes(test_scenes, cfg.patch_size, cfg.guide_size))


def train_and_evaluate(train_set: D.PatchDataset, test_set: D.PatchDataset, guide_mode: str, seed: int,
                       cfg: AblationConfig, log=None) -> dict:
    """Train one model and score it on the test patches with its own kind of guide."""
    tcfg = TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, seed=seed, guide_mode=guide_mode,
                       max_steps=cfg.steps)
    state = TrainState.create(tcfg, ModelConfig(guide_size=tuple(cfg.guide_size)))
    t0 = time.perf_counter()
    train(state, train_set, steps=cfg.steps, log=log)
    _, means = evaluate(state.params, test_set, guide_mode=guide_mode)
    means["seconds"] = time.perf_counter() - t0
    return means


def run_ablation(seeds=(0, 1, 2), cfg: AblationConfig | None = None, required: int | None = None,
                 report=None) -> list[dict]:
    """Full-image versus patch guide, one pair of runs per seed.

    With ``required`` set, stops as soon as that many seeds passed or can no
    longer pass (the verdict cannot change after that point).
    """
    cfg = cfg or AblationConfig()
    train_set, test_set = ablation_datasets(cfg)
    results = []
    for i, seed in enumerate(seeds):
        full = train_and_evaluate(train_set, test_set, "full_image", seed, cfg)
        patch = train_and_evaluate(train_set, test_set, "patch", seed, cfg)
        row = {"seed": seed, "full": full, "patch": patch,
               "psnr_gain": full["psnr"] - patch["psnr"], "de00_drop": patch["de00"] - full["de00"]}
        results.append(row)
        if report is not None:
            report(row)
        if required is not None:
            passed = sum(ablation_passes(r) for r in results)
            remaining = len(seeds) - i - 1
            if passed >= required or passed + remaining < required:
                break
    return results


def ablation_passes(row: dict, min_psnr_gain: float = 1.0, min_de00_drop: float = 1.0) -> bool:
    return row["psnr_gain"] >= min_psnr_gain and row["de00_drop"] >= min_de00_drop


def white_balance_scenes(n: int, size: int, seed: int) -> list[D.ScenePair]:
    """Scenes whose only colour transform is the illuminant (no CCM, no gamma, no noise)."""
    params = D.SceneParams(ccm=None, gamma=False, noise=False)
    return D.generate_scenes(n, size, size, seed, params)


def mean_delta_e76(pred: np.ndarray, target: np.ndarray) -> float:
    d = L.rgb_to_lab(pred, axis=-3) - L.rgb_to_lab(target, axis=-3)
    return float(np.mean(np.sqrt((d * d).sum(axis=-3))))


@dataclass
class CmodFitConfig:
    train_scenes: int = 96
    test_scenes: int = 8
    size: int = 256
    patch_size: int = 64
    guide_size: tuple[int, int] = (32, 32)
    steps: int = 1000
    batch_size: int = 8
    lr: float = 3e-3
    decay_factor: float = 0.5
    decay_every_epochs: int = 2
    seed: int = 0


def fit_cmod_only(cfg: CmodFitConfig | None = None, log=None) -> dict:
    """Train only the colour module on white-balance scenes, with the reconstruction held at identity.

    A zero tail makes ``reconstruct`` the identity map; head, blocks and tail
    are then frozen so the colour module is the only thing that learns.
    Returns the held-out mean CIE76 error before and after training.
    """
    cfg = cfg or CmodFitConfig()
    scenes = white_balance_scenes(cfg.train_scenes + cfg.test_scenes, cfg.size, cfg.seed)
    train_set = D.PatchDataset.from_scenes(scenes[:cfg.train_scenes], cfg.patch_size, cfg.guide_size)
    test_set = D.PatchDataset.from_scenes(scenes[cfg.train_scenes:], cfg.patch_size, cfg.guide_size)
    mcfg = ModelConfig(guide_size=tuple(cfg.guide_size))
    weights = L.LossWeights(w_mse=1.0, w_ssim=0.0, w_grad=0.0, w_color_final=0.0, w_color_cmod=1.0)
    tcfg = TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed, weights=weights,
                       decay_factor=cfg.decay_factor, decay_every_epochs=cfg.decay_every_epochs,
                       max_steps=cfg.steps, freeze=("head", "blocks", "tail"))
    state = TrainState.create(tcfg, mcfg)
    state.params["tail.weight"].data[:] = 0.0
    state.params["tail.bias"].data[:] = 0.0

    def held_out_error():
        out = predict(state.params, test_set, "full_image")
        return mean_delta_e76(out, test_set.targets)

    before = held_out_error()
    t0 = time.perf_counter()
    train(state, train_set, steps=cfg.steps, log=log)
    return {"de76_before": before, "de76": held_out_error(), "steps": state.step,
            "seconds": time.perf_counter() - t0, "params": state.params}


def predict(params, dataset: D.PatchDataset, guide_mode: str = "full_image", batch_size: int = 8) -> np.ndarray:
    out = np.empty_like(dataset.inputs)
    guides = dataset.guides(guide_mode)
    with T.no_grad():
        for s in range(0, len(dataset), batch_size):
            _, rgb = isp_forward_patch(T.Tensor(dataset.inputs[s:s + batch_size]),
                                       T.Tensor(guides[s:s + batch_size]), params)
            out[s:s + batch_size] = np.clip(rgb.data, 0.0, 1.0)
    return out


@dataclass
class OverfitConfig:
    patches: int = 8
    patch_size: int = 64
    guide_size: tuple[int, int] = (32, 32)
    steps: int = 2000
    lr: float = 1e-4
    batch_size: int = 4
    probe_every: int = 20
    probe_until: int = 200
    seed: int = 0
    scene_params: D.SceneParams = field(default_factory=D.SceneParams)
    # PSNR is a function of MSE alone, so that is what the fit optimises
    weights: L.LossWeights = field(default_factory=lambda: L.LossWeights(
        w_mse=1.0, w_ssim=0.0, w_grad=0.0, w_color_final=0.0, w_color_cmod=0.0))


def overfit(cfg: OverfitConfig | None = None, log=None) -> dict:
    """Fit the full model to a handful of fixed patches and track training PSNR.

    ``curve`` holds (step, mean training PSNR) every ``probe_every`` steps up
    to ``probe_until``; ``psnr`` is the value after ``steps`` steps. The
    learning rate stays constant: an epoch here is one or two steps, so the
    epoch-based decay would halve it every few dozen steps.
    """
    cfg = cfg or OverfitConfig()
    scenes = D.generate_scenes(2, 256, 256, cfg.seed, cfg.scene_params)
    pool = D.PatchDataset.from_scenes(scenes, cfg.patch_size, cfg.guide_size)
    pick = np.random.default_rng(cfg.seed).choice(len(pool), size=cfg.patches, replace=False)
    dataset = pool.subset(sorted(int(i) for i in pick))
    tcfg = TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed, max_steps=cfg.steps,
                       decay_factor=1.0, weights=cfg.weights)
    state = TrainState.create(tcfg, ModelConfig(guide_size=tuple(cfg.guide_size)))

    def train_psnr():
        return evaluate(state.params, dataset)[1]["psnr"]

    curve = [(0, train_psnr())]
    t0 = time.perf_counter()
    while state.step < cfg.probe_until:
        train(state, dataset, steps=state.step + cfg.probe_every, log=log)
        curve.append((state.step, train_psnr()))
    train(state, dataset, steps=cfg.steps, log=log)
    return {"psnr": train_psnr(), "curve": curve, "steps": state.step, "seconds": time.perf_counter() - t0}
