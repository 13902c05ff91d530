"""scikit-learn style wrapper around training and patch inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import losses as L
from .data import GUIDE_MODES, PatchDataset
from .losses import LossWeights
from .network import ModelConfig, isp_forward_patch
from .tensor import Tensor, no_grad
from .train import TrainConfig, TrainState, train
from .validation import check_guides, check_images, check_pair, patch_guides


class SimpleISP(BaseEstimator):
    """RAW-to-RGB network with a guided colour module.

    ``X`` holds bilinear-demosaiced patches (N, 3, H, W) and ``y`` the target
    RGB patches. Guides (N, 4, gh, gw) may be passed to ``fit``/``predict``;
    without them each patch guides itself. A :class:`PatchDataset` can be
    given as ``X`` instead, in which case ``guide_mode`` selects its guides.
    """

    def __init__(self, steps: int = 1000, lr: float = 1e-4, batch_size: int = 4, guide_mode: str = "full_image",
                 guide_size: tuple[int, int] = (128, 128), width: int = 32, k: int = 64, seed: int = 0,
                 w_mse: float = 1.0, w_ssim: float = 0.1, w_grad: float = 0.05, w_color_final: float = 0.5,
                 w_color_cmod: float = 1.0):
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.guide_mode = guide_mode
        self.guide_size = guide_size
        self.width = width
        self.k = k
        self.seed = seed
        self.w_mse = w_mse
        self.w_ssim = w_ssim
        self.w_grad = w_grad
        self.w_color_final = w_color_final
        self.w_color_cmod = w_color_cmod

    def _dataset(self, X, y=None, guides=None) -> PatchDataset:
        if isinstance(X, PatchDataset):
            return X
        if y is None:
            x = check_images(X)
            y = np.zeros_like(x)
        else:
            x, y = check_pair(X, y)
        size = tuple(self.guide_size)
        local = patch_guides(x, size)
        full = local if guides is None else check_guides(guides, len(x), size)
        ids = [str(i) for i in range(len(x))]
        return PatchDataset(x, y, full, local, ids, ids)

    def fit(self, X, y=None, guides=None):
        if self.guide_mode not in GUIDE_MODES:
            raise ValueError(f"guide_mode must be one of {GUIDE_MODES}, got {self.guide_mode!r}")
        if not isinstance(X, PatchDataset) and y is None:
            raise ValueError("y is required unless X is a PatchDataset")
        dataset = self._dataset(X, y, guides)
        weights = LossWeights(self.w_mse, self.w_ssim, self.w_grad, self.w_color_final, self.w_color_cmod)
        config = TrainConfig(lr=self.lr, batch_size=self.batch_size, seed=self.seed, weights=weights,
                             guide_mode=self.guide_mode, max_steps=self.steps)
        model_config = ModelConfig(width=self.width, k=self.k, guide_size=tuple(self.guide_size))
        state = TrainState.create(config, model_config)
        train(state, dataset, steps=self.steps)
        self.params_ = state.params
        self.n_steps_ = state.step
        self.model_config_ = model_config
        return self

    def predict(self, X, guides=None, batch_size: int = 4) -> np.ndarray:
        """RGB patches in [0, 1] with the same layout as ``X``."""
        check_is_fitted(self, "params_")
        dataset = self._dataset(X, None, guides)
        g = dataset.guides(self.guide_mode if isinstance(X, PatchDataset) else "full_image")
        out = np.empty_like(dataset.inputs)
        with no_grad():
            for s in range(0, len(dataset), batch_size):
                _, rgb = isp_forward_patch(Tensor(dataset.inputs[s:s + batch_size]),
                                           Tensor(g[s:s + batch_size]), self.params_)
                out[s:s + batch_size] = np.clip(rgb.data, 0.0, 1.0)
        return out

    def score(self, X, y=None, guides=None) -> float:
        """Mean PSNR (capped) against ``y`` or the dataset targets."""
        target = X.targets if isinstance(X, PatchDataset) else check_images(y, "y")
        pred = self.predict(X, guides)
        return float(np.mean([L.cap_psnr(L.psnr(p, t)) for p, t in zip(pred, target)]))
