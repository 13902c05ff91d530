"""Learned RAW-to-RGB ISP with a global colour module guided by the full RAW image."""

from .data import Manifest, PatchDataset, ScenePair, SceneParams, build_dataset, synth_scene_generate
from .losses import LossWeights, total_loss
from .network import ModelConfig, init_params, isp_forward_fullres, isp_forward_patch
from .raw import BayerImage, demosaic_bilinear, make_guide, pack_rggb, unpack_rggb
from .tensor import Tensor, grad_check
from .train import TrainConfig, TrainState, evaluate, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BayerImage", "LossWeights", "Manifest", "ModelConfig", "PatchDataset", "ScenePair", "SceneParams", "Tensor",
    "TrainConfig", "TrainState", "build_dataset", "demosaic_bilinear", "evaluate", "grad_check", "init_params",
    "isp_forward_fullres", "isp_forward_patch", "load_checkpoint", "make_guide", "pack_rggb", "save_checkpoint",
    "synth_scene_generate", "total_loss", "unpack_rggb",
]
