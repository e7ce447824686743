"""DenseMapNet stereo disparity estimation on a NumPy CNN engine."""
from .checkpoint import load_checkpoint, save_checkpoint
from .data import StereoSample, split_filter, synth_generate
from .estimator import DenseMapNetRegressor
from .graph import ModelGraph, build_densemapnet, count_parameters
from .metrics import depth_from_disparity, epe, evaluate
from .ops import OpContext
from .training import TrainConfig, bce_loss, fit, rmsprop_step

__version__ = "0.1.0"

__all__ = [
    "DenseMapNetRegressor", "ModelGraph", "OpContext", "StereoSample", "TrainConfig",
    "bce_loss", "build_densemapnet", "count_parameters", "depth_from_disparity", "epe",
    "evaluate", "fit", "load_checkpoint", "rmsprop_step", "save_checkpoint", "split_filter",
    "synth_generate",
]
