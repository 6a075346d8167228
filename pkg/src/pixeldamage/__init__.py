"""Multiscale pixel-wise damage detection in plain numpy.

A shared convolutional trunk runs on three Gaussian-pyramid scales; the
upsampled features feed a per-pixel dense head.  Two networks are trained
separately, a binary segmenter and a 7-class classifier, and their softmax
maps are fused into one damage mask.
"""

from .architectures import Network, count_parameters, network_spec
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import DataError, Sample, generate_synthetic, load_dataset
from .fusion import FusionConfig, evaluate, fuse
from .tensor import NumericError, RngState, ShapeError
from .training import Schedule, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Network", "count_parameters", "network_spec", "CheckpointError", "load_checkpoint",
    "save_checkpoint", "ConfigError", "RunConfig", "DataError", "Sample", "generate_synthetic",
    "load_dataset", "FusionConfig", "evaluate", "fuse", "NumericError", "RngState", "ShapeError",
    "Schedule", "TrainConfig", "train",
]
