"""Frequency-aware two-branch pansharpening in numpy.

Submodules: ``tensor`` (autodiff), ``wavelet``, ``model``, ``losses``,
``data``, ``metrics``, ``train``, ``gradcheck`` and ``cli``.
"""

from .data import DatasetConfig, Image, degrade_wald, load_manifest, prepare_dataset, read_image, synthetic_pairs, write_image
from .errors import FafnetError
from .losses import HfsConfig, total_loss
from .metrics import MetricsReport, ergas, q2n, qnr_suite, sam, scc
from .model import ModelConfig, fafnet_forward, init_fafnet, load_checkpoint, save_checkpoint
from .train import TrainConfig, evaluate, fuse, train, train_manifest
from .wavelet import dwt2, haar_bank, idwt2

__version__ = "0.1.0"

__all__ = [
    "DatasetConfig", "FafnetError", "HfsConfig", "Image", "MetricsReport", "ModelConfig", "TrainConfig",
    "degrade_wald", "dwt2", "ergas", "evaluate", "fafnet_forward", "fuse", "haar_bank", "idwt2", "init_fafnet",
    "load_checkpoint", "load_manifest", "prepare_dataset", "q2n", "qnr_suite", "read_image", "sam",
    "save_checkpoint", "scc", "synthetic_pairs", "total_loss", "train", "train_manifest", "write_image",
]
