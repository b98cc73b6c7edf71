"""Variable-rate hierarchical VAE image codec with practical entropy coding."""

from .autodiff import Parameter, Tensor, no_grad
from .codec import CompressedImage, DecodeMode, compress, decompress
from .metrics import bd_rate, bpp, psnr
from .model import (ModelConfig, QarvModel, load_checkpoint, preset,
                    save_checkpoint)
from .training import LambdaSchedule, TrainConfig, train

__all__ = [
    "CompressedImage", "DecodeMode", "LambdaSchedule", "ModelConfig",
    "Parameter", "QarvModel", "Tensor", "TrainConfig", "bd_rate", "bpp",
    "compress", "decompress", "load_checkpoint", "no_grad", "preset", "psnr",
    "save_checkpoint", "train",
]

__version__ = "0.1.0"
