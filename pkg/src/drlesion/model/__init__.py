"""DeepLabv3+ construction, inference and checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import BACKBONES, ModelConfig
from .deeplab import ASPP, DeepLabV3Plus, Decoder, build_model
from .inference import binarize, forward

__all__ = [
    "ASPP",
    "BACKBONES",
    "Decoder",
    "DeepLabV3Plus",
    "ModelConfig",
    "binarize",
    "build_model",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
]
