"""Per-lesion binary segmentation of diabetic retinopathy lesions with DeepLabv3+.

Four independent binary models (EX, HE, MA, SE) are trained on cropped,
CLAHE-enhanced fundus images; their masks are fused into one composite.
"""

__version__ = "0.1.0"

from .dataset import LesionClass, SampleRecord, SplitManifest, augment_pair, build_training_set, load_manifest, split
from .estimators import FundusCropper, LabClaheEnhancer, LesionSegmenter, SquareResizer
from .fusion import ColorMap, CompositeMask, fuse, render_overlay
from .metrics import ConfusionCounts, MetricReport, confusion, error_metrics, evaluate_class, ratio_metrics, roc_auc
from .model import ModelConfig, binarize, build_model, forward
from .training import TrainConfig, binary_cross_entropy, early_stopping_step, train

__all__ = [
    "ColorMap",
    "CompositeMask",
    "ConfusionCounts",
    "FundusCropper",
    "LabClaheEnhancer",
    "LesionClass",
    "LesionSegmenter",
    "MetricReport",
    "ModelConfig",
    "SampleRecord",
    "SplitManifest",
    "SquareResizer",
    "TrainConfig",
    "augment_pair",
    "binarize",
    "binary_cross_entropy",
    "build_model",
    "build_training_set",
    "confusion",
    "early_stopping_step",
    "error_metrics",
    "evaluate_class",
    "forward",
    "fuse",
    "load_manifest",
    "ratio_metrics",
    "render_overlay",
    "roc_auc",
    "split",
    "train",
]
