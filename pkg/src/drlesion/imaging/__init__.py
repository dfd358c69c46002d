"""Colour handling, CLAHE, cropping and resizing of fundus images."""

from .clahe import DEFAULT_CLIP_LIMIT, DEFAULT_TILE_GRID, clahe_channel, clip_histogram, enhance_contrast_lab, enhance_lab
from .color import lab_to_rgb, rgb_to_lab, to_gray
from .geometry import DEFAULT_BACKGROUND_THRESHOLD, CropRect, CropResult, crop_fundus, resize_pair
from .io import read_image, read_mask, write_image, write_mask
from .preprocess import PreprocessConfig, prepare_pair

__all__ = [
    "DEFAULT_BACKGROUND_THRESHOLD",
    "DEFAULT_CLIP_LIMIT",
    "DEFAULT_TILE_GRID",
    "CropRect",
    "CropResult",
    "PreprocessConfig",
    "clahe_channel",
    "clip_histogram",
    "crop_fundus",
    "enhance_contrast_lab",
    "enhance_lab",
    "lab_to_rgb",
    "prepare_pair",
    "read_image",
    "read_mask",
    "resize_pair",
    "rgb_to_lab",
    "to_gray",
    "write_image",
    "write_mask",
]
