"""The preprocessing chain: crop -> (augment) -> CLAHE on L -> resize.

Cropping happens once, on disk, before the dataset is split. CLAHE and the
square resize are applied when a sample is loaded for training, evaluation
or inference, so that augmented samples are enhanced after rotation. Masks
are only ever cropped and resized.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..exceptions import ConfigError
from .clahe import DEFAULT_CLIP_LIMIT, DEFAULT_TILE_GRID, enhance_contrast_lab
from .geometry import DEFAULT_BACKGROUND_THRESHOLD, CropRect, crop_fundus, resize_pair


@dataclass(frozen=True)
class PreprocessConfig:
    crop_threshold: float = DEFAULT_BACKGROUND_THRESHOLD
    crop_margin: int = 0
    clahe: bool = True
    clahe_clip_limit: float = DEFAULT_CLIP_LIMIT
    clahe_tile_grid: tuple[int, int] = DEFAULT_TILE_GRID
    image_size: int = 512

    def __post_init__(self):
        if self.image_size < 1:
            raise ConfigError("image_size must be >= 1")
        if self.clahe_clip_limit <= 0:
            raise ConfigError("clahe_clip_limit must be positive")
        object.__setattr__(self, "clahe_tile_grid", tuple(int(v) for v in self.clahe_tile_grid))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clahe_tile_grid"] = list(self.clahe_tile_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        d = dict(d)
        d["clahe_tile_grid"] = tuple(d.get("clahe_tile_grid", DEFAULT_TILE_GRID))
        return cls(**d)

    def load_time_view(self) -> dict:
        """Settings that change how a stored sample becomes model input."""
        return {k: v for k, v in self.to_dict().items() if k not in ("crop_threshold", "crop_margin")}


def crop_pair(img: np.ndarray, masks: dict, cfg: PreprocessConfig):
    """Crop an image and every mask in ``masks`` with the image's fundus rect.

    Returns ``(image, masks, CropResult)``.
    """
    res = crop_fundus(img, cfg.crop_threshold, cfg.crop_margin)
    rect: CropRect = res.rect
    return res.image, {k: rect.apply(m) for k, m in masks.items()}, res


def prepare_image(img: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    if cfg.clahe:
        img = enhance_contrast_lab(img, cfg.clahe_clip_limit, cfg.clahe_tile_grid)
    return resize_pair(img, None, cfg.image_size)[0]


def prepare_pair(img: np.ndarray, mask, cfg: PreprocessConfig):
    if cfg.clahe:
        img = enhance_contrast_lab(img, cfg.clahe_clip_limit, cfg.clahe_tile_grid)
    return resize_pair(img, mask, cfg.image_size)
