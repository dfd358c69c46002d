"""Fundus cropping and fixed-size resizing of image/mask pairs."""

from __future__ import annotations

import warnings
from typing import NamedTuple

import cv2
import numpy as np

from ..exceptions import ContractError, NoForegroundWarning
from ..validation import check_binary_mask, check_image, check_same_hw
from .color import to_gray

DEFAULT_BACKGROUND_THRESHOLD = 15


class CropRect(NamedTuple):
    top: int
    left: int
    height: int
    width: int

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    def apply(self, arr: np.ndarray) -> np.ndarray:
        if self.height < 1 or self.width < 1:
            raise ContractError(f"degenerate crop rect {self}")
        if self.top < 0 or self.left < 0 or self.bottom > arr.shape[0] or self.right > arr.shape[1]:
            raise ContractError(f"crop rect {self} outside image of shape {arr.shape[:2]}")
        return arr[self.top : self.bottom, self.left : self.right].copy()


class CropResult(NamedTuple):
    image: np.ndarray
    rect: CropRect
    foreground_found: bool


def foreground_rect(img, background_threshold: float = DEFAULT_BACKGROUND_THRESHOLD, margin: int = 0):
    """Tightest rect around pixels brighter than the threshold, or None."""
    gray = to_gray(img)
    if np.issubdtype(np.asarray(img).dtype, np.floating):
        gray = gray * 255.0
    fg = gray > background_threshold
    rows = np.flatnonzero(fg.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(fg.any(axis=0))
    H, W = fg.shape
    top = max(int(rows[0]) - margin, 0)
    left = max(int(cols[0]) - margin, 0)
    bottom = min(int(rows[-1]) + 1 + margin, H)
    right = min(int(cols[-1]) + 1 + margin, W)
    return CropRect(top, left, bottom - top, right - left)


def crop_fundus(img, background_threshold: float = DEFAULT_BACKGROUND_THRESHOLD, margin: int = 0) -> CropResult:
    """Crop away the dark surround of a fundus photograph.

    ``background_threshold`` is on the 0-255 grayscale. An image with no
    foreground is returned whole with ``foreground_found=False`` and a
    :class:`NoForegroundWarning`.
    """
    img = check_image(img)
    if margin < 0:
        raise ContractError("margin must be non-negative")
    rect = foreground_rect(img, background_threshold, margin)
    if rect is None:
        warnings.warn("no pixel above the background threshold; returning the full frame", NoForegroundWarning, stacklevel=2)
        return CropResult(img.copy(), CropRect(0, 0, img.shape[0], img.shape[1]), False)
    return CropResult(rect.apply(img), rect, True)


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    """Source index for each destination index under nearest-neighbour scaling."""
    idx = np.floor(np.arange(n_out) * (n_in / n_out)).astype(int)
    return np.minimum(idx, n_in - 1)


def resize_mask(mask: np.ndarray, side: int) -> np.ndarray:
    mask = check_binary_mask(mask)
    rows = nearest_indices(mask.shape[0], side)
    cols = nearest_indices(mask.shape[1], side)
    return mask[np.ix_(rows, cols)]


def resize_image(img: np.ndarray, side: int) -> np.ndarray:
    img = check_image(img)
    if img.shape[:2] == (side, side):
        return img.copy()
    work = img.astype(np.float32) if img.dtype not in (np.uint8, np.float32) else img
    out = cv2.resize(work, (side, side), interpolation=cv2.INTER_LINEAR)
    if np.issubdtype(img.dtype, np.floating):
        return np.clip(out, 0.0, 1.0).astype(img.dtype)
    return out.astype(img.dtype)


def resize_pair(img, mask=None, side: int = 512):
    """Square-stretch ``img`` (bilinear) and ``mask`` (nearest) to side x side.

    Returns ``(image, mask)``; ``mask`` is None when none was given.
    """
    if side < 1:
        raise ContractError(f"side must be >= 1, got {side}")
    img = check_image(img)
    if mask is None:
        return resize_image(img, side), None
    mask = check_binary_mask(mask)
    check_same_hw(img, mask)
    return resize_image(img, side), resize_mask(mask, side)
