"""Reading and writing 8-bit images and binary masks.

Masks live on disk as single-channel PNGs holding {0, 255} and in memory as
uint8 arrays holding {0, 1}. Any non-zero pixel of a mask file counts as
foreground, which also accepts colour-coded annotation files.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


def read_image(path) -> np.ndarray:
    """Read an image file as an HxWx3 uint8 RGB array."""
    arr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if arr is None:
        raise OSError(f"cannot read image {path}")
    return cv2.cvtColor(arr, cv2.COLOR_BGR2RGB)


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.asarray(img)
    if np.issubdtype(img.dtype, np.floating):
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), img):
        raise OSError(f"cannot write image {path}")


def read_mask(path) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise OSError(f"cannot read mask {path}")
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return (arr > 0).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = (np.asarray(mask) > 0).astype(np.uint8) * 255
    if not cv2.imwrite(str(path), out):
        raise OSError(f"cannot write mask {path}")
