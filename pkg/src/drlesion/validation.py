"""Input validation helpers used across the package.

These mirror the ``check_array`` family from scikit-learn but speak the
vocabulary of raster images: HxW grids, HxWx3 colour images and binary masks.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ContractError, InvalidColorSpaceError, PairingError


def check_image(img, *, allow_gray: bool = True) -> np.ndarray:
    """Validate a raster image and return it as an ndarray.

    Integer images must lie in [0, 255]; float images in [0, 1].
    """
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise ContractError(f"expected HxW or HxWx3 image, got shape {arr.shape}")
    if arr.ndim == 2 and not allow_gray:
        raise InvalidColorSpaceError("expected a 3-channel RGB image, got a single channel")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ContractError("image must be non-empty")
    _check_range(arr)
    return arr


def check_rgb(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidColorSpaceError(f"expected an HxWx3 RGB image, got shape {arr.shape}")
    return check_image(arr, allow_gray=False)


def check_channel(ch) -> np.ndarray:
    arr = np.asarray(ch)
    if arr.ndim != 2:
        raise ContractError(f"expected a single-channel HxW grid, got shape {arr.shape}")
    if arr.size == 0:
        raise ContractError("channel must be non-empty")
    _check_range(arr)
    return arr


def check_binary_mask(mask, name: str = "mask") -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ContractError(f"{name} must be a 2-D grid, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if not np.isin(arr, (0, 1)).all():
        raise ContractError(f"{name} must be strictly binary with values in {{0, 1}}")
    return arr.astype(np.uint8)


def check_probabilities(probs, name: str = "probabilities") -> np.ndarray:
    arr = np.asarray(probs, dtype=np.float64)
    if arr.size and (np.isnan(arr).any() or arr.min() < 0.0 or arr.max() > 1.0):
        raise ContractError(f"{name} must lie in [0, 1]")
    return arr


def check_same_hw(a: np.ndarray, b: np.ndarray, what: str = "image and mask") -> None:
    if a.shape[:2] != b.shape[:2]:
        raise PairingError(f"{what} dimensions differ: {a.shape[:2]} vs {b.shape[:2]}")


def _check_range(arr: np.ndarray) -> None:
    if arr.dtype == bool:
        return
    if np.issubdtype(arr.dtype, np.integer):
        if arr.min() < 0 or arr.max() > 255:
            raise ContractError("integer intensities must lie in [0, 255]")
    elif np.issubdtype(arr.dtype, np.floating):
        if np.isnan(arr).any() or arr.min() < 0.0 or arr.max() > 1.0:
            raise ContractError("float intensities must lie in [0, 1]")
    else:
        raise ContractError(f"unsupported pixel dtype {arr.dtype}")
