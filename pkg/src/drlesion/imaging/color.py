"""sRGB <-> CIE LAB conversion under the D65 illuminant.

One canonical formula is used everywhere so that stored artefacts stay
stable:

1. sRGB companding is undone (``c / 12.92`` below 0.04045, otherwise
   ``((c + 0.055) / 1.055) ** 2.4``).
2. Linear RGB is mapped to XYZ with the IEC 61966-2-1 matrix.
3. XYZ is normalised by the D65 white point and mapped to LAB with the
   CIE 1976 cube-root function (linear segment below ``(6/29) ** 3``).

L lies in [0, 100]; A and B are unbounded reals (roughly [-128, 127] for
sRGB gamut colours).
"""

from __future__ import annotations

import numpy as np

from ..validation import check_rgb

D65_WHITE = np.array([0.95047, 1.0, 1.08883])

RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
XYZ_TO_RGB = np.linalg.inv(RGB_TO_XYZ)

_DELTA = 6.0 / 29.0


def _to_unit_float(img: np.ndarray) -> np.ndarray:
    if np.issubdtype(img.dtype, np.integer):
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.clip(c, 0.0, 1.0)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _f_inv(f: np.ndarray) -> np.ndarray:
    return np.where(f > _DELTA, f**3, 3 * _DELTA**2 * (f - 4.0 / 29.0))


def rgb_to_lab(img) -> np.ndarray:
    """Convert an RGB image (uint8 or float in [0, 1]) to an HxWx3 LAB array.

    Raises InvalidColorSpaceError for anything that is not 3-channel.
    """
    rgb = _to_unit_float(check_rgb(img))
    xyz = _srgb_to_linear(rgb) @ RGB_TO_XYZ.T
    fx, fy, fz = np.moveaxis(_f(xyz / D65_WHITE), -1, 0)
    L = np.clip(116.0 * fy - 16.0, 0.0, 100.0)
    return np.stack([L, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def lab_to_rgb(lab, dtype=np.uint8) -> np.ndarray:
    """Inverse of :func:`rgb_to_lab`; out-of-gamut colours are clipped.

    ``dtype=np.uint8`` rounds to 8-bit intensities, any float dtype returns
    values in [0, 1].
    """
    lab = np.asarray(lab, dtype=np.float64)
    if lab.ndim != 3 or lab.shape[2] != 3:
        raise ValueError(f"expected HxWx3 LAB array, got shape {lab.shape}")
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = _f_inv(np.stack([fx, fy, fz], axis=-1)) * D65_WHITE
    rgb = _linear_to_srgb(xyz @ XYZ_TO_RGB.T)
    if np.issubdtype(np.dtype(dtype), np.integer):
        return np.clip(np.rint(rgb * 255.0), 0, 255).astype(dtype)
    return rgb.astype(dtype)


def to_gray(img) -> np.ndarray:
    """Luma (ITU-R BT.601 weights) of an RGB image; gray input is returned as float."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        return arr.astype(np.float64)
    return arr[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])
