"""Contrast-limited adaptive histogram equalisation on single channels."""

from __future__ import annotations

import numpy as np

from ..exceptions import ConfigError
from ..validation import check_channel, check_rgb
from .color import lab_to_rgb, rgb_to_lab

N_BINS = 256
DEFAULT_CLIP_LIMIT = 2.0
DEFAULT_TILE_GRID = (8, 8)


def clip_histogram(hist: np.ndarray, limit: float) -> np.ndarray:
    """Clip histograms at ``limit`` and spread the excess over the bins.

    ``hist`` may be 1-D or stacked (..., n_bins). The excess is handed out in
    equal shares to bins still below the limit, repeatedly, so no bin ends up
    above ``limit``. If every bin saturates the leftover mass is dropped.
    """
    h = np.asarray(hist, dtype=np.float64)
    excess = np.maximum(h - limit, 0.0).sum(axis=-1)
    h = np.minimum(h, limit)
    for _ in range(h.shape[-1]):
        room = limit - h
        n_open = (room > 0).sum(axis=-1)
        active = (excess > 1e-9) & (n_open > 0)
        if not active.any():
            break
        share = np.where(active, excess / np.maximum(n_open, 1), 0.0)[..., None]
        add = np.minimum(room, share)
        h = h + add
        excess = excess - add.sum(axis=-1)
    return h


def _tile_luts(levels: np.ndarray, rows: int, cols: int, clip_limit: float) -> np.ndarray:
    H, W = levels.shape
    th, tw = H // rows, W // cols
    tiles = levels.reshape(rows, th, cols, tw).transpose(0, 2, 1, 3).reshape(rows * cols, -1)
    offsets = np.arange(rows * cols)[:, None] * N_BINS
    hist = np.bincount((tiles + offsets).ravel(), minlength=rows * cols * N_BINS)
    hist = hist.reshape(rows * cols, N_BINS)
    area = th * tw
    clipped = clip_histogram(hist, clip_limit * area / N_BINS)
    cdf = np.cumsum(clipped, axis=-1)
    lut = cdf * (N_BINS - 1) / cdf[:, -1:]
    return lut.reshape(rows, cols, N_BINS)


def _interp_axis(n: int, tile: int, n_tiles: int):
    # position of each pixel relative to the tile centres
    g = (np.arange(n) + 0.5) / tile - 0.5
    lo = np.floor(g).astype(int)
    w = g - lo
    return np.clip(lo, 0, n_tiles - 1), np.clip(lo + 1, 0, n_tiles - 1), w


def clahe_channel(ch, clip_limit: float = DEFAULT_CLIP_LIMIT, tile_grid=DEFAULT_TILE_GRID) -> np.ndarray:
    """Apply CLAHE to a single-channel grid.

    Parameters
    ----------
    ch : array of shape (H, W)
        Integer intensities in [0, 255] or floats in [0, 1].
    clip_limit : float
        Histogram clip height as a multiple of the mean bin height.
    tile_grid : (rows, cols)
        Number of contextual regions along each axis.

    Returns
    -------
    ndarray of the same shape and storage kind as ``ch``.
    """
    ch = check_channel(ch)
    rows, cols = (int(v) for v in tile_grid)
    if rows < 1 or cols < 1:
        raise ConfigError(f"tile grid must be at least 1x1, got {tile_grid}")
    if not clip_limit > 0:
        raise ConfigError(f"clip_limit must be positive, got {clip_limit}")
    H, W = ch.shape
    if rows > H or cols > W:
        raise ConfigError(f"tile grid {rows}x{cols} larger than image {H}x{W}")

    is_float = np.issubdtype(ch.dtype, np.floating)
    levels = np.rint(ch * 255.0).astype(np.int64) if is_float else ch.astype(np.int64)

    pad_h, pad_w = (-H) % rows, (-W) % cols
    padded = np.pad(levels, ((0, pad_h), (0, pad_w)), mode="reflect") if pad_h or pad_w else levels
    th, tw = padded.shape[0] // rows, padded.shape[1] // cols
    lut = _tile_luts(padded, rows, cols, clip_limit)

    y0, y1, wy = _interp_axis(H, th, rows)
    x0, x1, wx = _interp_axis(W, tw, cols)
    wy, wx = wy[:, None], wx[None, :]
    Y0, Y1, X0, X1 = y0[:, None], y1[:, None], x0[None, :], x1[None, :]
    top = lut[Y0, X0, levels] * (1 - wx) + lut[Y0, X1, levels] * wx
    bottom = lut[Y1, X0, levels] * (1 - wx) + lut[Y1, X1, levels] * wx
    out = np.clip(np.rint(top * (1 - wy) + bottom * wy), 0, 255)

    if is_float:
        return (out / 255.0).astype(ch.dtype)
    return out.astype(ch.dtype)


def enhance_lab(lab: np.ndarray, clip_limit: float = DEFAULT_CLIP_LIMIT, tile_grid=DEFAULT_TILE_GRID) -> np.ndarray:
    """CLAHE on the L plane of a LAB array; A and B are returned untouched."""
    out = np.array(lab, dtype=np.float64, copy=True)
    L8 = np.clip(np.rint(out[..., 0] * 255.0 / 100.0), 0, 255).astype(np.uint8)
    out[..., 0] = clahe_channel(L8, clip_limit, tile_grid).astype(np.float64) * 100.0 / 255.0
    return out


def enhance_contrast_lab(img, clip_limit: float = DEFAULT_CLIP_LIMIT, tile_grid=DEFAULT_TILE_GRID) -> np.ndarray:
    """Split into L/A/B, equalise L with CLAHE, merge and convert back to RGB.

    The output keeps the storage kind of the input (uint8 or float in [0, 1]).
    """
    img = check_rgb(img)
    lab = enhance_lab(rgb_to_lab(img), clip_limit, tile_grid)
    return lab_to_rgb(lab, dtype=img.dtype)
