"""Slow, independent reference implementations used as test oracles."""

from fractions import Fraction
from itertools import product

import numpy as np


def lab_lightness_of_gray(v):
    """CIE L* of an sRGB gray level, evaluated by hand from the textbook formulas."""
    c = v / 255.0
    lin = c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4
    y = lin  # gray: Y equals the linear value (matrix row sums to 1)
    f = y ** (1 / 3) if y > (6 / 29) ** 3 else y / (3 * (6 / 29) ** 2) + 4 / 29
    return 116 * f - 16


def reference_clahe(img, clip_limit=2.0, tiles=(8, 8)):
    """Textbook CLAHE: clip each tile histogram at clip_limit times the mean bin
    height, spread the clipped mass evenly over all bins and repeat until no bin
    overflows, map with the normalised CDF, then blend the four surrounding tile
    mappings bilinearly around tile centres.

    Only handles images whose size is a multiple of the tile grid.
    """
    img = np.asarray(img)
    H, W = img.shape
    rows, cols = tiles
    th, tw = H // rows, W // cols
    assert th * rows == H and tw * cols == W
    area = th * tw
    clip = clip_limit * area / 256
    maps = {}
    for r in range(rows):
        for c in range(cols):
            hist = [0.0] * 256
            for y in range(r * th, (r + 1) * th):
                for x in range(c * tw, (c + 1) * tw):
                    hist[int(img[y, x])] += 1
            # clip, spread the excess evenly over all bins, repeat until nothing overflows
            for _ in range(10000):
                excess = 0.0
                for i in range(256):
                    if hist[i] > clip:
                        excess += hist[i] - clip
                        hist[i] = clip
                if excess < 1e-9 or all(h >= clip for h in hist):
                    break
                for i in range(256):
                    hist[i] += excess / 256
            total = sum(hist)
            cum, lut = 0, []
            for i in range(256):
                cum += hist[i]
                lut.append(cum * 255.0 / total)
            maps[r, c] = lut
    out = np.zeros_like(img)
    for y in range(H):
        # centre of tile r is at pixel r*th + (th-1)/2
        fy = (y - (th - 1) / 2) / th
        r0 = int(np.floor(fy))
        wy = fy - r0
        r1 = min(max(r0 + 1, 0), rows - 1)
        r0 = min(max(r0, 0), rows - 1)
        for x in range(W):
            fx = (x - (tw - 1) / 2) / tw
            c0 = int(np.floor(fx))
            wx = fx - c0
            c1 = min(max(c0 + 1, 0), cols - 1)
            c0 = min(max(c0, 0), cols - 1)
            v = int(img[y, x])
            val = (
                (1 - wy) * ((1 - wx) * maps[r0, c0][v] + wx * maps[r0, c1][v])
                + wy * ((1 - wx) * maps[r1, c0][v] + wx * maps[r1, c1][v])
            )
            out[y, x] = min(255, max(0, int(round(val))))
    return out


def brute_confusion(pred, truth):
    tp = tn = fp = fn = 0
    for p, t in zip(np.ravel(pred).tolist(), np.ravel(truth).tolist()):
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif not p and t:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def exact_ratios(tp, tn, fp, fn):
    """Exact rational metrics (None where a denominator is zero)."""

    def q(a, b):
        return Fraction(a, b) if b else None

    return {
        "accuracy": q(tp + tn, tp + tn + fp + fn),
        "specificity": q(tn, tn + fp),
        "sensitivity": q(tp, tp + fn),
        "precision": q(tp, tp + fp),
        "f1": q(2 * tp, 2 * tp + fp + fn),
        "iou": q(tp, tp + fp + fn),
    }


def pairwise_auc(scores, labels):
    """Probability that a random positive outranks a random negative (ties = 1/2)."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = Fraction(0)
    for p, n in product(pos, neg):
        if p > n:
            wins += 1
        elif p == n:
            wins += Fraction(1, 2)
    return wins / (len(pos) * len(neg))


def brute_bbox(img, threshold):
    gray = np.asarray(img, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray @ np.array([0.299, 0.587, 0.114])
    rows, cols = [], []
    for y in range(gray.shape[0]):
        for x in range(gray.shape[1]):
            if gray[y, x] > threshold:
                rows.append(y)
                cols.append(x)
    if not rows:
        return None
    return min(rows), min(cols), max(rows) - min(rows) + 1, max(cols) - min(cols) + 1


def central_difference(f, x, eps):
    return (f(x + eps) - f(x - eps)) / (2 * eps)
