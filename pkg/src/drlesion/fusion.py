"""Combining the four per-class binary masks into one composite.

The composite keeps every class (multi-label union); overlaps are only
resolved when rendering, by a draw priority. On disk a composite is either

* a single-channel uint8 PNG whose pixel value is a bitmask
  (bit0 = EX, bit1 = HE, bit2 = MA, bit3 = SE), or
* a directory of four binary PNG planes ``EX.png``, ``HE.png``, ``MA.png``,
  ``SE.png`` holding {0, 255}.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .dataset import LesionClass
from .exceptions import ContractError
from .imaging.io import read_mask, write_mask
from .validation import check_binary_mask, check_image

ALL_BITS = sum(c.bit for c in LesionClass)


@dataclass(frozen=True, eq=False)
class CompositeMask:
    bits: np.ndarray  # H x W uint8 bitmask

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2 or b.dtype != np.uint8 or (b & ~np.uint8(ALL_BITS)).any():
            raise ContractError("composite bits must be an HxW uint8 array using only the four class bits")

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def extract(self, lesion) -> np.ndarray:
        lesion = LesionClass.parse(lesion)
        return ((self.bits & lesion.bit) > 0).astype(np.uint8)

    def classes_at(self, row: int, col: int) -> frozenset:
        v = int(self.bits[row, col])
        return frozenset(c for c in LesionClass if v & c.bit)

    @property
    def support(self) -> np.ndarray:
        return self.bits > 0

    def __eq__(self, other) -> bool:
        return isinstance(other, CompositeMask) and np.array_equal(self.bits, other.bits)


def fuse(masks: dict) -> CompositeMask:
    """Union of 1-4 per-class binary masks; absent classes stay empty."""
    if not 1 <= len(masks) <= 4:
        raise ContractError(f"expected 1 to 4 class masks, got {len(masks)}")
    shape = None
    bits = None
    for key, mask in masks.items():
        lesion = LesionClass.parse(key)
        m = check_binary_mask(mask, f"{lesion.value} mask")
        if shape is None:
            shape = m.shape
            bits = np.zeros(shape, np.uint8)
        elif m.shape != shape:
            raise ContractError(f"{lesion.value} mask shape {m.shape} differs from {shape}")
        bits |= m * np.uint8(lesion.bit)
    return CompositeMask(bits)


@dataclass(frozen=True)
class ColorMap:
    """Overlay colours per class; ``priority`` lists classes from top-most down."""

    colors: dict = field(
        default_factory=lambda: {
            LesionClass.EX: (255, 255, 0),
            LesionClass.HE: (255, 0, 0),
            LesionClass.MA: (0, 255, 0),
            LesionClass.SE: (0, 128, 255),
        }
    )
    priority: tuple = (LesionClass.MA, LesionClass.SE, LesionClass.HE, LesionClass.EX)

    def __post_init__(self):
        colors = {LesionClass.parse(k): tuple(int(c) for c in v) for k, v in self.colors.items()}
        priority = tuple(LesionClass.parse(p) for p in self.priority)
        if set(colors) != set(LesionClass) or len(set(colors.values())) != 4:
            raise ContractError("colour map needs four distinct colours, one per class")
        if sorted(priority) != sorted(LesionClass):
            raise ContractError("priority must be a permutation of the four classes")
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "priority", priority)


def top_class_colors(comp: CompositeMask, cmap: ColorMap) -> np.ndarray:
    color = np.zeros(comp.shape + (3,), np.float64)
    # paint lowest priority first so higher ones overwrite
    for lesion in reversed(cmap.priority):
        color[(comp.bits & lesion.bit) > 0] = cmap.colors[lesion]
    return color


def render_overlay(base, comp: CompositeMask, cmap: ColorMap | None = None, alpha: float = 0.5) -> np.ndarray:
    """Blend the top-priority class colour into ``base`` where any class is present.

    Pixels outside the composite's support are copied from ``base`` unchanged.
    """
    cmap = cmap or ColorMap()
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    base = check_image(base)
    if base.shape[:2] != comp.shape:
        raise ContractError(f"base image {base.shape[:2]} and composite {comp.shape} differ in size")
    if base.ndim == 2:
        base = np.repeat(base[..., None], 3, axis=2)
    is_float = np.issubdtype(base.dtype, np.floating)
    b = base.astype(np.float64) * (255.0 if is_float else 1.0)
    blended = (1.0 - alpha) * b + alpha * top_class_colors(comp, cmap)
    out = b.copy()
    sup = comp.support
    out[sup] = blended[sup]
    if is_float:
        res = base.copy()
        res[sup] = (out[sup] / 255.0).astype(base.dtype)
        return res
    res = base.copy()
    res[sup] = np.clip(np.rint(out[sup]), 0, 255).astype(base.dtype)
    return res


def write_composite(path, comp: CompositeMask, layout: str = "indexed") -> None:
    path = Path(path)
    if layout == "indexed":
        path.parent.mkdir(parents=True, exist_ok=True)
        if not cv2.imwrite(str(path), comp.bits):
            raise OSError(f"cannot write {path}")
    elif layout == "planes":
        for lesion in LesionClass:
            write_mask(path / f"{lesion.value}.png", comp.extract(lesion))
    else:
        raise ContractError(f"unknown composite layout {layout!r}")


def read_composite(path) -> CompositeMask:
    path = Path(path)
    if path.is_dir():
        return fuse({c: read_mask(path / f"{c.value}.png") for c in LesionClass})
    bits = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if bits is None or bits.ndim != 2:
        raise OSError(f"cannot read indexed composite {path}")
    return CompositeMask(bits.astype(np.uint8))
