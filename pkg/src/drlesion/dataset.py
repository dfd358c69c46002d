"""IDRiD-style manifests, deterministic splitting and paired augmentation.

Dataset root layout::

    <root>/images/<stem>.<ext>
    <root>/masks/<LESION>/<stem>.<ext>        (or <stem>_<LESION>.<ext>)

where ``<LESION>`` is one of EX, HE, MA, SE. Any image suffix understood by
OpenCV is accepted; masks treat every non-zero pixel as foreground.

Manifest files are tab separated, one record per line::

    split  image_path  mask_path  lesion  provenance  seed

``provenance`` is ``original`` or ``augmented:<parent stem>``; ``seed`` is the
augmentation seed (``-`` for originals), enough to regenerate any augmented
pair from its parent without storing transform matrices. Lines starting with
``#`` hold ``key=value`` metadata (lesion, split seed).
"""

from __future__ import annotations

import enum
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import cv2
import numpy as np

from .exceptions import ConfigError, ContractError
from .imaging.io import IMAGE_SUFFIXES, read_image, read_mask, write_image, write_mask
from .validation import check_binary_mask, check_image, check_same_hw

log = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.7, 0.2, 0.1)
MAX_ROTATION_DEG = 10.0
FLIP_PROBABILITY = 0.5
AUGMENTATIONS_PER_IMAGE = 9


class LesionClass(str, enum.Enum):
    EX = "EX"  # hard exudates
    HE = "HE"  # haemorrhages
    MA = "MA"  # microaneurysms
    SE = "SE"  # soft exudates

    def __str__(self) -> str:
        return self.value

    @property
    def bit(self) -> int:
        return 1 << list(LesionClass).index(self)

    @classmethod
    def parse(cls, value) -> "LesionClass":
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ConfigError(f"unknown lesion class {value!r}; expected one of EX, HE, MA, SE") from None


class TransformDescription(NamedTuple):
    angle: float
    flip: bool

    def __str__(self) -> str:
        return f"rotate({self.angle:+.6f}deg)" + ("+hflip" if self.flip else "")


@dataclass(frozen=True)
class SampleRecord:
    image_path: Path
    mask_path: Path
    lesion: LesionClass
    parent: str | None = None
    seed: int | None = None

    @property
    def stem(self) -> str:
        return Path(self.image_path).stem

    @property
    def identity(self) -> str:
        """Identity of the original image the record derives from."""
        return self.parent if self.parent is not None else self.stem

    @property
    def is_augmented(self) -> bool:
        return self.parent is not None

    @property
    def provenance(self) -> str:
        return f"augmented:{self.parent}" if self.is_augmented else "original"


@dataclass
class SplitManifest:
    lesion: LesionClass
    seed: int
    train: list[SampleRecord] = field(default_factory=list)
    validation: list[SampleRecord] = field(default_factory=list)
    test: list[SampleRecord] = field(default_factory=list)

    def counts(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)

    @property
    def augmented(self) -> list[SampleRecord]:
        return [r for r in self.train if r.is_augmented]

    def check(self, files: bool = False) -> None:
        """Raise ContractError if the split invariants do not hold.

        With ``files=True`` every image and mask must also exist on disk.
        """
        ids = [{r.identity for r in part} for part in (self.train, self.validation, self.test)]
        if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
            raise ContractError("an image identity appears in more than one split")
        if any(r.is_augmented for r in self.validation + self.test):
            raise ContractError("augmented records outside the training split")
        originals = {r.stem for r in self.train if not r.is_augmented}
        orphans = [r for r in self.augmented if r.parent not in originals]
        if orphans:
            raise ContractError(f"augmented records without a training parent: {orphans[0].stem}")
        if files:
            for r in self.train + self.validation + self.test:
                for p in (r.image_path, r.mask_path):
                    if not Path(p).is_file():
                        raise ContractError(f"manifest references missing file {p}")


def find_mask(mask_dir: Path, stem: str, lesion: LesionClass) -> Path | None:
    for name in (stem, f"{stem}_{lesion.value}"):
        for suffix in IMAGE_SUFFIXES:
            for candidate in (mask_dir / (name + suffix), mask_dir / (name + suffix.upper())):
                if candidate.is_file():
                    return candidate
    return None


def _list_images(folder: Path) -> list[Path]:
    return sorted(
        (p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
        key=lambda p: p.stem,
    )


def load_manifest(root_dir, lesion, skipped: list | None = None) -> list[SampleRecord]:
    """Pair every image under ``root/images`` with its ``lesion`` mask.

    Images lacking a mask are appended to ``skipped`` (if given) and logged.
    Records are ordered lexicographically by stem.
    """
    root = Path(root_dir)
    lesion = LesionClass.parse(lesion)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    image_dir = root / "images"
    if not image_dir.is_dir():
        log.warning("no images/ folder under %s; manifest is empty", root)
        return []
    images = _list_images(image_dir)
    if not images:
        log.warning("no images under %s; manifest is empty", image_dir)
    mask_dir = root / "masks" / lesion.value
    records, missing = [], []
    for img in images:
        mask = find_mask(mask_dir, img.stem, lesion) if mask_dir.is_dir() else None
        if mask is None:
            missing.append(img)
        else:
            records.append(SampleRecord(img, mask, lesion))
    if missing:
        log.info("%d image(s) without a %s mask skipped", len(missing), lesion.value)
    if skipped is not None:
        skipped.extend(missing)
    return records


def split_sizes(n: int, ratios=DEFAULT_RATIOS) -> tuple[int, int, int]:
    """Round-half-up sizes for train and validation; test takes the remainder.

    If rounding leaves a split empty, one item is moved over from the largest
    split so all three stay non-empty (only matters for n < 10).
    """
    if n < 3:
        raise ContractError(f"cannot produce three non-empty splits from {n} records")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    # epsilon keeps exact halves (e.g. 0.7 * 5) from rounding down on float error
    n_train = math.floor(ratios[0] * n + 0.5 + 1e-9)
    n_val = math.floor(ratios[1] * n + 0.5 + 1e-9)
    sizes = [n_train, n_val, n - n_train - n_val]
    while sizes[2] < 0:
        sizes[int(np.argmax(sizes[:2]))] -= 1
        sizes[2] += 1
    for i in range(3):
        if sizes[i] == 0:
            sizes[int(np.argmax(sizes))] -= 1
            sizes[i] = 1
    return tuple(sizes)


def split(records, ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitManifest:
    """Shuffle original records with ``seed`` and cut them into train/val/test."""
    records = list(records)
    if not records:
        raise ContractError("cannot split an empty record list")
    if any(r.is_augmented for r in records):
        raise ContractError("split must run before augmentation")
    lesions = {r.lesion for r in records}
    if len(lesions) != 1:
        raise ContractError(f"records mix lesion classes {sorted(map(str, lesions))}")
    n_train, n_val, _ = split_sizes(len(records), ratios)
    order = np.random.default_rng(seed).permutation(len(records))
    shuffled = [records[i] for i in order]
    manifest = SplitManifest(
        lesion=records[0].lesion,
        seed=seed,
        train=shuffled[:n_train],
        validation=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
    )
    manifest.check()
    return manifest


def draw_transform(rng_seed: int, max_angle: float = MAX_ROTATION_DEG, flip_probability: float = FLIP_PROBABILITY):
    rng = np.random.default_rng(rng_seed)
    angle = float(rng.uniform(-max_angle, max_angle)) if max_angle > 0 else 0.0
    flip = bool(rng.random() < flip_probability)
    return TransformDescription(angle, flip)


def _rotate(arr: np.ndarray, angle: float, interpolation: int) -> np.ndarray:
    if angle == 0.0:
        return arr.copy()
    h, w = arr.shape[:2]
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle, 1.0)
    return cv2.warpAffine(arr, m, (w, h), flags=interpolation, borderMode=cv2.BORDER_CONSTANT, borderValue=0)


def apply_transform(img, mask, desc: TransformDescription):
    """Rotate (bilinear / nearest) then optionally mirror both arrays."""
    img = check_image(img)
    mask = check_binary_mask(mask)
    check_same_hw(img, mask)
    out_img = _rotate(img, desc.angle, cv2.INTER_LINEAR)
    out_mask = _rotate(mask, desc.angle, cv2.INTER_NEAREST)
    if desc.flip:
        out_img, out_mask = out_img[:, ::-1].copy(), out_mask[:, ::-1].copy()
    return out_img, out_mask


def augment_pair(img, mask, rng_seed: int, max_angle: float = MAX_ROTATION_DEG, flip_probability: float = FLIP_PROBABILITY):
    """Apply one random rotation in [-max_angle, max_angle] and a random mirror.

    Returns ``(image, mask, TransformDescription)``; the same seed always yields
    the same transform.
    """
    desc = draw_transform(rng_seed, max_angle, flip_probability)
    out_img, out_mask = apply_transform(img, mask, desc)
    return out_img, out_mask, desc


def augmentation_seed(split_seed: int, parent_stem: str, k: int) -> int:
    ss = np.random.SeedSequence([split_seed, zlib.crc32(parent_stem.encode()), k])
    return int(ss.generate_state(1)[0])


def build_training_set(manifest: SplitManifest, out_dir, per_image: int = AUGMENTATIONS_PER_IMAGE) -> SplitManifest:
    """Write ``per_image`` augmented copies of every training pair under ``out_dir``.

    Returns a new manifest whose train list holds the originals followed by the
    augmented records; validation and test are left alone.
    """
    if not manifest.train:
        raise ContractError("training split is empty")
    if per_image < 0:
        raise ConfigError("per_image must be non-negative")
    out = Path(out_dir)
    lesion = manifest.lesion
    originals = [r for r in manifest.train if not r.is_augmented]
    augmented = []
    for rec in originals:
        img = read_image(rec.image_path)
        mask = read_mask(rec.mask_path)
        for k in range(per_image):
            seed = augmentation_seed(manifest.seed, rec.stem, k)
            aug_img, aug_mask, _ = augment_pair(img, mask, seed)
            name = f"{rec.stem}__aug{k}"
            img_path = out / "images" / f"{name}.png"
            mask_path = out / "masks" / lesion.value / f"{name}.png"
            write_image(img_path, aug_img)
            write_mask(mask_path, aug_mask)
            augmented.append(SampleRecord(img_path, mask_path, lesion, parent=rec.stem, seed=seed))
    result = replace(manifest, train=originals + augmented)
    result.check()
    return result


def regenerate(record: SampleRecord, parent: SampleRecord):
    """Recompute an augmented pair from its parent files and recorded seed."""
    if not record.is_augmented or record.parent != parent.stem:
        raise ContractError("record is not an augmentation of the given parent")
    img, mask, _ = augment_pair(read_image(parent.image_path), read_mask(parent.mask_path), record.seed)
    return img, mask


def _rel(p: Path, base: Path | None) -> str:
    if base is not None:
        try:
            return Path(p).resolve().relative_to(base.resolve()).as_posix()
        except ValueError:
            pass
    return str(p)


def write_manifest(path, manifest: SplitManifest, base=None) -> None:
    """Write ``manifest``; paths under ``base`` are stored relative to it."""
    path = Path(path)
    base = None if base is None else Path(base)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# lesion={manifest.lesion.value}", f"# seed={manifest.seed}"]
    for name, part in (("train", manifest.train), ("validation", manifest.validation), ("test", manifest.test)):
        for r in part:
            seed = "-" if r.seed is None else str(r.seed)
            lines.append("\t".join([name, _rel(r.image_path, base), _rel(r.mask_path, base), r.lesion.value, r.provenance, seed]))
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path, base=None) -> SplitManifest:
    """Parse a manifest file; relative paths are resolved against ``base``."""
    base = None if base is None else Path(base)
    meta, parts = {}, {"train": [], "validation": [], "test": []}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
            continue
        cols = line.split("\t")
        if len(cols) != 6 or cols[0] not in parts:
            raise ContractError(f"{path}:{lineno}: malformed manifest line")
        name, img, mask, lesion, prov, seed = cols
        parent = prov.split(":", 1)[1] if prov.startswith("augmented:") else None
        parts[name].append(
            SampleRecord(_resolve(img, base), _resolve(mask, base), LesionClass.parse(lesion), parent,
                         None if seed == "-" else int(seed))
        )
    lesion = LesionClass.parse(meta.get("lesion") or next(r.lesion for p in parts.values() for r in p))
    manifest = SplitManifest(lesion, int(meta.get("seed", 0)), **parts)
    manifest.check(files=True)
    return manifest


def _resolve(p: str, base: Path | None) -> Path:
    path = Path(p)
    return path if base is None or path.is_absolute() else base / path


def load_pair(record: SampleRecord):
    return read_image(record.image_path), read_mask(record.mask_path)
