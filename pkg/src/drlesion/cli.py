"""Command-line driver: preprocess -> split -> augment -> train -> evaluate -> infer -> fuse -> report.

Every artefact lives under one run directory (``--out``, default ``runs/default``)::

    run_manifest.json           configuration and seeds of every stage that ran
    preprocessed/               cropped images and masks, crops.tsv
    splits/<L>.tsv              train/validation/test manifest per lesion class
    splits/<L>.augmented.tsv    same, train list extended with augmented records
    augmented/<L>/              augmented image/mask files
    models/<L>/                 checkpoint.pt, epochs.jsonl, loss_curve.png, train_config.txt
    reports/<L>.json, <L>_roc.csv
    predictions/<L>/<stem>.png  binary masks from ``infer``
    fused/<stem>.png            bitmask composites (+ <stem>_overlay.png)
    report.md, report.json      summary table over all evaluated classes

Exit status: 0 on success, 1 on a contract/config/I-O error, 2 on usage errors.
``DRLESION_DATASET_ROOT`` overrides the default dataset root.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import cv2

from . import __version__
from .dataset import (
    AUGMENTATIONS_PER_IMAGE,
    LesionClass,
    build_training_set,
    find_mask,
    load_manifest,
    read_manifest,
    split,
    write_manifest,
)
from .exceptions import ConfigError, DRLesionError, NoForegroundWarning
from .fusion import ColorMap, fuse, render_overlay, write_composite
from .imaging.io import IMAGE_SUFFIXES, read_image, read_mask, write_image, write_mask
from .imaging.preprocess import PreprocessConfig, crop_pair, prepare_image
from .metrics import MetricReport, evaluate_class, render_table
from .model import ModelConfig, binarize, build_model, forward, load_checkpoint, save_checkpoint
from .training import TrainConfig, plot_loss_curve, read_train_config, train, write_epoch_log, write_train_config

log = logging.getLogger("drlesion")

ENV_DATASET_ROOT = "DRLESION_DATASET_ROOT"
MANIFEST_NAME = "run_manifest.json"


class Run:
    """The run directory and its manifest of completed stages."""

    def __init__(self, out: Path, force: bool = False):
        self.dir = Path(out)
        self.force = force
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path = self.dir / MANIFEST_NAME
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"tool": "drlesion", "version": __version__, "stages": {}}

    def record(self, key: str):
        return self.data["stages"].get(key)

    def up_to_date(self, key: str, config: dict, outputs) -> bool:
        rec = self.record(key)
        return (
            not self.force
            and rec is not None
            and rec.get("config") == config
            and all(Path(o).exists() for o in outputs)
        )

    def begin(self, key: str, outputs) -> None:
        """Remove stale outputs so a stage never leaves a partial mix behind."""
        self.data["stages"].pop(key, None)
        self.save()
        for o in outputs:
            o = Path(o)
            if o.is_dir():
                shutil.rmtree(o)
            elif o.exists():
                o.unlink()

    def finish(self, key: str, config: dict) -> None:
        self.data["stages"][key] = {"config": config}
        self.save()

    def save(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def preprocess_config(self) -> PreprocessConfig:
        rec = self.record("preprocess")
        return PreprocessConfig.from_dict(rec["config"]["preprocess"]) if rec else PreprocessConfig()


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _stage(run: Run, key: str, config: dict, outputs, fn) -> None:
    if run.up_to_date(key, config, outputs):
        print(f"{key}: up to date")
        return
    run.begin(key, outputs)
    fn()
    run.finish(key, config)
    print(f"{key}: done")


def _lesions(value: str) -> list[LesionClass]:
    if value.lower() == "all":
        return list(LesionClass)
    return [LesionClass.parse(v) for v in value.split(",")]


def _dataset_root(args) -> Path:
    root = args.root or os.environ.get(ENV_DATASET_ROOT)
    if not root:
        raise ConfigError(f"no dataset root given (use --root or set {ENV_DATASET_ROOT})")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    return root


# -- stages -----------------------------------------------------------------


def cmd_preprocess(args, run: Run) -> None:
    root = _dataset_root(args)
    pre = PreprocessConfig(
        crop_threshold=args.crop_threshold,
        crop_margin=args.crop_margin,
        clahe=not args.no_clahe,
        clahe_clip_limit=args.clahe_clip,
        clahe_tile_grid=tuple(args.clahe_tiles),
    )
    out = run.dir / "preprocessed"
    config = {"dataset_root": str(root), "preprocess": pre.to_dict()}

    def work():
        image_dir = root / "images"
        if not image_dir.is_dir():
            raise FileNotFoundError(f"{image_dir} does not exist")
        images = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        rows = ["stem\ttop\tleft\theight\twidth\tforeground"]
        for img_path in images:
            masks = {}
            for lesion in LesionClass:
                mask_dir = root / "masks" / lesion.value
                mask_path = find_mask(mask_dir, img_path.stem, lesion) if mask_dir.is_dir() else None
                if mask_path is not None:
                    masks[lesion] = read_mask(mask_path)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NoForegroundWarning)
                img, cropped, res = crop_pair(read_image(img_path), masks, pre)
            if not res.foreground_found:
                log.warning("%s: no foreground above threshold, kept full frame", img_path.name)
            write_image(out / "images" / f"{img_path.stem}.png", img)
            for lesion, m in cropped.items():
                write_mask(out / "masks" / lesion.value / f"{img_path.stem}.png", m)
            r = res.rect
            rows.append(f"{img_path.stem}\t{r.top}\t{r.left}\t{r.height}\t{r.width}\t{int(res.foreground_found)}")
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "crops.tsv").write_text("\n".join(rows) + "\n")

    _stage(run, "preprocess", config, [out], work)


def _split_source(args, run: Run) -> Path:
    if args.root:
        return _dataset_root(args)
    pre = run.dir / "preprocessed"
    if pre.is_dir():
        return pre
    if os.environ.get(ENV_DATASET_ROOT):
        return _dataset_root(args)
    raise ConfigError("no --root given and no preprocessed data in the run directory")


def cmd_split(args, run: Run) -> None:
    source = _split_source(args, run)
    ratios = tuple(args.ratios)
    for lesion in _lesions(args.lesion):
        out = run.dir / "splits" / f"{lesion.value}.tsv"
        config = {"source": _rel(source, run.dir), "lesion": lesion.value, "seed": args.seed, "ratios": list(ratios),
                  "upstream": _digest(run.record("preprocess"))}

        def work(lesion=lesion, out=out):
            skipped: list = []
            records = load_manifest(source, lesion, skipped)
            manifest = split(records, ratios, args.seed)
            write_manifest(out, manifest, base=run.dir)
            tr, va, te = manifest.counts()
            print(f"{lesion.value}: train={tr} validation={va} test={te} skipped={len(skipped)}")

        _stage(run, f"split:{lesion.value}", config, [out], work)


def cmd_augment(args, run: Run) -> None:
    for lesion in _lesions(args.lesion):
        src = run.dir / "splits" / f"{lesion.value}.tsv"
        if not src.exists():
            raise ConfigError(f"no split for {lesion.value}; run 'split' first")
        out_dir = run.dir / "augmented" / lesion.value
        out_manifest = run.dir / "splits" / f"{lesion.value}.augmented.tsv"
        config = {"per_image": args.per_image, "upstream": _digest(run.record(f"split:{lesion.value}"))}

        def work(src=src, out_dir=out_dir, out_manifest=out_manifest, lesion=lesion):
            manifest = read_manifest(src, base=run.dir)
            augmented = build_training_set(manifest, out_dir, args.per_image)
            write_manifest(out_manifest, augmented, base=run.dir)
            print(f"{lesion.value}: {len(augmented.augmented)} augmented records")

        _stage(run, f"augment:{lesion.value}", config, [out_dir, out_manifest], work)


def _train_config(args) -> TrainConfig:
    cfg = read_train_config(args.config) if args.config else TrainConfig()
    overrides = {
        "max_epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "image_size": args.image_size,
        "early_stop_patience": args.patience,
        "seed": args.seed,
    }
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def _model_config(args, image_size: int) -> ModelConfig:
    kwargs = {
        "input_side": image_size,
        "backbone": args.backbone,
        "pretrained": not args.no_pretrained,
        "output_stride": args.output_stride,
        "freeze_backbone": args.freeze_backbone,
    }
    if args.aspp_rates:
        kwargs["aspp_rates"] = tuple(args.aspp_rates)
    for name in ("aspp_channels", "decoder_channels", "decoder_low_level_channels", "tiny_width", "dropout"):
        value = getattr(args, name)
        if value is not None:
            kwargs[name] = value
    return ModelConfig(**kwargs)


def cmd_train(args, run: Run) -> None:
    tcfg = _train_config(args)
    mcfg = _model_config(args, tcfg.image_size)
    pre = replace(run.preprocess_config(), image_size=tcfg.image_size)
    for lesion in _lesions(args.lesion):
        aug = run.dir / "splits" / f"{lesion.value}.augmented.tsv"
        plain = run.dir / "splits" / f"{lesion.value}.tsv"
        src = aug if aug.exists() else plain
        if not src.exists():
            raise ConfigError(f"no split for {lesion.value}; run 'split' first")
        out = run.dir / "models" / lesion.value
        upstream = run.record(f"augment:{lesion.value}") if src == aug else run.record(f"split:{lesion.value}")
        config = {
            "train": {k: getattr(tcfg, k) for k in tcfg.__dataclass_fields__},
            "model": mcfg.to_dict(),
            "preprocess": pre.to_dict(),
            "manifest": _rel(src, run.dir),
            "upstream": _digest(upstream),
        }

        def work(src=src, out=out, lesion=lesion):
            manifest = read_manifest(src, base=run.dir)
            model = build_model(mcfg, seed=tcfg.seed)
            ckpt = out / "checkpoint.pt"
            model, logs = train(model, manifest, tcfg, pre, checkpoint_path=ckpt)
            save_checkpoint(ckpt, model, pre, extra={"lesion": lesion.value, "epochs_run": len(logs)})
            write_epoch_log(out / "epochs.jsonl", logs)
            write_train_config(out / "train_config.txt", tcfg)
            if logs:
                plot_loss_curve(logs, out / "loss_curve.png", title=f"{lesion.value}: training and validation loss")
            best = min(logs, key=lambda e: e.val_loss) if logs else None
            print(f"{lesion.value}: {len(logs)} epochs" + (f", best val_loss {best.val_loss:.6f} at epoch {best.epoch}" if best else ""))

        _stage(run, f"train:{lesion.value}", config, [out], work)


def _requested_preprocess(args, stored: PreprocessConfig | None) -> PreprocessConfig | None:
    overrides = {}
    if args.image_size is not None:
        overrides["image_size"] = args.image_size
    if args.clahe_clip is not None:
        overrides["clahe_clip_limit"] = args.clahe_clip
    if args.clahe_tiles is not None:
        overrides["clahe_tile_grid"] = tuple(args.clahe_tiles)
    if args.no_clahe:
        overrides["clahe"] = False
    if not overrides:
        return None
    return replace(stored or PreprocessConfig(), **overrides)


def cmd_evaluate(args, run: Run) -> None:
    for lesion in _lesions(args.lesion):
        ckpt = run.dir / "models" / lesion.value / "checkpoint.pt"
        if not ckpt.exists():
            raise ConfigError(f"no trained model for {lesion.value}; run 'train' first")
        src = run.dir / "splits" / f"{lesion.value}.tsv"
        report_path = run.dir / "reports" / f"{lesion.value}.json"
        roc_path = run.dir / "reports" / f"{lesion.value}_roc.csv"
        request = _requested_preprocess(args, None)
        config = {
            "threshold": args.threshold,
            "average": args.average,
            "request": None if request is None else request.to_dict(),
            "upstream": _digest(run.record(f"train:{lesion.value}")),
        }

        def work(ckpt=ckpt, src=src, report_path=report_path, roc_path=roc_path, lesion=lesion):
            model = load_checkpoint(ckpt)
            requested = _requested_preprocess(args, model.preprocess)
            manifest = read_manifest(src, base=run.dir)
            report = evaluate_class(model, manifest.test, args.threshold, requested, args.average)
            report.save(report_path)
            if report.roc is not None:
                report.roc.write_csv(roc_path)
            print(f"{lesion.value}: accuracy={report.accuracy:.5f} iou={report.iou:.5f} f1={report.f1:.5f}")

        _stage(run, f"evaluate:{lesion.value}", config, [report_path, roc_path], work)


def _input_images(args, run: Run) -> list[Path]:
    src = Path(args.images) if args.images else run.dir / "preprocessed" / "images"
    if src.is_file():
        return [src]
    if not src.is_dir():
        raise FileNotFoundError(f"no input images at {src}")
    return sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def cmd_infer(args, run: Run) -> None:
    images = _input_images(args, run)
    for lesion in _lesions(args.lesion):
        ckpt = run.dir / "models" / lesion.value / "checkpoint.pt"
        if not ckpt.exists():
            raise ConfigError(f"no trained model for {lesion.value}; run 'train' first")
        out = run.dir / "predictions" / lesion.value
        config = {
            "images": [_rel(p, run.dir) for p in images],
            "threshold": args.threshold,
            "upstream": _digest(run.record(f"train:{lesion.value}")),
        }

        def work(ckpt=ckpt, out=out):
            model = load_checkpoint(ckpt)
            pre = model.preprocess or PreprocessConfig(image_size=model.config.input_side)
            out.mkdir(parents=True, exist_ok=True)
            for p in images:
                probs = forward(model, prepare_image(read_image(p), pre)[None])[0, ..., 0]
                write_mask(out / f"{p.stem}.png", binarize(probs, args.threshold))

        _stage(run, f"infer:{lesion.value}", config, [out], work)


def _parse_mask_args(items) -> dict:
    masks = {}
    for item in items:
        key, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--mask expects LESION=PATH, got {item!r}")
        masks[LesionClass.parse(key)] = Path(path)
    return masks


def cmd_fuse(args, run: Run) -> None:
    cmap = ColorMap()
    if args.mask:
        masks = _parse_mask_args(args.mask)
        out = Path(args.output) if args.output else run.dir / "fused" / "composite.png"
        comp = fuse({k: read_mask(v) for k, v in masks.items()})
        write_composite(out, comp, args.layout)
        if args.base:
            base = read_image(args.base)
            if base.shape[:2] != comp.shape:
                base = cv2.resize(base, comp.shape[::-1], interpolation=cv2.INTER_LINEAR)
            write_image(out.with_name(out.stem + "_overlay.png"), render_overlay(base, comp, cmap, args.alpha))
        run.finish("fuse", {"masks": {k.value: str(v) for k, v in masks.items()}, "output": str(out)})
        print(f"composite written to {out}")
        return

    pred_dir = run.dir / "predictions"
    if not pred_dir.is_dir():
        raise ConfigError("no predictions in the run directory; run 'infer' first or pass --mask")
    lesion_dirs = {LesionClass.parse(d.name): d for d in sorted(pred_dir.iterdir()) if d.is_dir()}
    stems = sorted({p.stem for d in lesion_dirs.values() for p in d.glob("*.png")})
    out = run.dir / "fused"
    config = {
        "lesions": sorted(k.value for k in lesion_dirs),
        "stems": stems,
        "layout": args.layout,
        "alpha": args.alpha,
        "upstream": _digest([run.record(f"infer:{k.value}") for k in sorted(lesion_dirs)]),
    }
    base_dir = Path(args.base) if args.base else run.dir / "preprocessed" / "images"

    def work():
        for stem in stems:
            masks = {k: read_mask(d / f"{stem}.png") for k, d in lesion_dirs.items() if (d / f"{stem}.png").exists()}
            comp = fuse(masks)
            target = out / (stem if args.layout == "planes" else f"{stem}.png")
            write_composite(target, comp, args.layout)
            base_path = next((base_dir / f"{stem}{s}" for s in IMAGE_SUFFIXES if (base_dir / f"{stem}{s}").exists()), None)
            if base_path is not None:
                base = read_image(base_path)
                if base.shape[:2] != comp.shape:
                    base = cv2.resize(base, comp.shape[::-1], interpolation=cv2.INTER_LINEAR)
                write_image(out / f"{stem}_overlay.png", render_overlay(base, comp, cmap, args.alpha))
        out.mkdir(parents=True, exist_ok=True)
        print(f"fused {len(stems)} image(s)")

    _stage(run, "fuse", config, [out], work)


def cmd_report(args, run: Run) -> None:
    rep_dir = run.dir / "reports"
    paths = sorted(rep_dir.glob("*.json")) if rep_dir.is_dir() else []
    if not paths:
        raise ConfigError("no per-class reports found; run 'evaluate' first")
    reports = [MetricReport.load(p) for p in paths]
    table = render_table(reports)
    (run.dir / "report.md").write_text("# Evaluation metrics per lesion class\n\n" + table)
    summary = {"version": reports[0].version, "classes": {r.lesion.value: r.to_dict() for r in reports}}
    (run.dir / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    run.finish("report", {"classes": sorted(summary["classes"])})
    print(table, end="")


def _rel(p: Path, base: Path) -> str:
    try:
        return Path(p).resolve().relative_to(Path(base).resolve()).as_posix()
    except ValueError:
        return str(p)


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drlesion", description="Per-lesion DeepLabv3+ segmentation of fundus images")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="runs/default", help="run directory (default: %(default)s)")
    common.add_argument("--force", action="store_true", help="redo the stage even if it is up to date")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="crop images and masks")
    p.add_argument("--root", help=f"dataset root (default: ${ENV_DATASET_ROOT})")
    p.add_argument("--crop-threshold", type=float, default=PreprocessConfig.crop_threshold)
    p.add_argument("--crop-margin", type=int, default=0)
    p.add_argument("--clahe-clip", type=float, default=PreprocessConfig.clahe_clip_limit)
    p.add_argument("--clahe-tiles", type=int, nargs=2, default=list(PreprocessConfig.clahe_tile_grid), metavar=("ROWS", "COLS"))
    p.add_argument("--no-clahe", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", parents=[common], help="70/20/10 split per lesion class")
    p.add_argument("--root", help="dataset root (default: the run's preprocessed data)")
    p.add_argument("--lesion", default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", type=float, nargs=3, default=[0.7, 0.2, 0.1], metavar=("TRAIN", "VAL", "TEST"))
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("augment", parents=[common], help="rotation/flip augmentation of the training split")
    p.add_argument("--lesion", default="all")
    p.add_argument("--per-image", type=int, default=AUGMENTATIONS_PER_IMAGE)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", parents=[common], help="train one binary model per lesion class")
    p.add_argument("--lesion", default="all")
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--image-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--backbone", default="efficientnet-b0")
    p.add_argument("--no-pretrained", action="store_true")
    p.add_argument("--freeze-backbone", action="store_true")
    p.add_argument("--output-stride", type=int, default=16)
    p.add_argument("--aspp-rates", type=int, nargs="+")
    p.add_argument("--aspp-channels", type=int)
    p.add_argument("--decoder-channels", type=int)
    p.add_argument("--decoder-low-level-channels", type=int)
    p.add_argument("--tiny-width", type=int)
    p.add_argument("--dropout", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="metrics on the test split")
    p.add_argument("--lesion", default="all")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--average", choices=["micro", "macro"], default="micro")
    p.add_argument("--image-size", type=int)
    p.add_argument("--clahe-clip", type=float)
    p.add_argument("--clahe-tiles", type=int, nargs=2)
    p.add_argument("--no-clahe", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("infer", parents=[common], help="predict binary masks")
    p.add_argument("--lesion", default="all")
    p.add_argument("--images", help="image file or folder (default: the run's preprocessed images)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("fuse", parents=[common], help="combine per-class masks into composites")
    p.add_argument("--mask", action="append", metavar="LESION=PATH", help="fuse explicit mask files instead of predictions")
    p.add_argument("--output", help="output path when --mask is used")
    p.add_argument("--base", help="base image (with --mask) or folder of base images for overlays")
    p.add_argument("--layout", choices=["indexed", "planes"], default="indexed")
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("report", parents=[common], help="summary table over evaluated classes")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(Path(args.out), force=args.force)
        args.func(args, run)
    except (DRLesionError, OSError) as exc:
        print(f"drlesion {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
