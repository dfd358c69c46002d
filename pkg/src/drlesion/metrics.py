"""Pixel-level segmentation metrics, error metrics, ROC/AUC and per-class reports.

Definitions (version ``metrics-v1``):

* accuracy    = (TP + TN) / (TP + TN + FP + FN)
* specificity = TN / (TN + FP)
* sensitivity = TP / (TP + FN)                       (recall)
* precision   = TP / (TP + FP)
* f1          = 2 * precision * recall / (precision + recall) = 2TP / (2TP + FP + FN)
* iou         = TP / (TP + FP + FN)                  (foreground overlap / union)
* mae, mse    = mean |y - p| and mean (y - p)^2 over probabilities p

A ratio with a zero denominator is reported as 1.0 when the situation is
vacuous (e.g. no positives in the truth and none predicted) and 0.0
otherwise; either way the metric name is listed in ``degenerate``.
Confusion counts are pooled over all test pixels (micro average) unless
``average="macro"`` is requested.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataset import LesionClass, load_pair
from .exceptions import ContractError, UndefinedMetricError
from .validation import check_binary_mask, check_probabilities

METRICS_VERSION = "metrics-v1"
RATIO_NAMES = ("accuracy", "specificity", "sensitivity", "precision", "f1", "iou")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ContractError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def confusion(pred, truth) -> ConfusionCounts:
    """Tally TP/TN/FP/FN between two binary masks; lesion (1) is positive."""
    p = check_binary_mask(pred, "pred").astype(bool)
    t = check_binary_mask(truth, "truth").astype(bool)
    if p.shape != t.shape:
        raise ContractError(f"mask shapes differ: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


@dataclass(frozen=True)
class RatioMetrics:
    accuracy: float
    specificity: float
    sensitivity: float
    precision: float
    f1: float
    iou: float
    degenerate: tuple[str, ...] = ()


def _ratio(num: int, den: int, vacuous: bool, name: str, flags: list) -> float:
    if den == 0:
        flags.append(name)
        return 1.0 if vacuous else 0.0
    return num / den


def ratio_metrics(c: ConfusionCounts) -> RatioMetrics:
    if c.total <= 0:
        raise ContractError("confusion counts are empty")
    flags: list[str] = []
    tp, tn, fp, fn = c.tp, c.tn, c.fp, c.fn
    return RatioMetrics(
        accuracy=(tp + tn) / c.total,
        specificity=_ratio(tn, tn + fp, fn == 0, "specificity", flags),
        sensitivity=_ratio(tp, tp + fn, fp == 0, "sensitivity", flags),
        precision=_ratio(tp, tp + fp, fn == 0, "precision", flags),
        f1=_ratio(2 * tp, 2 * tp + fp + fn, True, "f1", flags),
        iou=_ratio(tp, tp + fp + fn, True, "iou", flags),
        degenerate=tuple(flags),
    )


def error_metrics(pred, truth) -> tuple[float, float]:
    """Mean absolute and mean squared error between two equally sized arrays."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if p.size != y.size:
        raise ContractError(f"element counts differ: {p.size} vs {y.size}")
    if p.size == 0:
        raise ContractError("need at least one element")
    d = y - p
    return float(np.mean(np.abs(d))), float(np.mean(d * d))


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def write_csv(self, path, max_points: int | None = 2000) -> None:
        idx = np.arange(len(self.fpr))
        if max_points is not None and len(idx) > max_points:
            idx = np.unique(np.linspace(0, len(idx) - 1, max_points).round().astype(int))
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            for i in idx:
                w.writerow([repr(float(self.thresholds[i])), repr(float(self.fpr[i])), repr(float(self.tpr[i]))])


def _roc_counts(scores: np.ndarray, labels: np.ndarray):
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[last_of_run]
    fps = (last_of_run + 1) - tps
    return s[last_of_run], np.r_[0, tps], np.r_[0, fps]


def roc_auc(scores, labels) -> RocCurve:
    """ROC curve over the distinct score thresholds and its trapezoidal area.

    Ties in the scores produce diagonal segments, so the area equals the
    Mann-Whitney probability with ties counted as one half.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.size != y.size:
        raise ContractError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be binary")
    y = y.astype(np.int64)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs at least one positive and one negative label")
    thr, tps, fps = _roc_counts(s, y)
    # twice the area in integer units keeps the sum exact
    area2 = int(np.sum(np.diff(fps) * (tps[1:] + tps[:-1]), dtype=np.int64))
    auc = area2 / (2 * n_pos * n_neg)
    return RocCurve(np.r_[np.inf, thr], fps / n_neg, tps / n_pos, auc)


@dataclass
class MetricReport:
    lesion: LesionClass
    accuracy: float
    specificity: float
    sensitivity: float
    precision: float
    f1: float
    iou: float
    mae: float
    mse: float
    auc: float | None
    counts: ConfusionCounts
    n_images: int
    threshold: float = 0.5
    average: str = "micro"
    degenerate: tuple[str, ...] = ()
    version: str = METRICS_VERSION
    roc: RocCurve | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "roc"}
        d["counts"] = asdict(self.counts)
        d["lesion"] = self.lesion.value
        d["degenerate"] = list(self.degenerate)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        if d.get("version") != METRICS_VERSION:
            raise ContractError(f"unsupported metric report version {d.get('version')!r}")
        d["lesion"] = LesionClass.parse(d["lesion"])
        d["counts"] = ConfusionCounts(**d["counts"])
        d["degenerate"] = tuple(d.get("degenerate", ()))
        return cls(**d)

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def report_from_arrays(lesion, probs_list, truth_list, threshold: float = 0.5, average: str = "micro") -> MetricReport:
    """Build a report from per-image probability maps and ground-truth masks."""
    if average not in ("micro", "macro"):
        raise ContractError(f"average must be 'micro' or 'macro', got {average!r}")
    if not probs_list or len(probs_list) != len(truth_list):
        raise ContractError("need the same, non-zero number of predictions and truths")
    lesion = LesionClass.parse(lesion)
    per_image, abs_sum, sq_sum, n = [], 0.0, 0.0, 0
    all_probs, all_truth = [], []
    for probs, truth in zip(probs_list, truth_list):
        p = check_probabilities(np.squeeze(np.asarray(probs)))
        t = check_binary_mask(truth, "truth")
        if p.shape != t.shape:
            raise ContractError(f"prediction shape {p.shape} differs from truth {t.shape}")
        pred = (p >= threshold).astype(np.uint8)
        per_image.append(confusion(pred, t))
        d = t - p
        abs_sum += float(np.abs(d).sum())
        sq_sum += float((d * d).sum())
        n += t.size
        all_probs.append(p.ravel())
        all_truth.append(t.ravel())
    total = sum(per_image, ConfusionCounts())
    if average == "micro":
        r = ratio_metrics(total)
        ratios = {k: getattr(r, k) for k in RATIO_NAMES}
        degenerate = r.degenerate
    else:
        rs = [ratio_metrics(c) for c in per_image]
        ratios = {k: float(np.mean([getattr(x, k) for x in rs])) for k in RATIO_NAMES}
        degenerate = tuple(sorted({f for x in rs for f in x.degenerate}))
    try:
        curve = roc_auc(np.concatenate(all_probs), np.concatenate(all_truth))
        auc = curve.auc
    except UndefinedMetricError:
        curve, auc = None, None
    return MetricReport(
        lesion=lesion, **ratios, mae=abs_sum / n, mse=sq_sum / n, auc=auc, counts=total,
        n_images=len(per_image), threshold=threshold, average=average, degenerate=degenerate, roc=curve,
    )


def evaluate_class(model, test, threshold: float = 0.5, preprocess=None, average: str = "micro") -> MetricReport:
    """Evaluate ``model`` on the test records of a single lesion class.

    ``model`` is a DeepLabV3Plus (probabilities come from :func:`forward`) or any
    object with a ``predict_proba(batch) -> N x H x W [x 1]`` method. When the
    model carries checkpoint preprocessing settings, ``preprocess`` must agree.
    """
    from .imaging.preprocess import PreprocessConfig, prepare_pair
    from .model.checkpoint import check_preprocess
    from .model.deeplab import DeepLabV3Plus
    from .model.inference import forward

    test = list(test)
    if not test:
        raise ContractError("test set is empty")
    lesions = {r.lesion for r in test}
    if len(lesions) != 1:
        raise ContractError("test records mix lesion classes")
    stored = getattr(model, "preprocess", None)
    if preprocess is None:
        preprocess = stored or PreprocessConfig()
    elif stored is not None:
        check_preprocess(stored, preprocess)

    probs_list, truth_list = [], []
    for rec in test:
        img, mask = load_pair(rec)
        img, mask = prepare_pair(img, mask, preprocess)
        if isinstance(model, DeepLabV3Plus):
            probs = forward(model, img[None])[0, ..., 0]
        else:
            probs = np.asarray(model.predict_proba(img[None]), dtype=np.float64).reshape(mask.shape)
        probs_list.append(probs)
        truth_list.append(mask)
    return report_from_arrays(lesions.pop(), probs_list, truth_list, threshold, average)


_TABLE_ROWS = [
    ("Accuracy", "accuracy"),
    ("Specificity", "specificity"),
    ("Sensitivity", "sensitivity"),
    ("F1 Score", "f1"),
    ("IoU", "iou"),
    ("MAE", "mae"),
    ("MSE", "mse"),
    ("AUC", "auc"),
]


def render_table(reports) -> str:
    """Markdown table with one column per lesion class."""
    reports = sorted(reports, key=lambda r: list(LesionClass).index(r.lesion))
    head = "| Metric | " + " | ".join(r.lesion.value for r in reports) + " |"
    sep = "|---|" + "---|" * len(reports)
    rows = []
    for label, key in _TABLE_ROWS:
        vals = [getattr(r, key) for r in reports]
        rows.append(f"| {label} | " + " | ".join("n/a" if v is None else f"{v:.5f}" for v in vals) + " |")
    return "\n".join([head, sep, *rows]) + "\n"
