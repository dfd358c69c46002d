"""Per-lesion binary training: BCE + Adam with early stopping on val loss."""

from __future__ import annotations

import copy
import enum
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import SplitManifest, load_pair
from .exceptions import ConfigError, ContractError, TrainingError
from .imaging.preprocess import PreprocessConfig, prepare_pair
from .model.checkpoint import save_checkpoint
from .model.inference import to_tensor_batch

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    image_size: int = 512
    batch_size: int = 4
    max_epochs: int = 30
    loss: str = "BinaryCrossentropy"
    activation: str = "sigmoid"
    optimizer: str = "Adam"
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    early_stop_monitor: str = "val_loss"
    early_stop_patience: int = 5
    min_delta: float = 0.0
    restore_best: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.loss != "BinaryCrossentropy":
            raise ConfigError(f"only BinaryCrossentropy loss is supported, got {self.loss!r}")
        if self.activation != "sigmoid":
            raise ConfigError(f"only sigmoid activation is supported, got {self.activation!r}")
        if self.optimizer != "Adam":
            raise ConfigError(f"only the Adam optimizer is supported, got {self.optimizer!r}")
        if self.early_stop_monitor != "val_loss":
            raise ConfigError("early stopping can only monitor val_loss")
        if self.batch_size < 1 or self.image_size < 1 or self.max_epochs < 0 or self.early_stop_patience < 0:
            raise ConfigError("batch_size and image_size must be >= 1; max_epochs and patience >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")


# Config file keys follow the row names of the hyper-parameter table.
_FILE_KEYS = {
    "image_size": "image_size",
    "batch_size": "batch_size",
    "epoch": "max_epochs",
    "loss_function": "loss",
    "activation_function": "activation",
    "optimizer": "optimizer",
    "learning_rate": "learning_rate",
    "early_stopping_monitor": "early_stop_monitor",
    "early_stopping_patience": "early_stop_patience",
}


def write_train_config(path, cfg: TrainConfig) -> None:
    inverse = {v: k for k, v in _FILE_KEYS.items()}
    lines = [f"{inverse.get(f.name, f.name)} = {getattr(cfg, f.name)}" for f in fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_train_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Parse a flat ``key = value`` file; unknown keys are an error."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    updates = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            key, sep, value = line.partition(":")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key = key.strip().lower().replace(" ", "_")
        name = _FILE_KEYS.get(key, key)
        if name not in types:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        updates[name] = _coerce(value.strip(), types[name], f"{path}:{lineno}")
    return replace(base or TrainConfig(), **updates)


def _coerce(value: str, typ: str, where: str):
    try:
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        if typ == "bool":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {typ}") from None
    return value


def binary_cross_entropy(pred, target, eps: float = BCE_EPS) -> float:
    """Mean binary cross-entropy with predictions clamped to [eps, 1 - eps]."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(target, dtype=np.float64).ravel()
    if p.size != y.size:
        raise ContractError(f"prediction and target sizes differ: {p.size} vs {y.size}")
    if p.size == 0:
        raise ContractError("cannot compute a loss over zero elements")
    p = np.clip(p, eps, 1.0 - eps)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


class Decision(str, enum.Enum):
    CONTINUE = "continue"
    STOP = "stop"


@dataclass(frozen=True)
class EarlyStopState:
    patience: int = 5
    min_delta: float = 0.0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    epoch: int = 0


def early_stopping_step(state: EarlyStopState, val_loss: float):
    """Feed one epoch's validation loss; epochs are counted from 1.

    A loss counts as an improvement only if it beats the best by more than
    ``min_delta``. Training stops once ``patience`` epochs in a row brought
    no improvement.
    """
    if not math.isfinite(val_loss):
        raise ContractError(f"validation loss must be finite, got {val_loss}")
    epoch = state.epoch + 1
    if val_loss < state.best_val_loss - state.min_delta:
        state = replace(state, best_val_loss=val_loss, best_epoch=epoch, epochs_since_improvement=0, epoch=epoch)
    else:
        state = replace(state, epochs_since_improvement=state.epochs_since_improvement + 1, epoch=epoch)
    decision = Decision.STOP if state.epochs_since_improvement >= state.patience else Decision.CONTINUE
    return state, decision


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    wall_time: float
    improved: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def write_epoch_log(path, logs) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(entry.to_json() + "\n" for entry in logs))


def read_epoch_log(path) -> list[EpochLog]:
    return [EpochLog(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def plot_loss_curve(logs, path, title: str = "Training and validation loss") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [e.epoch for e in logs]
    ax.plot(epochs, [e.train_loss for e in logs], label="train loss")
    ax.plot(epochs, [e.val_loss for e in logs], label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("binary cross-entropy")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _mask_tensor(masks) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(masks, dtype=np.float32))[:, None]


def batch_loss(model, images, masks) -> torch.Tensor:
    """Mean per-pixel BCE computed from logits (numerically stable)."""
    x = images if isinstance(images, torch.Tensor) else to_tensor_batch(images)
    y = masks if isinstance(masks, torch.Tensor) else _mask_tensor(masks)
    logits = model(x.to(next(model.parameters()).dtype))
    return F.binary_cross_entropy_with_logits(logits, y.to(logits.dtype))


def evaluate_loss(model, images, masks, batch_size: int = 4) -> float:
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    try:
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                x, y = images[i : i + batch_size], masks[i : i + batch_size]
                total += batch_loss(model, x, y).item() * np.asarray(y).size
                count += np.asarray(y).size
    finally:
        model.train(was_training)
    return total / count


def fit_arrays(model, train_images, train_masks, val_images, val_masks, cfg: TrainConfig,
               checkpoint_path=None, train_ids=None):
    """Train on in-memory NHWC images and NHW {0,1} masks.

    Returns ``(model, logs)``. With ``restore_best`` the model ends up holding
    the parameters of the epoch with the lowest validation loss.
    """
    train_images, train_masks = np.asarray(train_images), np.asarray(train_masks)
    val_images, val_masks = np.asarray(val_images), np.asarray(val_masks)
    if len(train_images) == 0:
        raise ConfigError("training set is empty")
    if len(val_images) == 0:
        raise ConfigError("validation set is empty")
    if len(train_images) != len(train_masks) or len(val_images) != len(val_masks):
        raise ContractError("image and mask counts differ")
    ids = list(train_ids) if train_ids is not None else [str(i) for i in range(len(train_images))]

    torch.manual_seed(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(
        params, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_epsilon
    )
    state = EarlyStopState(patience=cfg.early_stop_patience, min_delta=cfg.min_delta)
    best_params = None
    logs: list[EpochLog] = []
    n = len(train_images)

    for epoch in range(1, cfg.max_epochs + 1):
        start = time.perf_counter()
        model.train()
        order = np.random.default_rng(cfg.seed + epoch).permutation(n)
        total, count = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            opt.zero_grad()
            loss = batch_loss(model, train_images[idx], train_masks[idx])
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at epoch {epoch} on batch {[ids[j] for j in idx]}"
                )
            loss.backward()
            opt.step()
            pixels = train_masks[idx].size
            total += loss.item() * pixels
            count += pixels
        train_loss = total / count
        val_loss = evaluate_loss(model, val_images, val_masks, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        state, decision = early_stopping_step(state, val_loss)
        improved = state.best_epoch == epoch
        if improved:
            best_params = copy.deepcopy(model.state_dict())
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, extra={"epoch": epoch, "val_loss": val_loss})
        entry = EpochLog(epoch, train_loss, val_loss, time.perf_counter() - start, improved)
        logs.append(entry)
        log.info("epoch %d train_loss=%.6f val_loss=%.6f", epoch, train_loss, val_loss)
        if decision is Decision.STOP:
            log.info("early stopping at epoch %d (best epoch %d)", epoch, state.best_epoch)
            break

    if cfg.restore_best and best_params is not None:
        model.load_state_dict(best_params)
    model.eval()
    return model, logs


def load_arrays(records, preprocess: PreprocessConfig):
    images, masks = [], []
    for rec in records:
        img, mask = load_pair(rec)
        img, mask = prepare_pair(img, mask, preprocess)
        images.append(img)
        masks.append(mask)
    return np.stack(images), np.stack(masks)


def train(model, split: SplitManifest, cfg: TrainConfig, preprocess: PreprocessConfig | None = None,
          checkpoint_path=None):
    """Train ``model`` on a (usually augmented) split; returns ``(model, logs)``."""
    preprocess = preprocess or PreprocessConfig(image_size=cfg.image_size)
    if preprocess.image_size != cfg.image_size:
        raise ConfigError(f"preprocess image_size {preprocess.image_size} != train image_size {cfg.image_size}")
    if cfg.image_size % model.config.output_stride:
        raise ConfigError(f"image_size {cfg.image_size} not divisible by output stride {model.config.output_stride}")
    if not split.train:
        raise ConfigError("training split is empty")
    if not split.validation:
        raise ConfigError("validation split is empty")
    model.preprocess = preprocess
    if cfg.max_epochs == 0:
        return model, []
    x_train, y_train = load_arrays(split.train, preprocess)
    x_val, y_val = load_arrays(split.validation, preprocess)
    return fit_arrays(
        model, x_train, y_train, x_val, y_val, cfg,
        checkpoint_path=checkpoint_path, train_ids=[r.stem for r in split.train],
    )
