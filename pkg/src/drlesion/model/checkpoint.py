"""Versioned checkpoints: parameters + model config + preprocessing settings."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import torch

from ..exceptions import ConfigError, ConfigMismatchError
from ..imaging.preprocess import PreprocessConfig
from .config import ModelConfig
from .deeplab import DeepLabV3Plus, build_model

CHECKPOINT_FORMAT = "drlesion-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: DeepLabV3Plus, preprocess: PreprocessConfig | None = None, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    preprocess = preprocess or model.preprocess
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "preprocess": None if preprocess is None else preprocess.to_dict(),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(
    path,
    expected_config: ModelConfig | None = None,
    expected_preprocess: PreprocessConfig | None = None,
) -> DeepLabV3Plus:
    """Rebuild a model from ``path``.

    Raises ConfigMismatchError when the stored architecture or load-time
    preprocessing differs from the expected one.
    """
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a checkpoint written by this package")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig.from_dict(payload["model_config"])
    if expected_config is not None and expected_config.architecture_view() != cfg.architecture_view():
        raise ConfigMismatchError(f"checkpoint model config {cfg} differs from requested {expected_config}")
    stored_pre = None if payload["preprocess"] is None else PreprocessConfig.from_dict(payload["preprocess"])
    if expected_preprocess is not None and stored_pre is not None:
        check_preprocess(stored_pre, expected_preprocess)
    model = build_model(replace(cfg, pretrained=False))
    model.load_state_dict(payload["state_dict"])
    model.preprocess = stored_pre
    model.eval()
    return model


def check_preprocess(stored: PreprocessConfig, requested: PreprocessConfig) -> None:
    if stored.load_time_view() != requested.load_time_view():
        raise ConfigMismatchError(
            f"preprocessing mismatch: checkpoint used {stored.load_time_view()}, request uses {requested.load_time_view()}"
        )
