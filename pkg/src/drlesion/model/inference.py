from __future__ import annotations

import numpy as np
import torch

from ..exceptions import ContractError
from ..validation import check_probabilities

PROB_EPS = 1e-7


def to_tensor_batch(batch) -> torch.Tensor:
    """NHWC uint8 / [0, 1] float batch -> NCHW float32 tensor."""
    if isinstance(batch, torch.Tensor):
        arr = batch.detach().cpu().numpy()
    else:
        arr = np.asarray(batch)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ContractError(f"expected an N x H x W x 3 batch, got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(0, 3, 1, 2)


def forward(model, batch, chunk_size: int = 4) -> np.ndarray:
    """Run inference and return N x H x W x 1 probabilities strictly inside (0, 1).

    The spatial size must be divisible by the model's output stride.
    """
    x = to_tensor_batch(batch)
    stride = model.config.output_stride
    if x.shape[2] % stride or x.shape[3] % stride:
        raise ContractError(f"spatial size {tuple(x.shape[2:])} not divisible by output stride {stride}")
    was_training = model.training
    model.eval()
    outs = []
    try:
        with torch.no_grad():
            for i in range(0, x.shape[0], chunk_size):
                outs.append(model.predict_proba(x[i : i + chunk_size]))
    finally:
        model.train(was_training)
    probs = torch.cat(outs).permute(0, 2, 3, 1).numpy()
    return np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    """1 where probability >= threshold, else 0 (uint8)."""
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    p = check_probabilities(probs)
    return (p >= threshold).astype(np.uint8)
