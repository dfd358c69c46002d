"""Encoders returning a stride-4 low-level map and a high-level map.

The high-level map sits at the configured output stride: stride-2 stages
beyond it are turned into dilated convolutions, the usual DeepLab recipe.
"""

from __future__ import annotations

import torch
from torch import nn

from ..exceptions import ConfigError
from .config import ModelConfig

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _stage_stride(stage: nn.Module) -> int:
    return max((m.stride[0] for m in stage.modules() if isinstance(m, nn.Conv2d)), default=1)


def _dilate_stages(stages: nn.Sequential, output_stride: int) -> int:
    """Replace strides past ``output_stride`` with dilation; return the index of
    the last stage whose output is at stride 4."""
    stride, dilation, low_idx = 1, 1, None
    for i, stage in enumerate(stages):
        convs = [m for m in stage.modules() if isinstance(m, nn.Conv2d)]
        s = _stage_stride(stage)
        if stride * s > output_stride:
            for c in convs:
                c.stride = (1, 1)
            dilation *= s
        else:
            stride *= s
        if dilation > 1:
            for c in convs:
                k = c.kernel_size[0]
                if k > 1:
                    c.dilation = (dilation, dilation)
                    c.padding = (dilation * (k - 1) // 2,) * 2
        if stride == 4:
            low_idx = i
    if low_idx is None:
        raise ConfigError("backbone has no stride-4 stage for the skip connection")
    return low_idx


def _out_channels(stage: nn.Module) -> int:
    return [m for m in stage.modules() if isinstance(m, nn.Conv2d)][-1].out_channels


class Backbone(nn.Module):
    def __init__(self, stages: nn.Sequential, output_stride: int):
        super().__init__()
        self.stages = stages
        self.low_level_index = _dilate_stages(stages, output_stride)
        self.low_level_channels = _out_channels(stages[self.low_level_index])
        self.high_level_channels = _out_channels(stages[-1])

    def forward(self, x):
        low = None
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i == self.low_level_index:
                low = x
        return low, x


def _conv_bn_relu(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def tiny_stages(width: int) -> nn.Sequential:
    w = width
    return nn.Sequential(
        _conv_bn_relu(3, w, 2),
        _conv_bn_relu(w, w, 2),
        _conv_bn_relu(w, 2 * w, 2),
        _conv_bn_relu(2 * w, 4 * w, 2),
        _conv_bn_relu(4 * w, 4 * w),
    )


def efficientnet_stages(variant: str, pretrained: bool) -> nn.Sequential:
    import torchvision.models as tvm

    name = variant.replace("-", "_")
    builder = getattr(tvm, name)
    try:
        weights = tvm.get_model_weights(builder).DEFAULT if pretrained else None
        net = builder(weights=weights)
    except Exception as exc:  # download failure, missing cache, ...
        raise ConfigError(
            f"could not load ImageNet weights for {variant} ({exc}); "
            "set pretrained=False to start from random initialisation"
        ) from exc
    return net.features


def build_backbone(cfg: ModelConfig) -> Backbone:
    if cfg.backbone == "tiny":
        stages = tiny_stages(cfg.tiny_width)
    else:
        stages = efficientnet_stages(cfg.backbone, cfg.pretrained)
    return Backbone(stages, cfg.output_stride)


def normalization_buffers() -> tuple[torch.Tensor, torch.Tensor]:
    mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return mean, std
