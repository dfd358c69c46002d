"""Binary DeepLabv3+: encoder, ASPP, skip-connected decoder, sigmoid head."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .backbones import build_backbone, normalization_buffers
from .config import ModelConfig


class ASPPConv(nn.Sequential):
    def __init__(self, cin: int, cout: int, rate: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=rate, dilation=rate, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class ASPPPooling(nn.Module):
    """Image-level branch: global average pool, 1x1 conv, broadcast back.

    No batch norm here, the pooled map is 1x1 and would break batches of one.
    """

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        y = F.relu(self.conv(F.adaptive_avg_pool2d(x, 1)))
        return y.expand(-1, -1, x.shape[2], x.shape[3])


class ASPP(nn.Module):
    def __init__(self, cin: int, cout: int, rates, dropout: float = 0.1):
        super().__init__()
        branches = [nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))]
        branches += [ASPPConv(cin, cout, r) for r in rates]
        branches.append(ASPPPooling(cin, cout))
        self.branches = nn.ModuleList(branches)
        self.project = nn.Sequential(
            nn.Conv2d(len(branches) * cout, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.project(torch.cat([b(x) for b in self.branches], dim=1))


class Decoder(nn.Module):
    def __init__(self, low_channels: int, low_proj: int, aspp_channels: int, channels: int):
        super().__init__()
        self.low_level_proj = nn.Sequential(
            nn.Conv2d(low_channels, low_proj, 1, bias=False), nn.BatchNorm2d(low_proj), nn.ReLU(inplace=True)
        )
        self.fuse = nn.Sequential(
            nn.Conv2d(low_proj + aspp_channels, channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, high, low):
        low = self.low_level_proj(low)
        high = F.interpolate(high, size=low.shape[2:], mode="bilinear", align_corners=False)
        return self.fuse(torch.cat([high, low], dim=1))


class DeepLabV3Plus(nn.Module):
    """Takes N x 3 x H x W images in [0, 1] and returns N x 1 x H x W logits.

    Inputs are standardised with the ImageNet statistics inside the network,
    so callers (and checkpoints) only ever deal with [0, 1] pixels.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.preprocess = None  # PreprocessConfig attached by training / checkpoint loading
        mean, std = normalization_buffers()
        self.register_buffer("pixel_mean", mean)
        self.register_buffer("pixel_std", std)
        self.backbone = build_backbone(cfg)
        self.aspp = ASPP(self.backbone.high_level_channels, cfg.aspp_channels, cfg.aspp_rates, cfg.dropout)
        self.decoder = Decoder(
            self.backbone.low_level_channels, cfg.decoder_low_level_channels, cfg.aspp_channels, cfg.decoder_channels
        )
        self.head = nn.Conv2d(cfg.decoder_channels, cfg.num_output_channels, 1)
        if cfg.freeze_backbone:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x):
        size = x.shape[2:]
        x = (x - self.pixel_mean) / self.pixel_std
        low, high = self.backbone(x)
        y = self.decoder(self.aspp(high), low)
        y = self.head(y)
        return F.interpolate(y, size=size, mode="bilinear", align_corners=False)

    def predict_proba(self, x):
        return torch.sigmoid(self(x))


def build_model(cfg: ModelConfig | None = None, seed: int | None = None) -> DeepLabV3Plus:
    """Construct the network; ``seed`` makes random initialisation reproducible."""
    cfg = cfg or ModelConfig()
    cfg.validate()
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return DeepLabV3Plus(cfg)
    return DeepLabV3Plus(cfg)
