from __future__ import annotations

from dataclasses import asdict, dataclass

from ..exceptions import ConfigError

EFFICIENTNET_VARIANTS = tuple(f"efficientnet-b{i}" for i in range(8))
BACKBONES = EFFICIENTNET_VARIANTS + ("tiny",)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs of the binary DeepLabv3+ network.

    ``backbone="tiny"`` selects a small plain CNN encoder meant for tests and
    CPU smoke runs; ``tiny_width`` sets its base channel count.
    """

    input_side: int = 512
    backbone: str = "efficientnet-b0"
    pretrained: bool = True
    output_stride: int = 16
    aspp_rates: tuple[int, ...] = (6, 12, 18)
    aspp_channels: int = 256
    decoder_low_level_channels: int = 48
    decoder_channels: int = 256
    dropout: float = 0.1
    num_output_channels: int = 1
    freeze_backbone: bool = False
    tiny_width: int = 8

    def __post_init__(self):
        object.__setattr__(self, "aspp_rates", tuple(int(r) for r in self.aspp_rates))
        self.validate()

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choose from {', '.join(BACKBONES)}")
        if self.output_stride not in (8, 16):
            raise ConfigError(f"output_stride must be 8 or 16, got {self.output_stride}")
        if self.input_side < 1 or self.input_side % self.output_stride:
            raise ConfigError(f"input_side {self.input_side} is not divisible by output_stride {self.output_stride}")
        rates = self.aspp_rates
        if not rates or any(r < 1 for r in rates) or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ConfigError(f"aspp_rates must be strictly increasing positive integers, got {rates}")
        if self.num_output_channels != 1:
            raise ConfigError("binary segmentation requires num_output_channels == 1")
        for name in ("aspp_channels", "decoder_low_level_channels", "decoder_channels", "tiny_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aspp_rates"] = list(self.aspp_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def architecture_view(self) -> dict:
        """Fields that determine the parameter layout (``pretrained`` does not)."""
        d = self.to_dict()
        d.pop("pretrained")
        d.pop("freeze_backbone")
        return d
