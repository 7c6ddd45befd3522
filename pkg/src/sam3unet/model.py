"""SAM3-UNet assembly: adapted encoder, pyramid neck and lightweight decoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, List, Tuple

from torch import Tensor, nn

from sam3unet.decoder import DecoderOutput, LightweightDecoder
from sam3unet.encoder import AdaptedEncoder, EncoderConfig, build_encoder
from sam3unet.pyramid import PYRAMID_CHANNELS, PyramidNeck

logger = logging.getLogger(__name__)

# AdamW keeps two moments per trainable element.
OPTIMIZER_STATES_PER_PARAM = 2


class SAM3UNet(nn.Module):
    def __init__(self, encoder: AdaptedEncoder, channels: int = PYRAMID_CHANNELS) -> None:
        super().__init__()
        self.encoder = encoder
        self.neck = PyramidNeck(encoder.config.embed_dim, channels)
        self.decoder = LightweightDecoder(channels)

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    def forward(self, images: Tensor) -> DecoderOutput:
        embedding = self.encoder(images)
        pyramid = self.neck(embedding, tuple(images.shape[-2:]))
        return self.decoder(pyramid)

    def train(self, mode: bool = True) -> "SAM3UNet":
        super().train(mode)
        self.encoder.base.eval()  # frozen base always runs in inference mode
        return self

    def named_trainable_parameters(self) -> Iterator[Tuple[str, nn.Parameter]]:
        for name, param in self.named_parameters():
            if param.requires_grad:
                yield name, param

    def base_parameter_names(self) -> List[str]:
        return [f"encoder.base.{name}" for name, _ in self.encoder.base.named_parameters()]


def build_model(encoder_config: EncoderConfig) -> SAM3UNet:
    return SAM3UNet(build_encoder(encoder_config))


@dataclass(frozen=True)
class ParameterCensus:
    total: int
    trainable: int
    frozen: int
    adapter: int
    bytes_per_element: int

    @property
    def trainable_fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0

    @property
    def trainable_state_bytes(self) -> int:
        """Parameter plus optimizer-moment bytes for the trainable set."""

        return self.trainable * self.bytes_per_element * (1 + OPTIMIZER_STATES_PER_PARAM)

    @property
    def total_parameter_bytes(self) -> int:
        return self.total * self.bytes_per_element

    def summary(self) -> str:
        return (
            f"parameters: total={self.total:,} trainable={self.trainable:,} "
            f"({100 * self.trainable_fraction:.2f}%) frozen={self.frozen:,}; "
            f"trainable state {self.trainable_state_bytes / 2**20:.1f} MiB "
            f"vs weights {self.total_parameter_bytes / 2**20:.1f} MiB"
        )


def parameter_census(model: nn.Module) -> ParameterCensus:
    total = trainable = adapter = 0
    element_size = 4
    for name, param in model.named_parameters():
        total += param.numel()
        element_size = param.element_size()
        if param.requires_grad:
            trainable += param.numel()
            if ".adapters." in f".{name}":
                adapter += param.numel()
    return ParameterCensus(
        total=total,
        trainable=trainable,
        frozen=total - trainable,
        adapter=adapter,
        bytes_per_element=element_size,
    )


__all__ = [
    "ParameterCensus",
    "SAM3UNet",
    "build_model",
    "parameter_census",
]
