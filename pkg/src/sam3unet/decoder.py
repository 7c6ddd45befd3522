"""Lightweight U-Net decoder built from split/depthwise bottleneck blocks."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Tuple

import torch
from torch import Tensor, nn

from sam3unet.errors import ConfigError, ShapeError
from sam3unet.pyramid import PYRAMID_CHANNELS, FeaturePyramid, resize_bilinear


@dataclass(frozen=True)
class LightweightBlockConfig:
    in_channels: int
    out_channels: int

    def __post_init__(self) -> None:
        if self.in_channels < 8 or self.in_channels % 8:
            raise ConfigError(
                f"in_channels={self.in_channels} must be a positive multiple of 8",
                key="in_channels",
            )
        if self.out_channels < 1:
            raise ConfigError(
                f"out_channels={self.out_channels} must be positive", key="out_channels"
            )

    @property
    def reduced(self) -> int:
        return self.in_channels // 4

    @property
    def branch(self) -> int:
        return self.in_channels // 8

    @property
    def concat(self) -> int:
        return 4 * self.branch


class ConvBNGELU(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 1, groups: int = 1) -> None:
        super().__init__(
            OrderedDict(
                [
                    (
                        "conv",
                        nn.Conv2d(
                            in_channels,
                            out_channels,
                            kernel_size,
                            padding=kernel_size // 2,
                            groups=groups,
                            bias=False,
                        ),
                    ),
                    ("bn", nn.BatchNorm2d(out_channels)),
                    ("act", nn.GELU()),
                ]
            )
        )


class LightweightBlock(nn.Module):
    """Reduce C -> C/4, split into two C/8 halves, grow two depthwise parts, expand."""

    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__()
        self.cfg = LightweightBlockConfig(in_channels, out_channels)
        branch = self.cfg.branch
        self.reduce = ConvBNGELU(in_channels, self.cfg.reduced)
        self.dw1 = ConvBNGELU(branch, branch, kernel_size=3, groups=branch)
        self.dw2 = ConvBNGELU(branch, branch, kernel_size=3, groups=branch)
        self.expand = ConvBNGELU(self.cfg.concat, out_channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"Block expects {self.cfg.in_channels} channels, got {tuple(x.shape)}"
            )
        p1, p2 = torch.split(self.reduce(x), self.cfg.branch, dim=1)
        p3 = self.dw1(p2)
        p4 = self.dw2(p3)
        return self.expand(torch.cat([p1, p2, p3, p4], dim=1))


def lightweight_block(x: Tensor, block: LightweightBlock) -> Tensor:
    return block(x)


def upsample_to(x: Tensor, target_size: Tuple[int, int]) -> Tensor:
    """Bilinear resize to an exact size (pyramid scales are not exact x2 ratios)."""

    if min(target_size) < 1:
        raise ShapeError(f"Target size must be positive, got {tuple(target_size)}")
    return resize_bilinear(x, tuple(target_size))


@dataclass(frozen=True)
class DecoderOutput:
    """Raw logits from the d3, d2, d1 heads (d1 last) plus the fused stage maps."""

    logits: List[Tensor]
    stage_features: Tuple[Tensor, Tensor, Tensor]

    @property
    def prediction(self) -> Tensor:
        return self.logits[-1]


class LightweightDecoder(nn.Module):
    def __init__(self, channels: int = PYRAMID_CHANNELS) -> None:
        super().__init__()
        self.channels = channels
        self.stem = LightweightBlock(channels, channels)
        self.fuse3 = LightweightBlock(2 * channels, channels)
        self.fuse2 = LightweightBlock(2 * channels, channels)
        self.fuse1 = LightweightBlock(2 * channels, channels)
        self.heads = nn.ModuleList(nn.Conv2d(channels, 1, kernel_size=1) for _ in range(3))

    def _fuse(self, block: LightweightBlock, deep: Tensor, skip: Tensor) -> Tensor:
        return block(torch.cat([upsample_to(deep, skip.shape[-2:]), skip], dim=1))

    def forward(self, pyr: FeaturePyramid) -> DecoderOutput:
        for level, feature in enumerate(pyr.maps, start=1):
            if feature.shape[1] != self.channels:
                raise ShapeError(
                    f"Pyramid level f{level} has {feature.shape[1]} channels, expected {self.channels}"
                )
        d4 = self.stem(pyr.f4)
        d3 = self._fuse(self.fuse3, d4, pyr.f3)
        d2 = self._fuse(self.fuse2, d3, pyr.f2)
        d1 = self._fuse(self.fuse1, d2, pyr.f1)
        logits = [
            upsample_to(head(stage), pyr.input_size)
            for head, stage in zip(self.heads, (d3, d2, d1))
        ]
        return DecoderOutput(logits=logits, stage_features=(d3, d2, d1))


def decode(decoder: LightweightDecoder, pyr: FeaturePyramid) -> DecoderOutput:
    return decoder(pyr)


__all__ = [
    "ConvBNGELU",
    "DecoderOutput",
    "LightweightBlock",
    "LightweightBlockConfig",
    "LightweightDecoder",
    "decode",
    "lightweight_block",
    "upsample_to",
]
