"""Single-scale token grid to a four-level, 128-channel feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch.nn.functional as F
from torch import Tensor, nn

from sam3unet.errors import ShapeError

PYRAMID_CHANNELS = 128
PYRAMID_STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class FeaturePyramid:
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor
    input_size: Tuple[int, int]

    @property
    def maps(self) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.f1, self.f2, self.f3, self.f4


def pyramid_sizes(input_size: Tuple[int, int]) -> Tuple[Tuple[int, int], ...]:
    """Floor-divided spatial size at each stride."""

    height, width = input_size
    sizes = tuple((height // s, width // s) for s in PYRAMID_STRIDES)
    if any(h < 1 or w < 1 for h, w in sizes):
        raise ShapeError(f"Input {height}x{width} is too small for stride {PYRAMID_STRIDES[-1]}")
    return sizes


def resize_bilinear(x: Tensor, size: Tuple[int, int]) -> Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class PyramidNeck(nn.Module):
    """Four independent 1x1 convolutions, each resized to its own stride."""

    def __init__(self, embed_dim: int, channels: int = PYRAMID_CHANNELS) -> None:
        super().__init__()
        self.embed_dim = embed_dim
        self.convs = nn.ModuleList(
            nn.Conv2d(embed_dim, channels, kernel_size=1, bias=True) for _ in PYRAMID_STRIDES
        )

    def forward(self, embedding: Tensor, input_size: Tuple[int, int]) -> FeaturePyramid:
        if embedding.dim() != 4 or embedding.shape[1] != self.embed_dim:
            raise ShapeError(
                f"Expected embedding with {self.embed_dim} channels, got {tuple(embedding.shape)}"
            )
        sizes = pyramid_sizes(input_size)
        maps = [resize_bilinear(conv(embedding), size) for conv, size in zip(self.convs, sizes)]
        return FeaturePyramid(*maps, input_size=(int(input_size[0]), int(input_size[1])))


def project(neck: PyramidNeck, embedding: Tensor, input_size: Tuple[int, int]) -> FeaturePyramid:
    return neck(embedding, input_size)


__all__ = [
    "PYRAMID_CHANNELS",
    "PYRAMID_STRIDES",
    "FeaturePyramid",
    "PyramidNeck",
    "project",
    "pyramid_sizes",
    "resize_bilinear",
]
