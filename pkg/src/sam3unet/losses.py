"""Boundary-weighted BCE + IoU structure loss with deep supervision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from sam3unet.decoder import DecoderOutput
from sam3unet.errors import ConfigError, ShapeError, ValidationError


@dataclass(frozen=True)
class LossConfig:
    pool_kernel: int = 31
    weight_gain: float = 5.0
    epsilon: float = 1.0
    head_weights: Tuple[float, ...] = (1.0, 1.0, 1.0)
    strict: bool = False

    def __post_init__(self) -> None:
        if self.pool_kernel < 1 or self.pool_kernel % 2 == 0:
            raise ConfigError(
                f"pool_kernel must be odd and >= 1, got {self.pool_kernel}", key="pool_kernel"
            )
        if self.weight_gain < 0:
            raise ConfigError(
                f"weight_gain must be non-negative, got {self.weight_gain}", key="weight_gain"
            )
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}", key="epsilon")
        if not self.head_weights:
            raise ConfigError("head_weights must not be empty", key="head_weights")


DEFAULT_LOSS = LossConfig()


def _check_pair(logits: Tensor, gt: Tensor) -> None:
    if logits.shape != gt.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} and gt {tuple(gt.shape)} differ")
    if gt.dim() != 4:
        raise ShapeError(f"Expected (B, 1, H, W) masks, got {tuple(gt.shape)}")


def weight_map(gt: Tensor, cfg: LossConfig = DEFAULT_LOSS) -> Tensor:
    """omega = 1 + gain * |avgpool_k(gt) - gt|, averaged over in-image pixels only."""

    if gt.dim() != 4:
        raise ShapeError(f"Expected (B, 1, H, W) masks, got {tuple(gt.shape)}")
    if cfg.strict and not torch.all((gt == 0) | (gt == 1)):
        raise ValidationError("Ground truth must be binary in strict mode")
    pooled = F.avg_pool2d(
        gt,
        kernel_size=cfg.pool_kernel,
        stride=1,
        padding=cfg.pool_kernel // 2,
        count_include_pad=False,
    )
    return 1.0 + cfg.weight_gain * torch.abs(pooled - gt)


def weighted_bce(logits: Tensor, gt: Tensor, omega: Tensor) -> Tensor:
    _check_pair(logits, gt)
    bce = F.binary_cross_entropy_with_logits(logits, gt, reduction="none")
    per_image = (omega * bce).sum(dim=(1, 2, 3)) / omega.sum(dim=(1, 2, 3))
    return per_image.mean()


def weighted_iou(logits: Tensor, gt: Tensor, omega: Tensor, epsilon: float = DEFAULT_LOSS.epsilon) -> Tensor:
    _check_pair(logits, gt)
    prob = torch.sigmoid(logits)
    inter = (omega * prob * gt).sum(dim=(1, 2, 3))
    union = (omega * (prob + gt - prob * gt)).sum(dim=(1, 2, 3))
    return (1.0 - (inter + epsilon) / (union + epsilon)).mean()


def structure_loss(logits: Tensor, gt: Tensor, cfg: LossConfig = DEFAULT_LOSS) -> Tensor:
    _check_pair(logits, gt)
    omega = weight_map(gt, cfg)
    return weighted_bce(logits, gt, omega) + weighted_iou(logits, gt, omega, cfg.epsilon)


HeadLogits = Union[DecoderOutput, Sequence[Tensor]]


def total_loss(outputs: HeadLogits, gt: Tensor, cfg: LossConfig = DEFAULT_LOSS) -> Tensor:
    logits = outputs.logits if isinstance(outputs, DecoderOutput) else list(outputs)
    if len(logits) != len(cfg.head_weights):
        raise ConfigError(
            f"{len(logits)} heads but {len(cfg.head_weights)} head weights", key="head_weights"
        )
    loss = logits[0].new_zeros(())
    for weight, head in zip(cfg.head_weights, logits):
        if weight:
            loss = loss + weight * structure_loss(head, gt, cfg)
    return loss


class DeepSupervisionLoss(nn.Module):
    def __init__(self, cfg: LossConfig = DEFAULT_LOSS) -> None:
        super().__init__()
        self.cfg = cfg

    def forward(self, outputs: HeadLogits, gt: Tensor) -> Tensor:
        return total_loss(outputs, gt, self.cfg)


__all__ = [
    "DEFAULT_LOSS",
    "DeepSupervisionLoss",
    "LossConfig",
    "structure_loss",
    "total_loss",
    "weight_map",
    "weighted_bce",
    "weighted_iou",
]
