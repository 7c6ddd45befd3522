"""Frozen ViT image encoder with residual bottleneck adapters before every block."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Mapping, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from sam3unet.errors import CheckpointError, ConfigError, ShapeError
from sam3unet.paths import DEFAULT_KEY_MAP

logger = logging.getLogger(__name__)

KEY_MAP_VERSION = 1
BASE_PREFIX = "base."


@dataclass(frozen=True)
class EncoderConfig:
    """Geometry of the ViT and its adapters."""

    patch_size: int = 14
    embed_dim: int = 1024
    depth: int = 32
    num_heads: int = 16
    img_size: Tuple[int, int] = (336, 336)
    adapter_bottleneck: int = 32
    mlp_ratio: float = 4.0
    pretrain_img_size: Optional[Tuple[int, int]] = None
    pretrained_path: Optional[Path] = None
    strict_load: bool = False

    def __post_init__(self) -> None:
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be positive, got {self.patch_size}", key="patch_size")
        for name in ("img_size", "pretrain_img_size"):
            size = getattr(self, name)
            if size is None:
                continue
            if len(size) != 2 or any(s <= 0 or s % self.patch_size for s in size):
                raise ConfigError(
                    f"{name}={tuple(size)} must be two positive multiples of "
                    f"patch_size={self.patch_size}",
                    key=name,
                )
        if self.depth < 1:
            raise ConfigError(f"depth must be at least 1, got {self.depth}", key="depth")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be positive, got {self.embed_dim}", key="embed_dim")
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ConfigError(
                f"num_heads={self.num_heads} must divide embed_dim={self.embed_dim}",
                key="num_heads",
            )
        if not 1 <= self.adapter_bottleneck <= self.embed_dim:
            raise ConfigError(
                f"adapter_bottleneck={self.adapter_bottleneck} must lie in [1, {self.embed_dim}]",
                key="adapter_bottleneck",
            )
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}", key="mlp_ratio")

    @property
    def grid_size(self) -> Tuple[int, int]:
        return self.img_size[0] // self.patch_size, self.img_size[1] // self.patch_size

    @property
    def pretrain_grid_size(self) -> Tuple[int, int]:
        size = self.pretrain_img_size or self.img_size
        return size[0] // self.patch_size, size[1] // self.patch_size

    @property
    def mlp_hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


TOY_ENCODER = EncoderConfig(
    embed_dim=64, depth=2, num_heads=4, img_size=(84, 84), adapter_bottleneck=8
)

# ViT-L width with 32 blocks and a 4736-wide MLP; positional grid trained at 336 px.
LARGE_ENCODER = EncoderConfig(
    embed_dim=1024,
    depth=32,
    num_heads=16,
    img_size=(336, 336),
    adapter_bottleneck=32,
    mlp_ratio=4.625,
    pretrain_img_size=(336, 336),
)


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, embed_dim: int, in_chans: int = 3) -> None:
        super().__init__()
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(x).flatten(2).transpose(1, 2)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        batch, tokens, dim = x.shape
        qkv = self.qkv(x).reshape(batch, tokens, 3, self.num_heads, dim // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(batch, tokens, dim))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden_dim: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, hidden_dim: int) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, hidden_dim)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def resize_pos_embed(pos_embed: Tensor, src_grid: Tuple[int, int], dst_grid: Tuple[int, int]) -> Tensor:
    """Bicubically resample a (1, N, D) positional table between token grids."""

    if tuple(src_grid) == tuple(dst_grid):
        return pos_embed
    dim = pos_embed.shape[-1]
    grid = pos_embed.reshape(1, src_grid[0], src_grid[1], dim).permute(0, 3, 1, 2)
    grid = F.interpolate(grid, size=dst_grid, mode="bicubic", align_corners=False)
    return grid.permute(0, 2, 3, 1).reshape(1, dst_grid[0] * dst_grid[1], dim)


class ViTBase(nn.Module):
    """Plain ViT: patch embedding, learned positions, blocks, final norm."""

    def __init__(self, config: EncoderConfig) -> None:
        super().__init__()
        self.config = config
        grid = config.pretrain_grid_size
        self.patch_embed = PatchEmbed(config.patch_size, config.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, grid[0] * grid[1], config.embed_dim))
        self.blocks = nn.ModuleList(
            Block(config.embed_dim, config.num_heads, config.mlp_hidden_dim)
            for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim, eps=1e-6)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.apply(_init_vit_weights)

    def embed(self, images: Tensor) -> Tuple[Tensor, Tuple[int, int]]:
        _check_images(images, self.config.patch_size)
        grid = (images.shape[-2] // self.config.patch_size, images.shape[-1] // self.config.patch_size)
        tokens = self.patch_embed(images)
        pos = resize_pos_embed(self.pos_embed, self.config.pretrain_grid_size, grid)
        return tokens + pos, grid

    def to_grid(self, tokens: Tensor, grid: Tuple[int, int]) -> Tensor:
        tokens = self.norm(tokens)
        return tokens.transpose(1, 2).reshape(tokens.shape[0], -1, grid[0], grid[1])

    def forward(self, images: Tensor) -> Tensor:
        tokens, grid = self.embed(images)
        for block in self.blocks:
            tokens = block(tokens)
        return self.to_grid(tokens, grid)


def _init_vit_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def _check_images(images: Tensor, patch_size: int) -> None:
    if images.dim() != 4 or images.shape[1] != 3:
        raise ShapeError(f"Expected images of shape (B, 3, H, W), got {tuple(images.shape)}")
    height, width = images.shape[-2:]
    if height % patch_size or width % patch_size:
        raise ShapeError(
            f"Image size {height}x{width} is not a multiple of patch_size={patch_size}"
        )


class Adapter(nn.Module):
    """Residual bottleneck: x + GELU(up(GELU(down(x))))."""

    def __init__(self, embed_dim: int, bottleneck: int) -> None:
        super().__init__()
        self.embed_dim = embed_dim
        self.down = nn.Linear(embed_dim, bottleneck)
        self.up = nn.Linear(bottleneck, embed_dim)
        self.act = nn.GELU()
        self.reset_parameters()

    def reset_parameters(self) -> None:
        # down keeps nn.Linear's Kaiming-uniform init; a zero up-map makes the adapter an identity.
        self.down.reset_parameters()
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.embed_dim:
            raise ShapeError(
                f"Adapter expects last dimension {self.embed_dim}, got {tuple(x.shape)}"
            )
        return x + self.act(self.up(self.act(self.down(x))))


class AdaptedEncoder(nn.Module):
    """Frozen ViT whose blocks each see ``block(adapter(tokens))``."""

    def __init__(self, config: EncoderConfig) -> None:
        super().__init__()
        self.config = config
        self.base = ViTBase(config)
        self.adapters = nn.ModuleList(
            Adapter(config.embed_dim, config.adapter_bottleneck) for _ in range(config.depth)
        )

    def forward(self, images: Tensor, *, use_adapters: bool = True) -> Tensor:
        tokens, grid = self.base.embed(images)
        for adapter, block in zip(self.adapters, self.base.blocks):
            if use_adapters:
                tokens = adapter(tokens)
            tokens = block(tokens)
        return self.base.to_grid(tokens, grid)

    def freeze_base(self) -> None:
        self.base.requires_grad_(False)
        self.adapters.requires_grad_(True)


def build_encoder(config: EncoderConfig) -> AdaptedEncoder:
    encoder = AdaptedEncoder(config)
    encoder.freeze_base()
    if config.pretrained_path is not None:
        load_pretrained(encoder, config.pretrained_path, strict=config.strict_load)
    logger.info(
        "Built encoder: depth=%d dim=%d adapters=%d trainable=%d",
        config.depth,
        config.embed_dim,
        len(encoder.adapters),
        sum(p.numel() for _, p in trainable_parameters(encoder)),
    )
    return encoder


def adapter_forward(x: Tensor, adapter: Adapter) -> Tensor:
    return adapter(x)


def encode(encoder: AdaptedEncoder, images: Tensor) -> Tensor:
    """Token grid (B, D, H/patch, W/patch) for a normalized image batch."""

    return encoder(images)


def trainable_parameters(encoder: nn.Module) -> List[Tuple[str, nn.Parameter]]:
    return [(name, p) for name, p in encoder.named_parameters() if p.requires_grad]


@dataclass(frozen=True)
class EncoderParameterCount:
    base: int
    adapters: int

    @property
    def total(self) -> int:
        return self.base + self.adapters

    @property
    def trainable_fraction(self) -> float:
        return self.adapters / self.base


def adapter_parameter_count(embed_dim: int, bottleneck: int) -> int:
    return 2 * embed_dim * bottleneck + bottleneck + embed_dim


def count_parameters(config: EncoderConfig) -> EncoderParameterCount:
    """Closed-form parameter census, usable at full scale without allocating weights."""

    dim, hidden = config.embed_dim, config.mlp_hidden_dim
    grid = config.pretrain_grid_size
    patch = 3 * config.patch_size**2 * dim + dim
    pos = grid[0] * grid[1] * dim
    block = (
        2 * (2 * dim)
        + (dim * 3 * dim + 3 * dim)
        + (dim * dim + dim)
        + (dim * hidden + hidden)
        + (hidden * dim + dim)
    )
    base = patch + pos + config.depth * block + 2 * dim
    adapters = config.depth * adapter_parameter_count(dim, config.adapter_bottleneck)
    return EncoderParameterCount(base=base, adapters=adapters)


@dataclass(frozen=True)
class KeyMap:
    """Prefix rewrite table from external checkpoint keys to internal encoder keys."""

    version: int
    rules: Tuple[Tuple[str, str], ...]

    def translate(self, key: str) -> Optional[str]:
        for source, target in self.rules:
            if key.startswith(source):
                return target + key[len(source):]
        return None


def read_key_map(path: str | os.PathLike[str] | None = None) -> KeyMap:
    map_path = Path(path) if path is not None else DEFAULT_KEY_MAP
    version: Optional[int] = None
    rules: List[Tuple[str, str]] = []
    for line_no, raw in enumerate(map_path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", maxsplit=1)[0].strip()
        if not line:
            continue
        if version is None:
            key, _, value = line.partition("=")
            if key.strip() != "version" or not value.strip().isdigit():
                raise CheckpointError(f"{map_path}:{line_no}: expected 'version = N' header")
            version = int(value)
            continue
        parts = line.split()
        if len(parts) != 2:
            raise CheckpointError(f"{map_path}:{line_no}: expected '<source> <target>'")
        rules.append((parts[0], parts[1]))
    if version != KEY_MAP_VERSION:
        raise CheckpointError(
            f"Key map {map_path} has version {version}, expected {KEY_MAP_VERSION}"
        )
    rules.sort(key=lambda rule: len(rule[0]), reverse=True)
    return KeyMap(version=version, rules=tuple(rules))


@dataclass
class LoadReport:
    matched: List[str] = field(default_factory=list)
    missing: List[str] = field(default_factory=list)
    unexpected: List[str] = field(default_factory=list)

    @property
    def unmatched(self) -> List[str]:
        return self.missing


def _unwrap_state(payload: Any) -> Mapping[str, Tensor]:
    if isinstance(payload, Mapping):
        for key in ("model", "state_dict"):
            nested = payload.get(key)
            if isinstance(nested, Mapping):
                return nested
        if all(isinstance(v, Tensor) for v in payload.values()):
            return payload
    raise CheckpointError("File does not contain a named-parameter mapping")


def read_state(path: str | os.PathLike[str]) -> Mapping[str, Tensor]:
    source = Path(path)
    if not source.is_file():
        raise FileNotFoundError(source)
    try:
        payload = torch.load(source, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"Cannot parse {source}: {exc}") from exc
    return _unwrap_state(payload)


def load_pretrained(
    encoder: AdaptedEncoder,
    path: str | os.PathLike[str],
    *,
    strict: bool = False,
    key_map: Optional[KeyMap] = None,
) -> LoadReport:
    """Copy base-ViT weights from ``path``; adapters are never touched."""

    state = read_state(path)
    key_map = key_map or read_key_map()
    targets = dict(encoder.base.named_parameters())
    report = LoadReport()
    updates: dict[str, Tensor] = {}

    for source_key in sorted(state):
        internal = key_map.translate(source_key)
        if internal is None or not internal.startswith(BASE_PREFIX):
            report.unexpected.append(source_key)
            continue
        name = internal[len(BASE_PREFIX):]
        if name not in targets:
            report.unexpected.append(source_key)
            continue
        tensor = state[source_key]
        target = targets[name]
        if name == "pos_embed" and tensor.shape != target.shape:
            tensor = _adapt_pos_embed(tensor, encoder.config)
        if tensor.shape != target.shape:
            raise CheckpointError(
                f"Shape mismatch for '{name}': checkpoint {tuple(tensor.shape)} "
                f"vs model {tuple(target.shape)}",
                name=name,
            )
        updates[name] = tensor
        report.matched.append(name)

    report.missing = sorted(set(targets) - set(updates))
    if strict and report.missing:
        raise CheckpointError(
            f"Strict load failed; missing {report.missing}, unexpected {report.unexpected}",
            name=report.missing[0],
        )

    with torch.no_grad():
        for name, tensor in updates.items():
            targets[name].copy_(tensor.to(dtype=targets[name].dtype))

    logger.info(
        "Loaded %d base tensors from %s (%d missing, %d unexpected)",
        len(report.matched),
        path,
        len(report.missing),
        len(report.unexpected),
    )
    return report


def _adapt_pos_embed(tensor: Tensor, config: EncoderConfig) -> Tensor:
    dim = config.embed_dim
    tokens = tensor.numel() // dim
    side = int(round(tokens**0.5))
    if tensor.numel() % dim or side * side != tokens:
        return tensor
    logger.info("Resampling positional grid %dx%d -> %s", side, side, config.pretrain_grid_size)
    return resize_pos_embed(tensor.reshape(1, tokens, dim), (side, side), config.pretrain_grid_size)


__all__ = [
    "LARGE_ENCODER",
    "TOY_ENCODER",
    "Adapter",
    "AdaptedEncoder",
    "EncoderConfig",
    "EncoderParameterCount",
    "KeyMap",
    "LoadReport",
    "ViTBase",
    "adapter_forward",
    "adapter_parameter_count",
    "build_encoder",
    "count_parameters",
    "encode",
    "load_pretrained",
    "read_key_map",
    "read_state",
    "resize_pos_embed",
    "trainable_parameters",
]
