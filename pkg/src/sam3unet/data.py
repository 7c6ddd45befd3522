"""Image/mask pair datasets, preprocessing and a synthetic toy dataset."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from torch import Tensor
from torch.utils.data import Dataset

from sam3unet.errors import ConfigError, DatasetError
from sam3unet.paths import IMAGE_SUFFIXES, MASK_SUFFIXES, list_files

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
SIZE_MULTIPLE = 14
SYNTHETIC_ATTEMPTS = 1000

# Official split sizes; an index whose root is named like one of these is checked against it.
BENCHMARKS = {
    "MSD-train": 3063,
    "MSD-test": 955,
    "PMD-train": 5096,
    "PMD-test": 571,
    "DUTS-TR": 10553,
    "DUTS-TE": 5019,
    "DUT-OMRON": 5168,
    "HKU-IS": 4447,
    "PASCAL-S": 850,
    "ECSSD": 1000,
}


@dataclass(frozen=True)
class DataConfig:
    root: Path = Path("data/synthetic")
    image_subdir: str = "images"
    mask_subdir: str = "masks"
    input_size: Tuple[int, int] = (336, 336)
    normalize_mean: Tuple[float, float, float] = IMAGENET_MEAN
    normalize_std: Tuple[float, float, float] = IMAGENET_STD
    flip_prob: float = 0.5
    seed: int = 0
    strict: bool = False
    num_workers: int = 0

    def __post_init__(self) -> None:
        if len(self.input_size) != 2 or any(
            s <= 0 or s % SIZE_MULTIPLE for s in self.input_size
        ):
            raise ConfigError(
                f"input_size={tuple(self.input_size)} must be positive multiples of {SIZE_MULTIPLE}",
                key="input_size",
            )
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}", key="flip_prob")
        if len(self.normalize_mean) != 3:
            raise ConfigError("normalize_mean needs 3 values", key="normalize_mean")
        if len(self.normalize_std) != 3 or any(s <= 0 for s in self.normalize_std):
            raise ConfigError("normalize_std needs 3 positive values", key="normalize_std")
        if self.num_workers < 0:
            raise ConfigError("num_workers must be non-negative", key="num_workers")


@dataclass(frozen=True)
class SamplePair:
    id: str
    image_path: Path
    mask_path: Path


def _open(path: Path, mode: str) -> Image.Image:
    try:
        with Image.open(path) as image:
            return image.convert(mode)
    except (OSError, ValueError) as exc:
        raise OSError(f"Cannot read {path}: {exc}") from exc


def load_image(path: Path) -> Image.Image:
    return _open(path, "RGB")


def load_mask(path: Path) -> Image.Image:
    return _open(path, "L")


def _validate_pair(pair: SamplePair) -> Optional[str]:
    image, mask = load_image(pair.image_path), load_mask(pair.mask_path)
    if image.size != mask.size:
        return f"{pair.id}: image {image.size} vs mask {mask.size}"
    values = np.unique(np.asarray(mask))
    if not set(values.tolist()) <= {0, 255}:
        return f"{pair.id}: mask values {values.tolist()[:6]} are not in {{0, 255}}"
    return None


def index_dataset(cfg: DataConfig, *, strict: Optional[bool] = None) -> List[SamplePair]:
    """Pair images and masks by filename stem, sorted by stem."""

    strict = cfg.strict if strict is None else strict
    image_dir = cfg.root / cfg.image_subdir
    mask_dir = cfg.root / cfg.mask_subdir
    for directory in (cfg.root, image_dir, mask_dir):
        if not directory.is_dir():
            raise FileNotFoundError(directory)

    images = {p.stem: p for p in list_files(image_dir, IMAGE_SUFFIXES)}
    masks = {p.stem: p for p in list_files(mask_dir, MASK_SUFFIXES)}
    orphans = sorted(
        [images[s].name for s in images.keys() - masks.keys()]
        + [masks[s].name for s in masks.keys() - images.keys()]
    )
    if orphans:
        if strict:
            raise DatasetError(f"Unpaired files under {cfg.root}: {orphans}", names=orphans)
        logger.warning("Skipping %d unpaired files under %s: %s", len(orphans), cfg.root, orphans)

    pairs = [
        SamplePair(id=stem, image_path=images[stem], mask_path=masks[stem])
        for stem in sorted(images.keys() & masks.keys())
    ]
    if strict:
        problems = [p for p in (_validate_pair(pair) for pair in pairs) if p]
        if problems:
            raise DatasetError(f"Invalid pairs under {cfg.root}: {problems}", names=problems)

    expected = BENCHMARKS.get(cfg.root.name)
    if expected is not None and expected != len(pairs):
        logger.warning("%s: expected %d pairs, found %d", cfg.root.name, expected, len(pairs))
    logger.info("Indexed %d pairs under %s", len(pairs), cfg.root)
    return pairs


def image_to_tensor(image: Image.Image, cfg: DataConfig) -> Tensor:
    height, width = cfg.input_size
    resized = image.resize((width, height), Image.Resampling.BILINEAR)
    array = np.asarray(resized, dtype=np.float32) / 255.0
    mean = np.asarray(cfg.normalize_mean, dtype=np.float32)
    std = np.asarray(cfg.normalize_std, dtype=np.float32)
    array = (array - mean) / std
    return torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1)))


def mask_to_tensor(mask: Image.Image, cfg: DataConfig) -> Tensor:
    height, width = cfg.input_size
    resized = mask.resize((width, height), Image.Resampling.NEAREST)
    array = (np.asarray(resized) > 127).astype(np.float32)
    return torch.from_numpy(array[None])


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample), whichever worker draws it."""

    return np.random.default_rng([seed, epoch, index])


def preprocess(
    pair: SamplePair,
    cfg: DataConfig,
    training: bool,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, Tensor]:
    image = image_to_tensor(load_image(pair.image_path), cfg)
    mask = mask_to_tensor(load_mask(pair.mask_path), cfg)
    if training:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        flip_h, flip_v = rng.random(2) < cfg.flip_prob
        dims = [d for d, flip in ((-1, flip_h), (-2, flip_v)) if flip]
        if dims:
            image = torch.flip(image, dims)
            mask = torch.flip(mask, dims)
    return image, mask


def epoch_order(num_samples: int, seed: int, epoch: int) -> List[int]:
    return np.random.default_rng([seed, epoch]).permutation(num_samples).tolist()


class SegmentationDataset(Dataset):
    def __init__(self, pairs: Sequence[SamplePair], cfg: DataConfig, training: bool = True) -> None:
        if not pairs:
            raise DatasetError("Dataset is empty")
        self.pairs = list(pairs)
        self.cfg = cfg
        self.training = training
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, index: int) -> Tuple[Tensor, Tensor]:
        rng = sample_rng(self.cfg.seed, self.epoch, index) if self.training else None
        return preprocess(self.pairs[index], self.cfg, self.training, rng)


def _synthetic_sample(
    rng: np.random.Generator, size: int, fg_range: Tuple[float, float]
) -> Tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    for _ in range(SYNTHETIC_ATTEMPTS):
        cy, cx = rng.uniform(0.25, 0.75, 2) * size
        ry, rx = rng.uniform(0.15, 0.45, 2) * size
        if rng.integers(2) == 0:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        if fg_range[0] <= mask.mean() <= fg_range[1]:
            break
    else:
        raise ConfigError(
            f"No scene with foreground fraction in {tuple(fg_range)} after {SYNTHETIC_ATTEMPTS} draws",
            key="fg_range",
        )

    start, end = rng.uniform(0, 110, (2, 3))
    ramp = (xx / size)[..., None]
    image = start * (1.0 - ramp) + end * ramp
    image[mask] = rng.uniform(150, 255, 3)
    image += rng.normal(0.0, 8.0, image.shape)
    return np.clip(np.round(image), 0, 255).astype(np.uint8), mask


def make_synthetic(
    out_dir: str | os.PathLike[str],
    n: int,
    size: int = 84,
    seed: int = 0,
    *,
    fg_range: Tuple[float, float] = (0.1, 0.6),
    image_subdir: str = "images",
    mask_subdir: str = "masks",
) -> List[SamplePair]:
    """Write ``n`` rectangle/ellipse scenes with exact masks; same seed, same bytes."""

    if n < 1:
        raise ConfigError(f"n must be at least 1, got {n}", key="n")
    if not 0.0 <= fg_range[0] <= fg_range[1] <= 1.0:
        raise ConfigError(f"fg_range must satisfy 0 <= low <= high <= 1, got {tuple(fg_range)}", key="fg_range")
    root = Path(out_dir)
    image_dir, mask_dir = root / image_subdir, root / mask_subdir
    image_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    pairs = []
    for index in range(n):
        image, mask = _synthetic_sample(rng, size, fg_range)
        stem = f"synth_{index:04d}"
        image_path, mask_path = image_dir / f"{stem}.png", mask_dir / f"{stem}.png"
        Image.fromarray(image).save(image_path)
        Image.fromarray(mask.astype(np.uint8) * 255).save(mask_path)
        pairs.append(SamplePair(id=stem, image_path=image_path, mask_path=mask_path))
    logger.info("Wrote %d synthetic pairs (%dx%d, seed=%d) to %s", n, size, size, seed, root)
    return pairs


__all__ = [
    "BENCHMARKS",
    "IMAGENET_MEAN",
    "IMAGENET_STD",
    "DataConfig",
    "SamplePair",
    "SegmentationDataset",
    "epoch_order",
    "image_to_tensor",
    "index_dataset",
    "load_image",
    "load_mask",
    "make_synthetic",
    "mask_to_tensor",
    "preprocess",
    "sample_rng",
]
