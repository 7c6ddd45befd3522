"""Training loop, checkpoints and inference for SAM3-UNet."""

from __future__ import annotations

import copy
import hashlib
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from matplotlib.figure import Figure
from PIL import Image
from torch import Tensor
from torch.utils.data import DataLoader
from tqdm import tqdm

from sam3unet.data import (
    DataConfig,
    SamplePair,
    SegmentationDataset,
    epoch_order,
    image_to_tensor,
    load_image,
)
from sam3unet.errors import CheckpointError, ConfigError, Sam3UNetError, TrainingAborted
from sam3unet.losses import DEFAULT_LOSS, DeepSupervisionLoss, LossConfig
from sam3unet.metrics import MetricsConfig, MetricsReport, aggregate, read_gt, score_pair
from sam3unet.model import ParameterCensus, SAM3UNet, parameter_census

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ["step", "lr", "loss"]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults follow the 336 px / batch 12 / 20 epoch recipe."""

    lr: float = 2e-4
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 12
    lr_floor: float = 0.0
    seed: int = 0
    eval_every: int = 0
    checkpoint_dir: Path = Path("checkpoints")
    checkpoint_every: int = 0
    clip_grad_norm: float = 0.0
    amp: bool = False

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}", key="lr")
        if self.lr_floor < 0:
            raise ConfigError(f"lr_floor must be non-negative, got {self.lr_floor}", key="lr_floor")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}", key="epochs")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}", key="batch_size")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative", key="weight_decay")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("eval_every and checkpoint_every must be non-negative", key="eval_every")
        if self.clip_grad_norm < 0:
            raise ConfigError("clip_grad_norm must be non-negative", key="clip_grad_norm")


@dataclass
class Checkpoint:
    model: Dict[str, Tensor]
    optimizer: Dict[str, Any]
    epoch: int
    step: int
    config: str = ""
    rng: Optional[Dict[str, Any]] = None
    version: int = CHECKPOINT_VERSION


@dataclass
class TrainingResult:
    checkpoint: Checkpoint
    history: pd.DataFrame
    census: ParameterCensus
    checkpoint_path: Optional[Path] = None
    history_path: Optional[Path] = None


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine decay from ``cfg.lr`` at step 0 to ``cfg.lr_floor`` at ``total_steps``."""

    if total_steps <= 0:
        return cfg.lr
    progress = min(max(step, 0), total_steps) / total_steps
    return cfg.lr_floor + 0.5 * (cfg.lr - cfg.lr_floor) * (1.0 + math.cos(math.pi * progress))


def save_checkpoint(state: Checkpoint, path: str | os.PathLike[str]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": state.version,
        "model": state.model,
        "optimizer": state.optimizer,
        "epoch": state.epoch,
        "step": state.step,
        "config": state.config,
        "rng": state.rng,
    }
    tmp = target.with_name(target.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(target)
    return target


def load_checkpoint(path: str | os.PathLike[str]) -> Checkpoint:
    source = Path(path)
    if not source.is_file():
        raise FileNotFoundError(source)
    try:
        payload = torch.load(source, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"Cannot parse checkpoint {source}: {exc}") from exc
    if not isinstance(payload, Mapping) or "format_version" not in payload:
        raise CheckpointError(f"{source} is not a sam3unet checkpoint")
    version = payload["format_version"]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{source} has checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    return Checkpoint(
        model=dict(payload["model"]),
        optimizer=payload.get("optimizer") or {},
        epoch=int(payload["epoch"]),
        step=int(payload.get("step", 0)),
        config=payload.get("config", ""),
        rng=payload.get("rng"),
        version=version,
    )


def resolve_device(device: str | torch.device | None = None) -> torch.device:
    if device is None or str(device) == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(device)


def base_fingerprint(model: SAM3UNet) -> str:
    digest = hashlib.sha256()
    for name, param in model.encoder.base.named_parameters():
        digest.update(name.encode("utf-8"))
        digest.update(param.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def write_history(history: pd.DataFrame, path: Path, *, append: bool = False) -> Path:
    if append and path.exists():
        history = pd.concat([pd.read_csv(path), history], ignore_index=True)
    path.parent.mkdir(parents=True, exist_ok=True)
    history.to_csv(path, index=False)
    return path


def plot_history(history: pd.DataFrame, path: Path) -> Path:
    figure = Figure(figsize=(6, 3.5))
    axis = figure.add_subplot()
    axis.plot(history["step"], history["loss"], linewidth=1.0)
    axis.set_xlabel("step")
    axis.set_ylabel("structure loss")
    axis.set_yscale("log")
    axis.grid(alpha=0.3)
    figure.tight_layout()
    figure.savefig(path, dpi=120)
    return path


def _snapshot(model: SAM3UNet, optimizer: torch.optim.Optimizer, epoch: int, step: int, config_text: str) -> Checkpoint:
    return Checkpoint(
        model={k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        optimizer=copy.deepcopy(optimizer.state_dict()),
        epoch=epoch,
        step=step,
        config=config_text,
        rng={"torch": torch.get_rng_state()},
    )


def train(
    model: SAM3UNet,
    dataset: SegmentationDataset,
    cfg: TrainConfig,
    loss_cfg: LossConfig = DEFAULT_LOSS,
    *,
    out_dir: Optional[Path] = None,
    config_text: str = "",
    resume: Optional[Checkpoint] = None,
    device: str | torch.device | None = None,
    eval_pairs: Sequence[SamplePair] = (),
    metrics_cfg: MetricsConfig = MetricsConfig(),
    progress: bool = True,
) -> TrainingResult:
    """Optimize adapters, neck and decoder with AdamW under a per-step cosine schedule."""

    device = resolve_device(device)
    use_amp = cfg.amp and device.type == "cuda"
    model.to(device)

    named = list(model.named_trainable_parameters())
    overlap = {name for name, _ in named} & set(model.base_parameter_names())
    if overlap:
        raise Sam3UNetError(f"Frozen encoder parameters would be optimized: {sorted(overlap)}")
    params = [param for _, param in named]
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    criterion = DeepSupervisionLoss(loss_cfg)
    scaler = torch.amp.GradScaler(device.type, enabled=use_amp)

    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    start_epoch, step = 0, 0
    if resume is not None:
        model.load_state_dict(resume.model)
        optimizer.load_state_dict(resume.optimizer)
        start_epoch, step = resume.epoch, resume.step
        if resume.rng and "torch" in resume.rng:
            torch.set_rng_state(resume.rng["torch"])
        logger.info("Resuming at epoch %d, step %d", start_epoch, step)
    else:
        torch.manual_seed(cfg.seed)

    census = parameter_census(model)
    logger.info(census.summary())
    base_digest = base_fingerprint(model)

    checkpoint_dir = None
    if out_dir is not None:
        checkpoint_dir = cfg.checkpoint_dir if cfg.checkpoint_dir.is_absolute() else out_dir / cfg.checkpoint_dir

    rows: List[Tuple[int, float, float]] = []
    checkpoint_path: Optional[Path] = None
    epochs = tqdm(range(start_epoch, cfg.epochs), desc="epochs", disable=not progress, leave=False)
    for epoch in epochs:
        dataset.set_epoch(epoch)
        loader = DataLoader(
            dataset,
            batch_size=cfg.batch_size,
            sampler=epoch_order(len(dataset), dataset.cfg.seed, epoch),
            num_workers=dataset.cfg.num_workers,
            drop_last=False,
        )
        model.train()
        for images, masks in loader:
            lr = lr_at(step, total_steps, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            images, masks = images.to(device), masks.to(device)
            with torch.autocast(device_type=device.type, enabled=use_amp):
                outputs = model(images)
            loss = criterion([logits.float() for logits in outputs.logits], masks)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingAborted(step, lr, value)

            optimizer.zero_grad(set_to_none=True)
            scaler.scale(loss).backward()
            if cfg.clip_grad_norm > 0:
                scaler.unscale_(optimizer)
                torch.nn.utils.clip_grad_norm_(params, cfg.clip_grad_norm)
            scaler.step(optimizer)
            scaler.update()

            rows.append((step, lr, value))
            logger.debug("step %d lr %.3e loss %.6f", step, lr, value)
            step += 1
        epochs.set_postfix(loss=f"{rows[-1][2]:.4f}" if rows else "-")

        if checkpoint_dir is not None:
            state = _snapshot(model, optimizer, epoch + 1, step, config_text)
            checkpoint_path = save_checkpoint(state, checkpoint_dir / "last.pt")
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(state, checkpoint_dir / f"epoch_{epoch + 1:03d}.pt")
        if cfg.eval_every and eval_pairs and (epoch + 1) % cfg.eval_every == 0:
            report = evaluate_pairs(
                copy.deepcopy(model), eval_pairs, dataset.cfg, metrics_cfg, name="val", device=device
            )
            logger.info("epoch %d validation: %s", epoch + 1, report.datasets["val"].values())

    if base_fingerprint(model) != base_digest:
        raise Sam3UNetError("Frozen encoder weights changed during training")
    if device.type == "cuda":
        logger.info("Peak GPU memory: %.2f GiB", torch.cuda.max_memory_allocated(device) / 2**30)

    final = _snapshot(model, optimizer, max(start_epoch, cfg.epochs), step, config_text)
    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    history_path = None
    if out_dir is not None:
        history_path = write_history(history, out_dir / "loss_history.csv", append=resume is not None)
        if len(history):
            plot_history(pd.read_csv(history_path), out_dir / "loss_curve.png")
    if rows:
        logger.info("Finished %d steps; final loss %.4f", len(rows), rows[-1][2])
    return TrainingResult(
        checkpoint=final,
        history=history,
        census=census,
        checkpoint_path=checkpoint_path,
        history_path=history_path,
    )


@torch.no_grad()
def predict_probability(
    model: SAM3UNet,
    image: Image.Image,
    data_cfg: DataConfig,
    device: str | torch.device | None = None,
) -> np.ndarray:
    """Sigmoid of the d1 head, resized back to the image's own (H, W)."""

    device = resolve_device(device)
    model.eval().to(device)
    batch = image_to_tensor(image, data_cfg)[None].to(device)
    prob = torch.sigmoid(model(batch).prediction.float())
    prob = F.interpolate(prob, size=(image.height, image.width), mode="bilinear", align_corners=False)
    return prob[0, 0].cpu().double().numpy()


def to_uint8(prob: np.ndarray) -> np.ndarray:
    return np.clip(np.round(255.0 * prob), 0, 255).astype(np.uint8)


def predict(
    model: SAM3UNet,
    image_path: str | os.PathLike[str],
    out_path: str | os.PathLike[str],
    data_cfg: DataConfig,
    device: str | torch.device | None = None,
) -> np.ndarray:
    """Write an 8-bit grayscale mask the size of the input image."""

    prob = predict_probability(model, load_image(Path(image_path)), data_cfg, device)
    out = to_uint8(prob)
    target = Path(out_path)
    target.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out).save(target)
    return out


def write_predictions(
    model: SAM3UNet,
    pairs: Sequence[SamplePair],
    out_dir: Path,
    data_cfg: DataConfig,
    device: str | torch.device | None = None,
) -> Path:
    for pair in tqdm(pairs, desc=out_dir.name, leave=False):
        predict(model, pair.image_path, out_dir / f"{pair.id}.png", data_cfg, device)
    return out_dir


def evaluate_pairs(
    model: SAM3UNet,
    pairs: Sequence[SamplePair],
    data_cfg: DataConfig,
    metrics_cfg: MetricsConfig = MetricsConfig(),
    *,
    name: str = "eval",
    device: str | torch.device | None = None,
) -> MetricsReport:
    """In-memory scores at each ground truth's native resolution."""

    rows = []
    for pair in pairs:
        prob = predict_probability(model, load_image(pair.image_path), data_cfg, device)
        gt = read_gt(pair.mask_path)
        if gt.shape != prob.shape:
            prob = F.interpolate(
                torch.from_numpy(prob)[None, None], size=gt.shape, mode="bilinear", align_corners=False
            )[0, 0].numpy()
        rows.append(score_pair(prob, gt, metrics_cfg))
    return aggregate(name, rows)


__all__ = [
    "CHECKPOINT_VERSION",
    "Checkpoint",
    "TrainConfig",
    "TrainingResult",
    "base_fingerprint",
    "evaluate_pairs",
    "load_checkpoint",
    "lr_at",
    "plot_history",
    "predict",
    "predict_probability",
    "resolve_device",
    "save_checkpoint",
    "to_uint8",
    "train",
    "write_history",
    "write_predictions",
]
