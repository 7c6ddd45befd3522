"""Segmentation measures: IoU, F-measure, MAE, S-measure and mean E-measure.

Predictions are float maps in [0, 1]; ground truths are binary maps (any dtype,
foreground where the value exceeds 0.5). All functions work on single images;
dataset scores are plain means over images.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from PIL import Image
from scipy import ndimage

from sam3unet.errors import ConfigError, DatasetError, ShapeError
from sam3unet.paths import MASK_SUFFIXES, list_files

logger = logging.getLogger(__name__)

METRIC_KEYS = ("iou", "f_measure", "mae", "s_measure", "e_measure_mean")
NUM_THRESHOLDS = 256
F_MODES = ("adaptive", "max")


@dataclass(frozen=True)
class MetricsConfig:
    beta2: float = 0.3
    f_mode: str = "adaptive"
    iou_threshold: float = 0.5
    s_alpha: float = 0.5
    n_jobs: int = 1
    strict: bool = False

    def __post_init__(self) -> None:
        if self.f_mode not in F_MODES:
            raise ConfigError(f"f_mode must be one of {F_MODES}, got {self.f_mode!r}", key="f_mode")
        if not 0.0 <= self.s_alpha <= 1.0:
            raise ConfigError(f"s_alpha must lie in [0, 1], got {self.s_alpha}", key="s_alpha")
        if self.beta2 <= 0:
            raise ConfigError(f"beta2 must be positive, got {self.beta2}", key="beta2")


def _as_arrays(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt > 0.5


def _binarize(pred: np.ndarray, threshold: float) -> np.ndarray:
    # Zero-valued pixels are never foreground, so an empty map stays empty at threshold 0.
    return (pred >= threshold) & (pred > 0)


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _as_arrays(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def iou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    pred, gt = _as_arrays(pred, gt)
    binary = pred >= threshold
    union = np.count_nonzero(binary | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(binary & gt) / union


def _f_score(binary: np.ndarray, gt: np.ndarray, beta2: float) -> float:
    tp = np.count_nonzero(binary & gt)
    precision = _safe_div(tp, np.count_nonzero(binary))
    recall = _safe_div(tp, np.count_nonzero(gt))
    return _safe_div((1 + beta2) * precision * recall, beta2 * precision + recall)


def thresholds() -> np.ndarray:
    return np.linspace(0.0, 1.0, NUM_THRESHOLDS)


def f_measure(
    pred: np.ndarray, gt: np.ndarray, beta2: float = 0.3, mode: str = "adaptive"
) -> float:
    pred, gt = _as_arrays(pred, gt)
    if mode == "adaptive":
        threshold = min(2.0 * float(pred.mean()), 1.0)
        return _f_score(_binarize(pred, threshold), gt, beta2)
    if mode == "max":
        return max(_f_score(_binarize(pred, t), gt, beta2) for t in thresholds())
    raise ConfigError(f"Unknown F-measure mode {mode!r}", key="f_mode")


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    mean = float(values.mean())
    sigma = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + sigma)


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    fg_ratio = float(gt.mean())
    fg = _object_score(pred[gt])
    bg = _object_score(1.0 - pred[~gt])
    return fg_ratio * fg + (1.0 - fg_ratio) * bg


def _centroid(gt: np.ndarray) -> Tuple[int, int]:
    height, width = gt.shape
    if not gt.any():
        return int(np.round(height / 2)) + 1, int(np.round(width / 2)) + 1
    cy, cx = ndimage.center_of_mass(gt)
    return int(np.round(cy)) + 1, int(np.round(cx)) + 1


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    gt = gt.astype(np.float64)
    x, y = float(pred.mean()), float(gt.mean())
    norm = max(n - 1, 1)
    sigma_x = float(((pred - x) ** 2).sum()) / norm
    sigma_y = float(((gt - y) ** 2).sum()) / norm
    sigma_xy = float(((pred - x) * (gt - y)).sum()) / norm
    alpha = 4.0 * x * y * sigma_xy
    beta = (x * x + y * y) * (sigma_x + sigma_y)
    if alpha != 0:
        return alpha / beta
    return 1.0 if beta == 0 else 0.0


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    height, width = gt.shape
    cy, cx = _centroid(gt)
    area = height * width
    quadrants = (
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, width)),
        (slice(cy, height), slice(0, cx)),
        (slice(cy, height), slice(cx, width)),
    )
    score = 0.0
    for rows, cols in quadrants:
        block = gt[rows, cols]
        if block.size:
            score += block.size / area * _ssim(pred[rows, cols], block)
    return score


def s_measure(pred: np.ndarray, gt: np.ndarray, alpha: float = 0.5) -> float:
    pred, gt = _as_arrays(pred, gt)
    fg_ratio = float(gt.mean())
    if fg_ratio == 0:
        return 1.0 - float(pred.mean())
    if fg_ratio == 1:
        return float(pred.mean())
    score = alpha * _s_object(pred, gt) + (1.0 - alpha) * _s_region(pred, gt)
    return float(min(max(score, 0.0), 1.0))


def _enhanced_alignment(binary: np.ndarray, gt: np.ndarray) -> float:
    if gt.all():
        return float(binary.mean())
    if not gt.any():
        return float(1.0 - binary.mean())
    a = binary - binary.mean()
    b = gt - gt.mean()
    den = a * a + b * b
    align = np.divide(2.0 * a * b, den, out=np.zeros_like(den), where=den > 0)
    return float(np.mean((align + 1.0) ** 2 / 4.0))


def e_measure_curve(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred, gt = _as_arrays(pred, gt)
    gt_float = gt.astype(np.float64)
    return np.array(
        [_enhanced_alignment(_binarize(pred, t).astype(np.float64), gt_float) for t in thresholds()]
    )


def e_measure_mean(pred: np.ndarray, gt: np.ndarray) -> float:
    return float(e_measure_curve(pred, gt).mean())


def score_pair(pred: np.ndarray, gt: np.ndarray, cfg: MetricsConfig = MetricsConfig()) -> Dict[str, float]:
    return {
        "iou": float(iou(pred, gt, cfg.iou_threshold)),
        "f_measure": float(f_measure(pred, gt, cfg.beta2, cfg.f_mode)),
        "mae": mae(pred, gt),
        "s_measure": s_measure(pred, gt, cfg.s_alpha),
        "e_measure_mean": e_measure_mean(pred, gt),
    }


@dataclass
class DatasetScores:
    iou: float
    f_measure: float
    mae: float
    s_measure: float
    e_measure_mean: float
    count: int
    missing: List[str] = field(default_factory=list)

    def values(self) -> Dict[str, float]:
        return {key: getattr(self, key) for key in METRIC_KEYS}


@dataclass
class MetricsReport:
    datasets: Dict[str, DatasetScores] = field(default_factory=dict)

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        merged = dict(self.datasets)
        merged.update(other.datasets)
        return MetricsReport(datasets=merged)

    def to_text(self) -> str:
        lines = []
        for name in sorted(self.datasets):
            scores = self.datasets[name]
            for key, value in scores.values().items():
                lines.append(f"{name}.{key} = {value:.4f}")
            lines.append(f"{name}.count = {scores.count}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> Dict[str, Dict[str, object]]:
        return {name: asdict(self.datasets[name]) for name in sorted(self.datasets)}

    def to_frame(self) -> pd.DataFrame:
        rows = {name: scores.values() for name, scores in self.datasets.items()}
        return pd.DataFrame.from_dict(rows, orient="index").sort_index()

    def write(self, out_dir: Path, stem: str = "metrics") -> Tuple[Path, Path]:
        out_dir.mkdir(parents=True, exist_ok=True)
        text_path = out_dir / f"{stem}.txt"
        json_path = out_dir / f"{stem}.json"
        text_path.write_text(self.to_text(), encoding="utf-8")
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return text_path, json_path


def aggregate(
    name: str, per_image: Sequence[Mapping[str, float]], missing: Sequence[str] = ()
) -> MetricsReport:
    if not per_image:
        raise DatasetError(f"No images evaluated for dataset '{name}'", names=list(missing))
    means = {key: float(np.mean([row[key] for row in per_image])) for key in METRIC_KEYS}
    scores = DatasetScores(**means, count=len(per_image), missing=list(missing))
    return MetricsReport(datasets={name: scores})


def read_gt(path: Path) -> np.ndarray:
    with Image.open(path) as image:
        return np.asarray(image.convert("L")) > 127


def read_prediction(path: Path, size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Grayscale 0-255 map as floats in [0, 1], bilinearly resized to ``size`` (w, h)."""

    with Image.open(path) as image:
        gray = image.convert("L")
        if size is not None and gray.size != size:
            gray = gray.resize(size, Image.Resampling.BILINEAR)
        return np.asarray(gray, dtype=np.float64) / 255.0


def _score_files(pred_path: Path, gt_path: Path, cfg: MetricsConfig) -> Dict[str, float]:
    gt = read_gt(gt_path)
    pred = read_prediction(pred_path, size=(gt.shape[1], gt.shape[0]))
    return score_pair(pred, gt, cfg)


def evaluate_folder(
    pred_dir: str | os.PathLike[str],
    gt_dir: str | os.PathLike[str],
    cfg: MetricsConfig = MetricsConfig(),
    *,
    name: Optional[str] = None,
) -> MetricsReport:
    """Score every ground-truth mask against the same-stem prediction."""

    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for directory in (pred_dir, gt_dir):
        if not directory.is_dir():
            raise FileNotFoundError(directory)
    dataset = name or (gt_dir.parent.name if gt_dir.name == "masks" else gt_dir.name)

    predictions = {p.stem: p for p in list_files(pred_dir, MASK_SUFFIXES + (".jpg", ".jpeg"))}
    pairs: List[Tuple[Path, Path]] = []
    missing: List[str] = []
    for gt_path in list_files(gt_dir, MASK_SUFFIXES):
        pred_path = predictions.get(gt_path.stem)
        if pred_path is None:
            missing.append(gt_path.name)
        else:
            pairs.append((pred_path, gt_path))

    if missing:
        if cfg.strict:
            raise DatasetError(f"Missing predictions for {missing}", names=missing)
        logger.warning("%s: %d ground truths without prediction: %s", dataset, len(missing), missing)

    per_image = Parallel(n_jobs=cfg.n_jobs)(
        delayed(_score_files)(pred_path, gt_path, cfg) for pred_path, gt_path in pairs
    )
    logger.info("%s: evaluated %d images", dataset, len(per_image))
    return aggregate(dataset, list(per_image), missing)


__all__ = [
    "METRIC_KEYS",
    "DatasetScores",
    "MetricsConfig",
    "MetricsReport",
    "aggregate",
    "e_measure_curve",
    "e_measure_mean",
    "evaluate_folder",
    "f_measure",
    "iou",
    "mae",
    "read_gt",
    "read_prediction",
    "s_measure",
    "score_pair",
    "thresholds",
]
