"""Camera-mask-aware semantic occupancy metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

FREE = 0


@dataclass(frozen=True, eq=False)
class OccupancyVolume:
    """Integer class labels ``[Xn, Yn, Zn]`` and an optional visibility mask."""

    labels: np.ndarray
    n_classes: int
    mask: np.ndarray | None = None
    free_class: int = FREE

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if not np.issubdtype(labels.dtype, np.integer):
            raise ConfigError("occupancy labels must be integers")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ConfigError(f"labels outside 0..{self.n_classes - 1}")
        if not 0 <= self.free_class < self.n_classes:
            raise ConfigError("free class id out of range")
        object.__setattr__(self, "labels", labels.astype(np.int64))
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != labels.shape:
                raise ShapeError(f"mask {mask.shape} vs labels {labels.shape}")
            object.__setattr__(self, "mask", mask)


def confusion_matrix(pred: OccupancyVolume, gt: OccupancyVolume) -> np.ndarray:
    """``counts[i, j]`` = voxels with gt ``i`` and prediction ``j`` inside the gt mask."""
    if pred.labels.shape != gt.labels.shape:
        raise ShapeError(f"prediction {pred.labels.shape} vs ground truth {gt.labels.shape}")
    if pred.n_classes != gt.n_classes:
        raise ConfigError("prediction and ground truth disagree on the class count")
    g, p = gt.labels, pred.labels
    if gt.mask is not None:
        g, p = g[gt.mask], p[gt.mask]
    k = gt.n_classes
    return np.bincount(g.ravel() * k + p.ravel(), minlength=k * k).reshape(k, k)


def per_class_iou(counts: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the union is empty."""
    counts = np.asarray(counts, dtype=np.int64)
    inter = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - inter
    out = np.full(counts.shape[0], np.nan)
    seen = union > 0
    out[seen] = inter[seen] / union[seen]
    return out


def miou(counts, free_class: int | None = FREE, include_free: bool = False, strict: bool = False):
    """Per-class IoU and their mean.

    Classes with an empty union are left out of the mean (``strict`` counts
    them as 0).  The free class is left out unless ``include_free``.
    """
    iou = per_class_iou(counts)
    keep = np.ones(iou.size, dtype=bool)
    if free_class is not None and not include_free:
        keep[free_class] = False
    vals = np.where(np.isnan(iou), 0.0, iou)[keep] if strict else iou[keep & ~np.isnan(iou)]
    return iou, (float(vals.mean()) if vals.size else float("nan"))


def format_report(iou: np.ndarray, mean: float) -> str:
    lines = [f"class_{c} {v:.6f}" for c, v in enumerate(iou)]
    lines.append(f"miou {mean:.6f}")
    return "\n".join(lines) + "\n"


def masked_accuracy(pred_labels: np.ndarray, gt: OccupancyVolume) -> float:
    sel = gt.mask if gt.mask is not None else np.ones(gt.labels.shape, dtype=bool)
    if not sel.any():
        return float("nan")
    return float(np.mean(np.asarray(pred_labels)[sel] == gt.labels[sel]))
