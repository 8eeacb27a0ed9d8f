"""Dice, mIoU, Boundary IoU and report serialisation.

FLOPs convention: one multiply-accumulate counts as 2 FLOPs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt


@dataclass
class ConfusionCounts:
    """Per-class one-vs-rest pixel counts (arrays of length C)."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @classmethod
    def zeros(cls, num_classes: int) -> ConfusionCounts:
        z = np.zeros(num_classes, dtype=np.int64)
        return cls(z.copy(), z.copy(), z.copy(), z.copy())

    @property
    def num_classes(self) -> int:
        return len(self.tp)


def _check_masks(pred: np.ndarray, gt: np.ndarray, num_classes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if num_classes is not None:
        for name, m in (("pred", pred), ("gt", gt)):
            if m.size and (m.min() < 0 or m.max() >= num_classes):
                raise ValueError(f"{name} mask values must lie in [0, {num_classes})")
    return pred, gt


def confusion(pred_mask: np.ndarray, gt_mask: np.ndarray, num_classes: int) -> ConfusionCounts:
    pred, gt = _check_masks(pred_mask, gt_mask, num_classes)
    joint = np.bincount(gt.ravel().astype(np.int64) * num_classes + pred.ravel().astype(np.int64), minlength=num_classes**2)
    mat = joint.reshape(num_classes, num_classes)  # rows: truth, cols: prediction
    tp = np.diag(mat).copy()
    fp = mat.sum(axis=0) - tp
    fn = mat.sum(axis=1) - tp
    tn = pred.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def dice_from_counts(tp: int, fp: int, fn: int) -> float:
    """2TP / (2TP + FN + FP); 1 when both masks are empty."""
    den = 2 * tp + fn + fp
    return 1.0 if den == 0 else 2.0 * tp / den


def dice(counts: ConfusionCounts, foreground: int = 1) -> float:
    return dice_from_counts(int(counts.tp[foreground]), int(counts.fp[foreground]), int(counts.fn[foreground]))


def class_iou(counts: ConfusionCounts) -> np.ndarray:
    """TP / (TP + FP + FN) per class, with empty-vs-empty counted as 1."""
    den = counts.tp + counts.fp + counts.fn
    return np.where(den == 0, 1.0, counts.tp / np.maximum(den, 1))


def miou(counts: ConfusionCounts) -> float:
    return float(class_iou(counts).mean())


def boundary_band(mask: np.ndarray, d: float) -> np.ndarray:
    """Pixels of ``mask`` within distance ``d`` of the background.

    Outside the frame counts as background, so a full-frame mask has a band
    along the image border.
    """
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    dist = distance_transform_edt(padded)[1:-1, 1:-1]
    return m & (dist <= d)


def default_boundary_width(shape: tuple[int, int]) -> int:
    """2% of the image diagonal, at least one pixel."""
    return max(1, int(round(0.02 * math.hypot(*shape))))


def biou(pred_mask: np.ndarray, gt_mask: np.ndarray, d: float | None = None) -> float:
    """IoU of the d-wide inner boundary bands of two binary masks (1 when both bands are empty)."""
    pred, gt = _check_masks(pred_mask, gt_mask)
    for name, m in (("pred", pred), ("gt", gt)):
        if m.size and not np.isin(m, (0, 1)).all():
            raise ValueError(f"biou needs binary masks; {name} has values outside {{0, 1}}")
    if d is None:
        d = default_boundary_width(gt.shape)
    if d < 1:
        raise ValueError("boundary width d must be >= 1 pixel")
    gb, pb = boundary_band(gt, d), boundary_band(pred, d)
    union = np.count_nonzero(gb | pb)
    if union == 0:
        return 1.0
    return np.count_nonzero(gb & pb) / union


def dsconv_ratio(ci: int, co: int, k: int) -> float:
    """Parameter ratio of a depthwise-separable to a conventional KxK convolution (bias-free)."""
    if min(ci, co, k) < 1:
        raise ValueError("channel counts and kernel size must be >= 1")
    ratio = (ci * k * k + co * ci) / (co * ci * k * k)
    closed = 1.0 / co + 1.0 / (k * k)
    assert abs(ratio - closed) <= 1e-12, (ratio, closed)
    return ratio


# -- reports ------------------------------------------------------------------


@dataclass
class ImageMetrics:
    image_id: str
    dice: float
    miou: float
    biou: float


@dataclass
class MetricReport:
    split: str
    dice: float
    miou: float
    biou: float
    params: int = 0
    flops: int = 0
    per_class_iou: list[float] = field(default_factory=list)
    images: list[ImageMetrics] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [
            json.dumps({"record": "image", "split": self.split, "image_id": m.image_id, "dice": m.dice, "miou": m.miou, "biou": m.biou}, sort_keys=True)
            for m in self.images
        ]
        lines.append(
            json.dumps(
                {
                    "record": "aggregate",
                    "split": self.split,
                    "dice": self.dice,
                    "miou": self.miou,
                    "biou": self.biou,
                    "per_class_iou": self.per_class_iou,
                    "params": self.params,
                    "flops": self.flops,
                    "flops_convention": "2 FLOPs per multiply-accumulate",
                    "num_images": len(self.images),
                },
                sort_keys=True,
            )
        )
        return "\n".join(lines) + "\n"

    def write(self, jsonl_path, csv_path) -> None:
        with open(jsonl_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_jsonl())
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["split", "image_id", "dice", "miou", "biou"])
            for m in self.images:
                w.writerow([self.split, m.image_id, repr(m.dice), repr(m.miou), repr(m.biou)])


class MetricAccumulator:
    """Global confusion over a split plus per-image Boundary IoU.

    Aggregate Dice/mIoU come from the summed confusion matrix; aggregate BIoU is
    the mean of per-image values.
    """

    def __init__(self, num_classes: int = 2, foreground: int = 1, d: float | None = None):
        self.num_classes = num_classes
        self.foreground = foreground
        self.d = d
        self.total = ConfusionCounts.zeros(num_classes)
        self.images: list[ImageMetrics] = []

    def add(self, image_id: str, pred: np.ndarray, gt: np.ndarray) -> ImageMetrics:
        counts = confusion(pred, gt, self.num_classes)
        self.total = self.total + counts
        fg_pred = (np.asarray(pred) == self.foreground).astype(np.uint8)
        fg_gt = (np.asarray(gt) == self.foreground).astype(np.uint8)
        m = ImageMetrics(image_id, dice(counts, self.foreground), miou(counts), biou(fg_pred, fg_gt, self.d))
        self.images.append(m)
        return m

    def report(self, split: str, params: int = 0, flops: int = 0) -> MetricReport:
        b = float(np.mean([m.biou for m in self.images])) if self.images else 1.0
        return MetricReport(
            split=split,
            dice=dice(self.total, self.foreground),
            miou=miou(self.total),
            biou=b,
            params=params,
            flops=flops,
            per_class_iou=[float(v) for v in class_iou(self.total)],
            images=list(self.images),
        )
