"""Segmentation metrics on binary masks: Dice, pixel accuracy, average Hausdorff."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

THRESHOLD = 0.5


@dataclass(frozen=True)
class MetricReport:
    dice: float
    accuracy: float
    ahd: float

    def __post_init__(self):
        if not (0.0 <= self.dice <= 1.0 and 0.0 <= self.accuracy <= 1.0):
            raise ValueError(f"dice/accuracy out of [0, 1]: {self}")
        if not self.ahd >= 0.0:
            raise ValueError(f"average Hausdorff distance must be non-negative: {self}")


def _plane(mask) -> np.ndarray:
    m = np.asarray(mask)
    while m.ndim > 2 and m.shape[0] == 1:
        m = m[0]
    if m.ndim != 2:
        raise ValueError(f"expected a single-channel 2-d mask, got shape {np.shape(mask)}")
    return m.astype(bool)


def _pair(pred, true) -> tuple[np.ndarray, np.ndarray]:
    a, b = _plane(pred), _plane(true)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def binarize(prob, threshold: float = THRESHOLD) -> np.ndarray:
    return np.asarray(prob) >= threshold


def dice(pred_mask, true_mask) -> float:
    a, b = _pair(pred_mask, true_mask)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def accuracy(pred_mask, true_mask) -> float:
    a, b = _pair(pred_mask, true_mask)
    return float((a == b).mean())


def average_hausdorff(pred_mask, true_mask) -> float:
    """Symmetric mean of nearest-foreground distances, in pixels.

    If exactly one mask is empty the image diagonal is returned; two empty
    masks give 0.
    """
    a, b = _pair(pred_mask, true_mask)
    na, nb = a.sum(), b.sum()
    if na == 0 and nb == 0:
        return 0.0
    if na == 0 or nb == 0:
        return math.hypot(*a.shape)
    to_b = distance_transform_edt(~b)
    to_a = distance_transform_edt(~a)
    return float(0.5 * (to_b[a].mean() + to_a[b].mean()))


def evaluate(pred_masks: Sequence, true_masks: Sequence) -> list[MetricReport]:
    if len(pred_masks) != len(true_masks):
        raise ValueError("prediction and target counts differ")
    return [MetricReport(dice(p, t), accuracy(p, t), average_hausdorff(p, t))
            for p, t in zip(pred_masks, true_masks)]


def mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("no reports to average")
    return MetricReport(float(np.mean([r.dice for r in reports])),
                        float(np.mean([r.accuracy for r in reports])),
                        float(np.mean([r.ahd for r in reports])))


def reports_to_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    buf.write("sample_id,dice,accuracy,ahd\n")
    for i, r in enumerate(reports):
        buf.write(f"{i},{r.dice!r},{r.accuracy!r},{r.ahd!r}\n")
    return buf.getvalue()
