"""Segmentation and detection metrics.

Boxes from :func:`mask_to_bbox` use inclusive pixel indices; convert them
with :meth:`BBox.extent` before computing IoU so that a one-pixel box has
unit area.  :func:`iou` itself works on continuous coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.arange(101) / 100.0  # exact i/100, so recall k/n hits its grid point


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def extent(self) -> "BBox":
        """Continuous box covering the pixels of an inclusive index box."""
        return BBox(self.x_min, self.y_min, self.x_max + 1, self.y_max + 1)


def _binary(x) -> np.ndarray:
    return np.asarray(x) > 0.5


def dsc_metric(mask_a, mask_b) -> float:
    """``2|A n B| / (|A| + |B|)``; two empty masks agree perfectly (1.0)."""
    a, b = _binary(mask_a), _binary(mask_b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def mae_metric(pred_prob, truth) -> float:
    p, t = np.asarray(pred_prob, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shapes differ: {p.shape} vs {t.shape}")
    return float(np.mean(np.abs(p - t)))


def mask_to_bbox(mask) -> BBox | None:
    ys, xs = np.nonzero(np.asarray(mask) > 0.5)
    if xs.size == 0:
        return None
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


@dataclass
class PrecisionRecallCurve:
    scores: list
    true_positive: list
    n_truths: int
    iou_threshold: float

    @property
    def precision(self) -> np.ndarray:
        tp = np.cumsum(self.true_positive)
        return tp / np.arange(1, len(tp) + 1)

    @property
    def recall(self) -> np.ndarray:
        tp = np.cumsum(self.true_positive)
        return tp / self.n_truths if self.n_truths else np.zeros(len(tp))


def precision_recall_curve(detections, truths, iou_threshold: float) -> PrecisionRecallCurve:
    """Greedy matching in descending score order.

    ``detections[f]`` is a list of ``(score, BBox)`` for frame ``f`` and
    ``truths[f]`` is the frame's single ground-truth box or ``None``.
    """
    if len(detections) != len(truths):
        raise ValueError(f"{len(detections)} detection frames but {len(truths)} truth frames")
    flat = [(float(s), f, box) for f, dets in enumerate(detections) for s, box in dets]
    flat.sort(key=lambda d: -d[0])
    matched = set()
    tps = []
    for _, f, box in flat:
        hit = (truths[f] is not None and f not in matched
               and iou(box, truths[f]) >= iou_threshold)
        if hit:
            matched.add(f)
        tps.append(hit)
    n_truths = sum(1 for t in truths if t is not None)
    return PrecisionRecallCurve([d[0] for d in flat], tps, n_truths, iou_threshold)


def average_precision(detections, truths, iou_threshold: float = 0.5) -> float:
    """Area under the precision-recall curve with 101-point interpolation."""
    curve = precision_recall_curve(detections, truths, iou_threshold)
    if curve.n_truths == 0 or not curve.scores:
        return 0.0
    prec, rec = curve.precision, curve.recall
    envelope = np.maximum.accumulate(prec[::-1])[::-1]
    idx = np.searchsorted(rec, RECALL_POINTS, side="left")
    sampled = [float(envelope[i]) if i < len(envelope) else 0.0 for i in idx]
    return math.fsum(sampled) / len(RECALL_POINTS)


def mean_ap(detections, truths, thresholds=IOU_THRESHOLDS) -> float:
    return math.fsum(average_precision(detections, truths, t) for t in thresholds) / len(thresholds)
