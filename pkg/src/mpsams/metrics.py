"""Pixelwise binary segmentation metrics (PPV, sensitivity, Dice)."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Literal

import numpy as np


@dataclass(frozen=True)
class SegMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    ppv: float
    sen: float
    dsc: float

    def as_dict(self) -> dict:
        return asdict(self)


def binarize(prob_map, threshold: float = 0.5) -> np.ndarray:
    """Threshold a probability map; values equal to the threshold count as positive."""
    return np.asarray(prob_map) >= threshold


def compute_metrics(pred, gt) -> SegMetrics:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)

    if tp + fp + fn == 0:
        # both masks empty
        return SegMetrics(tp, fp, fn, tn, 1.0, 1.0, 1.0)
    ppv = tp / (tp + fp) if tp + fp else 0.0
    sen = tp / (tp + fn) if tp + fn else 0.0
    dsc = 2 * tp / (2 * tp + fp + fn)
    return SegMetrics(tp, fp, fn, tn, ppv, sen, dsc)


def aggregate(metrics: Iterable[SegMetrics], mode: Literal["per_image", "pooled"] = "per_image") -> SegMetrics:
    """Combine per-image metrics over a dataset.

    ``per_image`` averages the three ratios across images and sums the counts;
    ``pooled`` recomputes the ratios from summed confusion counts.
    """
    metrics = list(metrics)
    if not metrics:
        raise ValueError("no metrics to aggregate")
    tp, fp, fn, tn = (sum(getattr(m, k) for m in metrics) for k in ("tp", "fp", "fn", "tn"))
    if mode == "pooled":
        pooled = compute_metrics(np.zeros(0, bool), np.zeros(0, bool))  # empty-mask convention
        if tp + fp + fn:
            pooled = SegMetrics(
                tp, fp, fn, tn,
                tp / (tp + fp) if tp + fp else 0.0,
                tp / (tp + fn) if tp + fn else 0.0,
                2 * tp / (2 * tp + fp + fn),
            )
        return SegMetrics(tp, fp, fn, tn, pooled.ppv, pooled.sen, pooled.dsc)
    if mode != "per_image":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    return SegMetrics(
        tp, fp, fn, tn,
        float(np.mean([m.ppv for m in metrics])),
        float(np.mean([m.sen for m in metrics])),
        float(np.mean([m.dsc for m in metrics])),
    )
