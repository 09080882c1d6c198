"""Tracking metrics over per-frame pixel boxes ``(x, y, w, h)``.

- PR: fraction of frames whose center error is within 20 px.
- SR: mean over 21 IoU thresholds {0, 0.05, ..., 1} of the fraction of
  frames with IoU strictly above the threshold.
- NPR: PR with the center offset divided by the ground-truth extent,
  thresholded at 0.2.
- MPR / MSR: the best PR / SR over several annotation streams.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from thermotrack.model.head import DegenerateBoxError

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_THRESHOLDS = np.arange(0, 51, dtype=float)


def _boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=float)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != 4:
        msg = f"expected N×4 boxes, got shape {arr.shape}"
        raise ValueError(msg)
    return arr


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _boxes(pred), _boxes(gt)
    if len(p) != len(g):
        msg = f"{len(p)} predictions for {len(g)} ground-truth boxes"
        raise ValueError(msg)
    if len(p) == 0:
        msg = "no frames to evaluate"
        raise ValueError(msg)
    return p, g


def ious(pred, gt) -> np.ndarray:
    """Per-frame intersection over union.

    Raises
    ------
    DegenerateBoxError
        If any box has non-positive width or height.
    """
    p, g = _pair(pred, gt)
    if np.any(p[:, 2:] <= 0) or np.any(g[:, 2:] <= 0):
        msg = "IoU of a box with non-positive extent"
        raise DegenerateBoxError(msg)
    lo = np.maximum(p[:, :2], g[:, :2])
    hi = np.minimum(p[:, :2] + p[:, 2:], g[:, :2] + g[:, 2:])
    iw, ih = np.clip(hi - lo, 0, None).T
    inter = iw * ih
    union = p[:, 2] * p[:, 3] + g[:, 2] * g[:, 3] - inter
    return inter / union


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    return float(ious(a, b)[0])


def center_errors(pred, gt) -> np.ndarray:
    p, g = _pair(pred, gt)
    return np.hypot(
        (p[:, 0] + p[:, 2] / 2) - (g[:, 0] + g[:, 2] / 2),
        (p[:, 1] + p[:, 3] / 2) - (g[:, 1] + g[:, 3] / 2),
    )


def center_error(a: Sequence[float], b: Sequence[float]) -> float:
    return float(center_errors(a, b)[0])


def normalized_center_errors(pred, gt) -> np.ndarray:
    """Center offset divided component-wise by the ground-truth extent."""
    p, g = _pair(pred, gt)
    if np.any(g[:, 2:] <= 0):
        msg = "ground-truth box with zero extent cannot normalize a center error"
        raise DegenerateBoxError(msg)
    dx = ((p[:, 0] + p[:, 2] / 2) - (g[:, 0] + g[:, 2] / 2)) / g[:, 2]
    dy = ((p[:, 1] + p[:, 3] / 2) - (g[:, 1] + g[:, 3] / 2)) / g[:, 3]
    return np.hypot(dx, dy)


def precision_rate(errors: Sequence[float], threshold: float = 20.0) -> float:
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        msg = "precision_rate of an empty error list"
        raise ValueError(msg)
    return float(np.mean(errors <= threshold))


def success_curve(
    values: Sequence[float], thresholds: np.ndarray = SUCCESS_THRESHOLDS
) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        msg = "success curve of an empty IoU list"
        raise ValueError(msg)
    return (values[None, :] > thresholds[:, None]).mean(axis=1)


def success_rate(values: Sequence[float]) -> float:
    """Area under the 21-point success curve."""
    return float(success_curve(values).mean())


def precision_curve(errors: Sequence[float], thresholds: np.ndarray = PRECISION_THRESHOLDS):
    errors = np.asarray(errors, dtype=float)
    return (errors[None, :] <= thresholds[:, None]).mean(axis=1)


def norm_precision_rate(pred, gt, threshold: float = 0.2) -> float:
    return precision_rate(normalized_center_errors(pred, gt), threshold)


def max_metrics(pred, streams: Sequence, threshold: float = 20.0) -> tuple[float, float]:
    """Best PR and best SR over the given annotation streams."""
    streams = [s for s in streams if s is not None]
    if not streams:
        msg = "max_metrics needs at least one annotation stream"
        raise ValueError(msg)
    prs = [precision_rate(center_errors(pred, s), threshold) for s in streams]
    srs = [success_rate(ious(pred, s)) for s in streams]
    return max(prs), max(srs)


@dataclass
class MetricSummary:
    PR: float
    SR: float
    NPR: float
    MPR: float
    MSR: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def summarize(
    pred,
    gt,
    gt_alt=None,
    *,
    pr_threshold: float = 20.0,
    npr_threshold: float = 0.2,
) -> MetricSummary:
    """All five metrics for one track."""
    mpr, msr = max_metrics(pred, [gt, gt_alt], pr_threshold)
    return MetricSummary(
        PR=precision_rate(center_errors(pred, gt), pr_threshold),
        SR=success_rate(ious(pred, gt)),
        NPR=norm_precision_rate(pred, gt, npr_threshold),
        MPR=mpr,
        MSR=msr,
    )


def summary_table(summaries: Mapping[str, MetricSummary]) -> pd.DataFrame:
    """One row per run, one column per metric."""
    return pd.DataFrame({name: s.to_dict() for name, s in summaries.items()}).T


def metric_rows(summary: MetricSummary) -> pd.DataFrame:
    """Long ``metric,value`` table for CSV output."""
    values = summary.to_dict()
    return pd.DataFrame({"metric": list(values), "value": list(values.values())})


def curves(pred, gt) -> pd.DataFrame:
    """Success and precision curves for plotting, in long form."""
    success = success_curve(ious(pred, gt))
    precision = precision_curve(center_errors(pred, gt))
    return pd.concat(
        [
            pd.DataFrame({"curve": "success", "threshold": SUCCESS_THRESHOLDS, "value": success}),
            pd.DataFrame(
                {"curve": "precision", "threshold": PRECISION_THRESHOLDS, "value": precision}
            ),
        ],
        ignore_index=True,
    )
