"""Evaluation metrics and the run report row.

Classification metrics take plain numpy arrays: predicted labels or
normalized class probabilities, never logits. The report row serializes in
a fixed column order: Loss, MAE, Accuracy, F1, Train Time (h), Memory (MB),
Params.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass

import numpy as np

from .errors import MetricError
from .numerics import active_probe

PROB_CLAMP = 1e-12
ROW_SUM_TOL = 1e-6

# Column order for every report artifact (CSV and Markdown).
METRIC_COLUMNS = ("loss", "mae", "accuracy", "f1", "train_time_h", "memory_mb", "params")
METRIC_TITLES = {
    "loss": "Loss",
    "mae": "MAE",
    "accuracy": "Accuracy",
    "f1": "F1",
    "train_time_h": "Train Time (h)",
    "memory_mb": "Memory (MB)",
    "params": "Params",
}


def _as_labels(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise MetricError(f"{name} must be 1-d, got shape {arr.shape}")
    if arr.size == 0:
        raise MetricError(f"{name} must be non-empty")
    if not np.issubdtype(arr.dtype, np.integer):
        raise MetricError(f"{name} must be integers, got dtype {arr.dtype}")
    return arr.astype(np.int64)


def _check_label_range(arr: np.ndarray, num_classes: int, name: str) -> None:
    if arr.min() < 0 or arr.max() >= num_classes:
        raise MetricError(f"{name} out of range [0, {num_classes})")


def _confusion(pred: np.ndarray, true: np.ndarray, num_classes: int):
    """Per-class one-vs-rest counts (tp, fp, fn, tn)."""
    tp = np.zeros(num_classes, dtype=np.int64)
    fp = np.zeros(num_classes, dtype=np.int64)
    fn = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        tp[c] = int(np.sum((pred == c) & (true == c)))
        fp[c] = int(np.sum((pred == c) & (true != c)))
        fn[c] = int(np.sum((pred != c) & (true == c)))
    tn = pred.size - tp - fp - fn
    return tp, fp, fn, tn


def multiclass_accuracy(pred, true, num_classes: int) -> float:
    """Mean over classes of the one-vs-rest accuracy (TP_c + TN_c) / N."""
    p = _as_labels(pred, "pred")
    t = _as_labels(true, "true")
    if p.shape != t.shape:
        raise MetricError(f"pred shape {p.shape} != true shape {t.shape}")
    if num_classes < 2:
        raise MetricError(f"num_classes must be >= 2, got {num_classes}")
    _check_label_range(p, num_classes, "pred")
    _check_label_range(t, num_classes, "true")
    tp, _, _, tn = _confusion(p, t, num_classes)
    return float(np.mean((tp + tn) / p.size))


def macro_f1(pred, true, num_classes: int) -> float:
    """Unweighted mean of per-class F1; empty denominators contribute 0."""
    p = _as_labels(pred, "pred")
    t = _as_labels(true, "true")
    if p.shape != t.shape:
        raise MetricError(f"pred shape {p.shape} != true shape {t.shape}")
    if num_classes < 2:
        raise MetricError(f"num_classes must be >= 2, got {num_classes}")
    _check_label_range(p, num_classes, "pred")
    _check_label_range(t, num_classes, "true")
    tp, fp, fn, _ = _confusion(p, t, num_classes)
    scores = np.zeros(num_classes)
    for c in range(num_classes):
        precision = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] else 0.0
        recall = tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] else 0.0
        if precision + recall:
            scores[c] = 2.0 * precision * recall / (precision + recall)
    return float(scores.mean())


def _check_probs(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise MetricError(f"probabilities must be (N, n), got shape {p.shape}")
    y = _as_labels(labels, "labels")
    if y.shape[0] != p.shape[0]:
        raise MetricError(f"labels count {y.shape[0]} != rows {p.shape[0]}")
    _check_label_range(y, p.shape[1], "labels")
    if not np.isfinite(p).all():
        raise MetricError("probabilities contain non-finite values")
    if (p < 0).any():
        raise MetricError("probabilities contain negative values")
    row_sums = p.sum(axis=1)
    bad = np.abs(row_sums - 1.0) > ROW_SUM_TOL
    if bad.any():
        i = int(np.argmax(bad))
        raise MetricError(f"row {i} sums to {row_sums[i]:.9f}, expected 1 +- {ROW_SUM_TOL}")
    return p, y


def cross_entropy(probs, labels) -> float:
    """Mean negative log of the true-class probability, clamped at 1e-12."""
    p, y = _check_probs(probs, labels)
    picked = np.clip(p[np.arange(p.shape[0]), y], PROB_CLAMP, None)
    return float(-np.mean(np.log(picked)))


def mae(probs, labels) -> float:
    """Mean absolute one-hot error over samples and classes.

    Uniform rows give 2(n-1)/n^2; for n=3 that is 4/9.
    """
    p, y = _check_probs(probs, labels)
    onehot = np.zeros_like(p)
    onehot[np.arange(p.shape[0]), y] = 1.0
    return float(np.abs(onehot - p).mean())


# ---------------------------------------------------------------------------
# Probes
# ---------------------------------------------------------------------------


class EpochTimer:
    """Accumulates wall-clock seconds across epochs; reports hours."""

    def __init__(self):
        self.seconds: list[float] = []

    @contextlib.contextmanager
    def epoch(self):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.seconds.append(time.perf_counter() - start)

    @property
    def total_seconds(self) -> float:
        return float(sum(self.seconds))

    @property
    def hours(self) -> float:
        return self.total_seconds / 3600.0


def allocation_high_water_mark() -> int:
    """Peak tensor-buffer bytes of the active memory probe (0 if none)."""
    probe = active_probe()
    return probe.peak_bytes if probe is not None else 0


# ---------------------------------------------------------------------------
# Report row
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    loss: float
    mae: float
    accuracy: float
    f1: float
    train_time_h: float
    memory_mb: float
    params: int

    def validate(self) -> "MetricsReport":
        for name in ("loss", "mae", "train_time_h", "memory_mb"):
            if getattr(self, name) < 0:
                raise MetricError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("accuracy", "f1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"{name} must lie in [0, 1], got {v}")
        if self.params < 0:
            raise MetricError(f"params must be >= 0, got {self.params}")
        return self

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_COLUMNS}

    def to_csv_row(self) -> list[str]:
        return [format_metric(name, getattr(self, name)) for name in METRIC_COLUMNS]

    @staticmethod
    def csv_header() -> list[str]:
        return list(METRIC_COLUMNS)

    @staticmethod
    def mean(reports: list["MetricsReport"]) -> "MetricsReport":
        """Fold aggregate: metric means, summed time, maxed memory."""
        if not reports:
            raise MetricError("cannot aggregate an empty report list")
        return MetricsReport(
            loss=float(np.mean([r.loss for r in reports])),
            mae=float(np.mean([r.mae for r in reports])),
            accuracy=float(np.mean([r.accuracy for r in reports])),
            f1=float(np.mean([r.f1 for r in reports])),
            train_time_h=float(sum(r.train_time_h for r in reports)),
            memory_mb=float(max(r.memory_mb for r in reports)),
            params=max(r.params for r in reports),
        )


def format_metric(name: str, value) -> str:
    """One shared numeric formatting for CSV and Markdown."""
    if name == "params":
        return str(int(value))
    if name in ("train_time_h",):
        return f"{float(value):.6f}"
    if name in ("memory_mb",):
        return f"{float(value):.3f}"
    return f"{float(value):.4f}"
