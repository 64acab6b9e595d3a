"""Classification metrics and multi-run aggregation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence

import numpy as np
from scipy import stats

METRIC_NAMES = ("f1", "auroc", "recall", "specificity")


class SingleClassError(ValueError):
    """Raised when a ranking metric is asked for with only one class present."""


def _as_binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ValueError(f"labels must be 1-d, got shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return y.astype(bool)


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties counting one half.

    Computed from average ranks (Mann-Whitney U).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    if s.shape != y.shape:
        raise ValueError(f"scores shape {s.shape} != labels shape {y.shape}")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUROC needs both positive and negative labels")
    ranks = stats.rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int


def confusion(scores, labels, threshold: float = 0.5) -> Confusion:
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    pred = s >= threshold
    return Confusion(int(np.sum(pred & y)), int(np.sum(pred & ~y)),
                     int(np.sum(~pred & ~y)), int(np.sum(~pred & y)))


def threshold_metrics(scores, labels, threshold: float = 0.5) -> Dict[str, float]:
    """F1, recall and specificity of the rule ``score >= threshold``, as fractions."""
    y = _as_binary(labels)
    if y.all() or not y.any():
        raise SingleClassError("threshold metrics need both classes present")
    c = confusion(scores, y, threshold)
    recall = c.tp / (c.tp + c.fn)
    specificity = c.tn / (c.tn + c.fp)
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"f1": f1, "recall": recall, "specificity": specificity}


@dataclass(frozen=True)
class MetricSet:
    """Per-run metrics in percent."""

    f1: float
    auroc: float
    recall: float
    specificity: float

    def __post_init__(self):
        for name in METRIC_NAMES:
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} must be a percentage in [0, 100], got {v}")

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def evaluate_scores(scores, labels, threshold: float = 0.5) -> MetricSet:
    t = threshold_metrics(scores, labels, threshold)
    return MetricSet(f1=100 * t["f1"], auroc=100 * auroc(scores, labels),
                     recall=100 * t["recall"], specificity=100 * t["specificity"])


@dataclass(frozen=True)
class Aggregate:
    mean: float
    ci95: float  # half-width
    max: float
    n_runs: int


def t_interval(values: Sequence[float], confidence: float = 0.95) -> Aggregate:
    """Mean and Student-t half-width t(1 - alpha/2, n - 1) * s / sqrt(n)."""
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    if n < 2:
        raise ValueError(f"aggregation needs at least 2 runs, got {n}")
    # shifting by the first value keeps identical runs at exactly zero spread
    d = v - v[0]
    mean = float(v[0] + d.mean())
    s = float(d.std(ddof=1))
    q = float(stats.t.ppf(0.5 + confidence / 2.0, n - 1))
    half = q * s / np.sqrt(n)
    return Aggregate(mean, float(half), float(v.max()), n)


def aggregate_runs(per_run: Sequence[MetricSet]) -> Dict[str, Aggregate]:
    if len(per_run) < 2:
        raise ValueError(f"aggregation needs at least 2 runs, got {len(per_run)}")
    return {name: t_interval([getattr(m, name) for m in per_run]) for name in METRIC_NAMES}


__all__ = [
    "Aggregate", "Confusion", "METRIC_NAMES", "MetricSet", "SingleClassError", "aggregate_runs",
    "auroc", "confusion", "evaluate_scores", "t_interval", "threshold_metrics",
]
