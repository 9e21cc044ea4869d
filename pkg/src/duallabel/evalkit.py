"""Metrics, the combined empirical risk, and result aggregation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .datahub import Sample, TaskKind, presence_indicator
from .diffcore import ContractError


@dataclass(frozen=True)
class ClassificationMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def as_dict(self) -> dict[str, float]:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1}


def classification_metrics(predicted: Sequence[float], true: Sequence[float]) -> ClassificationMetrics:
    """Positive class is 1. Precision, recall and F1 are 0 when undefined."""
    p = np.asarray(predicted, dtype=float)
    t = np.asarray(true, dtype=float)
    if p.shape != t.shape:
        raise ContractError(f"length mismatch: {p.shape} vs {t.shape}")
    if not (np.isin(p, (0.0, 1.0)).all() and np.isin(t, (0.0, 1.0)).all()):
        raise ContractError("classification labels must be 0 or 1")
    tp = int(np.sum((p == 1) & (t == 1)))
    fp = int(np.sum((p == 1) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    tn = int(np.sum((p == 0) & (t == 0)))
    n = tp + fp + fn + tn
    accuracy = (tp + tn) / n if n else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ClassificationMetrics(accuracy, precision, recall, f1)


def mape(predicted: Sequence[float], true: Sequence[float]) -> float:
    p = np.asarray(predicted, dtype=float)
    t = np.asarray(true, dtype=float)
    if p.shape != t.shape:
        raise ContractError(f"length mismatch: {p.shape} vs {t.shape}")
    if np.any(t == 0):
        raise ContractError("MAPE is undefined for a zero true value")
    return float(np.mean(np.abs(t - p) / np.abs(t))) if t.size else 0.0


def task_metrics(task: TaskKind, predicted: np.ndarray, true: np.ndarray) -> dict[str, float]:
    """Metric dict for one label: the classification quadruple or MAPE."""
    if TaskKind(task).is_classification:
        return classification_metrics((np.asarray(predicted) >= 0.5).astype(float), true).as_dict()
    return {"mape": mape(predicted, true)}


# empirical risk -----------------------------------------------------------


@dataclass(frozen=True)
class RiskWeights:
    alpha: tuple[float, float, float, float]

    def __post_init__(self):
        a = tuple(float(v) for v in self.alpha)
        object.__setattr__(self, "alpha", a)
        if len(a) != 4 or any(v < 0 or v > 1 for v in a) or abs(sum(a) - 1.0) > 1e-9:
            raise ContractError(f"alpha must be 4 values in [0, 1] summing to 1, got {a}")


LabelFn = Callable[[np.ndarray, float], float]
LossFn = Callable[[float, float], float]


def empirical_risk(
    f: LabelFn,
    g: LabelFn,
    dataset: Sequence[Sample],
    alpha: RiskWeights | Sequence[float],
    l1: LossFn,
    l2: LossFn,
) -> float:
    """Average of the indicator-weighted, [0, 1]-clipped combined loss.

    ``f(x, y1)`` predicts y2 and ``g(x, y2)`` predicts y1; ``l1(pred, y1)``
    and ``l2(pred, y2)`` are per-sample losses.
    """
    a = alpha if isinstance(alpha, RiskWeights) else RiskWeights(tuple(alpha))
    a1, a2, a3, a4 = a.alpha
    if not dataset:
        return 0.0
    clip = lambda v: min(float(v), 1.0)  # noqa: E731
    total = 0.0
    for s in dataset:
        u1, u2 = presence_indicator(s)
        x = s.x
        if u1 and u2:
            total += a1 * clip(l2(f(x, s.y1), s.y2)) + a2 * clip(l1(g(x, s.y2), s.y1))
        if u1:
            total += a3 * clip(l1(g(x, f(x, s.y1)), s.y1))
        if u2:
            total += a4 * clip(l2(f(x, g(x, s.y2)), s.y2))
    return total / len(dataset)


def squared_loss(pred: float, y: float) -> float:
    return (float(pred) - float(y)) ** 2


def log_loss(pred: float, y: float) -> float:
    p = min(max(float(pred), 1e-12), 1.0 - 1e-12)
    return -math.log(p) if y >= 0.5 else -math.log(1.0 - p)


# aggregation --------------------------------------------------------------


class ResultTable:
    """Per-seed metric values keyed by (method, task, label, metric)."""

    def __init__(self):
        self._values: dict[tuple[str, str, str, str], list[float]] = {}

    def add(self, method: str, task: str, label: str, metric: str, value: float) -> None:
        self._values.setdefault((method, task, label, metric), []).append(float(value))

    def add_many(self, method: str, task: str, label: str, metrics: dict[str, float]) -> None:
        for k, v in metrics.items():
            self.add(method, task, label, k, v)

    def keys(self) -> Iterable[tuple[str, str, str, str]]:
        return sorted(self._values)

    def values(self, key: tuple[str, str, str, str]) -> list[float]:
        return list(self._values[key])

    def mean(self, method: str, task: str, label: str, metric: str) -> float:
        return float(np.mean(self._values[(method, task, label, metric)]))

    def summary(self) -> dict:
        out: dict = {}
        for key in self.keys():
            method, task, label, metric = key
            vals = self._values[key]
            sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            out.setdefault(method, {}).setdefault(task, {}).setdefault(label, {})[metric] = {
                "mean": float(np.mean(vals)),
                "sd": sd,
                "n": len(vals),
                "values": vals,
            }
        return out

    def to_json(self, path: str | Path, extra: dict | None = None) -> None:
        doc = {"results": self.summary()}
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
