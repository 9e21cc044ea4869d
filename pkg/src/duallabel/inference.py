"""Label prediction with a trained dual-tower model.

Semi-labeled samples get one tower pass (direct inference). Unlabeled
samples solve y2 = f(x, y1), y1 = g(x, y2) by alternating the two towers
from a constant start until the iterates stop moving or the cap is hit.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datahub import Sample, TaskKind, features, presence_indicator
from .diffcore import ContractError, no_grad
from .dualtower import ConfigError, DualTowerParams, encode, f_from_encoding, g_from_encoding

LabelMap = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class InferenceConfig:
    y0: float = 1.0
    L: int = 1000
    epsilon: float | None = None

    def __post_init__(self):
        if self.L < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if self.epsilon is not None and self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")

    @classmethod
    def for_task(cls, task: TaskKind | str, **kw) -> InferenceConfig:
        y0 = 0.5 if TaskKind(task).is_classification else 1.0
        return cls(y0=kw.pop("y0", y0), **kw)


@dataclass
class InferenceTrace:
    y1: np.ndarray
    y2: np.ndarray
    converged_at: int | None = None

    def __len__(self) -> int:
        return len(self.y1)

    @property
    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.y1.tolist(), self.y2.tolist()))


def threshold(p):
    """0.5 decision rule; exactly 0.5 maps to class 1."""
    return (np.asarray(p) >= 0.5).astype(float)


# solver -------------------------------------------------------------------


@dataclass
class FixedPointResult:
    y1: np.ndarray
    y2: np.ndarray
    converged_at: np.ndarray  # 1-based iteration, 0 where not converged
    trace1: np.ndarray  # (iterations, n); entries past a sample's stop are NaN
    trace2: np.ndarray

    def trace(self, i: int) -> InferenceTrace:
        k = int(self.converged_at[i]) or self.trace1.shape[0]
        return InferenceTrace(self.trace1[:k, i].copy(), self.trace2[:k, i].copy(), int(self.converged_at[i]) or None)

    @property
    def iterations(self) -> np.ndarray:
        """Iterations actually run per sample."""
        n_iter = self.trace1.shape[0]
        return np.where(self.converged_at > 0, self.converged_at, n_iter)


def solve_alternating(f: LabelMap, g: LabelMap, n: int, y0: float, L: int, epsilon: float | None = None) -> FixedPointResult:
    """Alternate ``y2 <- f(y1); y1 <- g(y2)`` for ``n`` independent samples.

    ``f`` and ``g`` map a length-``n`` array of label values to predictions
    for the same rows. A sample stops once both labels moved by less than
    ``epsilon`` over a full iteration; its values are then frozen.
    """
    y1 = np.full(n, float(y0))
    y2 = np.full(n, float(y0))
    done = np.zeros(n, dtype=np.int64)
    tr1 = np.full((L, n), np.nan)
    tr2 = np.full((L, n), np.nan)
    active = np.ones(n, dtype=bool)
    last = 0
    for it in range(1, L + 1):
        new2 = f(y1)
        new1 = g(new2)
        new2 = np.where(active, new2, y2)
        new1 = np.where(active, new1, y1)
        tr1[it - 1] = np.where(active, new1, np.nan)
        tr2[it - 1] = np.where(active, new2, np.nan)
        if epsilon is not None:
            moved = np.maximum(np.abs(new1 - y1), np.abs(new2 - y2))
            stop = active & (moved < epsilon)
            done[stop] = it
            active &= ~stop
        y1, y2 = new1, new2
        last = it
        if not active.any():
            break
    return FixedPointResult(y1, y2, done, tr1[:last], tr2[:last])


def _tower_maps(params: DualTowerParams, x: np.ndarray) -> tuple[LabelMap, LabelMap]:
    with no_grad():
        enc = encode(params, x)

    def f(y1):
        with no_grad():
            return f_from_encoding(params, enc, y1).data

    def g(y2):
        with no_grad():
            return g_from_encoding(params, enc, y2).data

    return f, g


def alternate_infer_batch(x: np.ndarray, params: DualTowerParams, config: InferenceConfig) -> FixedPointResult:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    f, g = _tower_maps(params, x)
    return solve_alternating(f, g, len(x), config.y0, config.L, config.epsilon)


def equilibrium_gap(x: np.ndarray, y1: np.ndarray, y2: np.ndarray, params: DualTowerParams) -> np.ndarray:
    """Movement of the returned pair under one extra probe iteration."""
    f, g = _tower_maps(params, np.atleast_2d(x))
    p2 = f(y1)
    p1 = g(p2)
    return np.maximum(np.abs(p1 - y1), np.abs(p2 - y2))


# per-sample API -----------------------------------------------------------


@dataclass(frozen=True)
class LabelPrediction:
    label: int  # which label was predicted: 1 or 2
    value: float  # probability of class 1, or the regression value
    cls: int | None = None  # thresholded class for classification


def _prediction(label: int, value: float, task: TaskKind) -> LabelPrediction:
    if task.is_classification:
        return LabelPrediction(label, float(value), int(threshold(value)))
    return LabelPrediction(label, float(value))


def direct_infer(sample: Sample, params: DualTowerParams) -> LabelPrediction:
    u = presence_indicator(sample)
    task = params.config.task
    with no_grad():
        if u == (1, 0):
            v = f_from_encoding(params, encode(params, sample.x), np.array([sample.y1])).data[0]
            return _prediction(2, v, task)
        if u == (0, 1):
            v = g_from_encoding(params, encode(params, sample.x), np.array([sample.y2])).data[0]
            return _prediction(1, v, task)
    raise ContractError(f"direct inference needs exactly one known label, got presence {tuple(u)}")


def alternate_infer(
    sample: Sample, params: DualTowerParams, config: InferenceConfig
) -> tuple[LabelPrediction, LabelPrediction, InferenceTrace]:
    if presence_indicator(sample) != (0, 0):
        raise ContractError("alternate inference is for samples with no known labels")
    res = alternate_infer_batch(sample.x, params, config)
    task = params.config.task
    return _prediction(1, res.y1[0], task), _prediction(2, res.y2[0], task), res.trace(0)


# dataset level ------------------------------------------------------------


@dataclass
class DatasetPredictions:
    # sample index -> {1: LabelPrediction, 2: LabelPrediction}; only missing labels appear
    predictions: dict[int, dict[int, LabelPrediction]] = field(default_factory=dict)
    traces: dict[int, InferenceTrace] = field(default_factory=dict)
    converged_fraction: float | None = None
    iteration_histogram: dict[int, int] = field(default_factory=dict)

    @property
    def n_values(self) -> int:
        return sum(len(v) for v in self.predictions.values())

    def traces_to_csv(self, path: str | Path) -> None:
        write_traces(self.traces, path)


def write_traces(traces: dict[int, InferenceTrace], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "iteration", "y1_hat", "y2_hat"])
        for sid in sorted(traces):
            t = traces[sid]
            for k, (a, b) in enumerate(zip(t.y1, t.y2), start=1):
                w.writerow([sid, k, repr(float(a)), repr(float(b))])


def infer_dataset(dataset: Sequence[Sample], params: DualTowerParams, config: InferenceConfig) -> DatasetPredictions:
    """Direct inference on semi-labeled samples, alternate inference on unlabeled ones."""
    task = params.config.task
    out = DatasetPredictions()
    semi1 = [i for i, s in enumerate(dataset) if presence_indicator(s) == (1, 0)]
    semi2 = [i for i, s in enumerate(dataset) if presence_indicator(s) == (0, 1)]
    unl = [i for i, s in enumerate(dataset) if presence_indicator(s) == (0, 0)]
    with no_grad():
        if semi1:
            x = features([dataset[i] for i in semi1])
            v = f_from_encoding(params, encode(params, x), np.array([dataset[i].y1 for i in semi1])).data
            for i, p in zip(semi1, v):
                out.predictions[i] = {2: _prediction(2, p, task)}
        if semi2:
            x = features([dataset[i] for i in semi2])
            v = g_from_encoding(params, encode(params, x), np.array([dataset[i].y2 for i in semi2])).data
            for i, p in zip(semi2, v):
                out.predictions[i] = {1: _prediction(1, p, task)}
    if unl:
        res = alternate_infer_batch(features([dataset[i] for i in unl]), params, config)
        for j, i in enumerate(unl):
            out.predictions[i] = {1: _prediction(1, res.y1[j], task), 2: _prediction(2, res.y2[j], task)}
            out.traces[i] = res.trace(j)
        iters, counts = np.unique(res.iterations, return_counts=True)
        out.iteration_histogram = {int(k): int(c) for k, c in zip(iters, counts)}
        if config.epsilon is not None:
            out.converged_fraction = float(np.mean(res.converged_at > 0))
    return out
