"""Training of the dual-tower model.

``train`` runs the integrated loop over fully and partially labeled samples:
impute, compute the five batch losses, route gradients to theta0/1/2 and
take an SGD step per group. ``train_mode`` runs a single training mode on
its own subset, and ``pretrain_multitask`` fits the marginal model used by
the duality loss.

Gradient routing needs only one backward pass of the summed loss: s2 and r2
never touch theta1 (imputed inputs are detached), s1 and r1 never touch
theta2, so the theta1 gradient of the total equals that of s1 + r1 + d, and
likewise for theta2.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datahub import Sample, TaskKind, features, labels, substream
from .diffcore import LOG_FLOOR, ContractError, Tensor, backward, binary_cross_entropy, no_grad, sgd_step, squared_error
from .dualtower import (
    ConfigError,
    DualTowerParams,
    MultiTaskParams,
    encode,
    f_from_encoding,
    g_from_encoding,
    m_forward,
)

log = logging.getLogger(__name__)

TERMS = ("s1", "s2", "r1", "r2", "d")


class UnsupportedConfiguration(ConfigError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda11: float = 1.0
    lambda22: float = 1.0
    lambda12: float = 1.0
    lambda21: float = 1.0
    lambda_d: float = 0.0

    def __post_init__(self):
        for name in ("lambda11", "lambda22", "lambda12", "lambda21", "lambda_d"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")

    def with_(self, **kw) -> LossWeights:
        d = {k: getattr(self, k) for k in ("lambda11", "lambda22", "lambda12", "lambda21", "lambda_d")}
        d.update(kw)
        return LossWeights(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr: float = 0.05
    weights: LossWeights = field(default_factory=LossWeights)
    class_weights: tuple[float, float] | None = None  # (positive, negative)
    seed: int = 0
    multitask_labeled_only: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.class_weights is not None and (len(self.class_weights) != 2 or min(self.class_weights) <= 0):
            raise ConfigError("class_weights must be a (positive, negative) pair of positive floats")


@dataclass
class BatchLosses:
    s1: Tensor
    s2: Tensor
    r1: Tensor
    r2: Tensor
    d: Tensor

    def total(self) -> Tensor:
        return self.s1 + self.s2 + self.r1 + self.r2 + self.d

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in TERMS}


@dataclass
class Batch:
    """Rows of a training batch. Missing labels are NaN until imputed."""

    x: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    imputed1: np.ndarray
    imputed2: np.ndarray

    @classmethod
    def from_arrays(cls, x, y1, y2) -> Batch:
        y1 = np.asarray(y1, dtype=float).copy()
        y2 = np.asarray(y2, dtype=float).copy()
        return cls(np.asarray(x, dtype=float), y1, y2, np.zeros(len(y1), bool), np.zeros(len(y2), bool))

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> Batch:
        return cls.from_arrays(features(samples), labels(samples, 1), labels(samples, 2))

    def __len__(self) -> int:
        return len(self.y1)

    @property
    def has1(self) -> np.ndarray:
        return ~np.isnan(self.y1) & ~self.imputed1

    @property
    def has2(self) -> np.ndarray:
        return ~np.isnan(self.y2) & ~self.imputed2

    @property
    def I_l(self) -> np.ndarray:
        return np.flatnonzero(self.has1 & self.has2)

    @property
    def I_1(self) -> np.ndarray:
        return np.flatnonzero(self.has1 & ~self.has2)

    @property
    def I_2(self) -> np.ndarray:
        return np.flatnonzero(~self.has1 & self.has2)

    @property
    def I_u(self) -> np.ndarray:
        return np.flatnonzero(~self.has1 & ~self.has2)


def impute_missing(batch: Batch, params: DualTowerParams) -> Batch:
    """Fill y2 on I_1 rows with f(x, y1) and y1 on I_2 rows with g(x, y2).

    Values are detached estimates (probabilities for classification) and the
    ``imputed*`` flags are set exactly on the filled entries.
    """
    out = Batch(batch.x, batch.y1.copy(), batch.y2.copy(), batch.imputed1.copy(), batch.imputed2.copy())
    i1, i2 = batch.I_1, batch.I_2
    with no_grad():
        if len(i1):
            out.y2[i1] = f_from_encoding(params, encode(params, batch.x[i1]), batch.y1[i1]).data
            out.imputed2[i1] = True
        if len(i2):
            out.y1[i2] = g_from_encoding(params, encode(params, batch.x[i2]), batch.y2[i2]).data
            out.imputed1[i2] = True
    return out


def _as_class(v: np.ndarray) -> np.ndarray:
    return (v >= 0.5).astype(float)


def _label_loss(pred: Tensor, target: np.ndarray, task: TaskKind, class_weights) -> Tensor:
    if task.is_classification:
        pos, neg = class_weights if class_weights is not None else (1.0, 1.0)
        return binary_cross_entropy(pred, target, pos_weight=pos, neg_weight=neg)
    return squared_error(pred, target)


def _zero() -> Tensor:
    return Tensor(0.0)


def duality_residual(pm1, pf2, pm2, pg1) -> Tensor:
    """Squared log-space violation of P(y1|x)P(y2|x,y1) = P(y2|x)P(y1|x,y2)."""
    parts = [p if isinstance(p, Tensor) else Tensor(p) for p in (pm1, pf2, pm2, pg1)]
    pm1, pf2, pm2, pg1 = parts
    return (pm1.log() + pf2.log() - pm2.log() - pg1.log()) ** 2


def _assigned(p: Tensor, cls: np.ndarray) -> Tensor:
    """Probability that a class-1 output ``p`` assigns to class ``cls``."""
    return p * cls + (1.0 - p) * (1.0 - cls)


def _check_duality(task: TaskKind, weights: LossWeights, mt) -> None:
    if weights.lambda_d > 0 and not task.is_classification:
        raise UnsupportedConfiguration("duality loss with lambda_d > 0 is only defined for binary classification")
    if weights.lambda_d > 0 and mt is None:
        raise ConfigError("lambda_d > 0 needs a pretrained multi-task model")


def batch_losses(
    batch: Batch,
    params: DualTowerParams,
    mt: MultiTaskParams | None,
    weights: LossWeights,
    class_weights=None,
    terms: Sequence[str] = TERMS,
) -> BatchLosses:
    """All five losses for an imputed batch; unused or empty terms are constant 0."""
    task = params.config.task
    il, i1, i2 = batch.I_l, batch.I_1, batch.I_2
    if (len(i1) and np.isnan(batch.y2[i1]).any()) or (len(i2) and np.isnan(batch.y1[i2]).any()):
        raise ContractError("batch has missing labels on semi-labeled rows; run impute_missing first")
    use = {
        "s1": "s1" in terms and weights.lambda21 > 0 and len(il) > 0,
        "s2": "s2" in terms and weights.lambda12 > 0 and len(il) > 0,
        "r1": "r1" in terms and weights.lambda11 > 0 and len(i1) > 0,
        "r2": "r2" in terms and weights.lambda22 > 0 and len(i2) > 0,
        "d": "d" in terms and weights.lambda_d > 0 and len(il) + len(i1) + len(i2) > 0,
    }
    if use["d"]:
        _check_duality(task, weights, mt)
    out = {k: _zero() for k in TERMS}
    if not any(use.values()):
        return BatchLosses(**out)

    labeled = np.concatenate([il, i1, i2]) if use["d"] else None
    need_f = use["s2"] or use["r2"] or use["d"]
    need_g = use["s1"] or use["r1"] or use["d"]
    enc = encode(params, batch.x)
    y1_in = np.nan_to_num(batch.y1)
    y2_in = np.nan_to_num(batch.y2)
    F = f_from_encoding(params, enc, y1_in) if need_f else None
    G = g_from_encoding(params, enc, y2_in) if need_g else None
    cw = class_weights

    if use["s1"]:
        out["s1"] = _label_loss(G.take(il), batch.y1[il], task, cw).sum() * weights.lambda21
    if use["s2"]:
        out["s2"] = _label_loss(F.take(il), batch.y2[il], task, cw).sum() * weights.lambda12
    if use["r1"]:
        out["r1"] = _label_loss(G.take(i1), batch.y1[i1], task, cw).sum() * weights.lambda11
    if use["r2"]:
        out["r2"] = _label_loss(F.take(i2), batch.y2[i2], task, cw).sum() * weights.lambda22
    if use["d"]:
        c1 = _as_class(batch.y1[labeled])
        c2 = _as_class(batch.y2[labeled])
        with no_grad():
            pm1, pm2 = m_forward(batch.x[labeled], mt)
        pm1 = pm1.data * c1 + (1.0 - pm1.data) * (1.0 - c1)
        pm2 = pm2.data * c2 + (1.0 - pm2.data) * (1.0 - c2)
        pf = _assigned(F.take(labeled), c2)
        pg = _assigned(G.take(labeled), c1)
        out["d"] = duality_residual(Tensor(pm1), pf, Tensor(pm2), pg).sum() * weights.lambda_d
    return BatchLosses(**out)


def duality_loss(batch: Batch, params: DualTowerParams, mt: MultiTaskParams, weights: LossWeights) -> Tensor:
    _check_duality(params.config.task, weights, mt)
    return batch_losses(batch, params, mt, weights, terms=("d",)).d


def supervision_losses(batch: Batch, params: DualTowerParams, weights: LossWeights, class_weights=None):
    b = batch_losses(batch, params, None, weights, class_weights, terms=("s1", "s2"))
    return b.s1, b.s2


def reconstruction_losses(batch: Batch, params: DualTowerParams, weights: LossWeights, class_weights=None):
    b = batch_losses(batch, params, None, weights, class_weights, terms=("r1", "r2"))
    return b.r1, b.r2


# training loops -----------------------------------------------------------


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def append(self, epoch: int, sums: dict[str, float], n: int) -> None:
        row = {"epoch": epoch}
        row.update({k: sums[k] / n for k in TERMS})
        row["total"] = sum(row[k] for k in TERMS)
        self.rows.append(row)

    def totals(self) -> list[float]:
        return [r["total"] for r in self.rows]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", *TERMS, "total"])
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[k])) for k in (*TERMS, "total")])


_GROUPS = {"theta0": 0, "theta1": 1, "theta2": 2}


def train_step(
    batch: Batch,
    params: DualTowerParams,
    mt: MultiTaskParams | None,
    config: TrainConfig,
    terms: Sequence[str] = TERMS,
    update: Sequence[str] = ("theta0", "theta1", "theta2"),
) -> tuple[DualTowerParams, BatchLosses]:
    """One impute / loss / gradient / SGD step. Returns new params (input untouched)."""
    imputed = impute_missing(batch, params)
    losses = batch_losses(imputed, params, mt, config.weights, config.class_weights, terms)
    scaled = losses.total() / float(config.batch_size)
    grads = backward(scaled, params.groups)
    groups = list(params.groups)
    for name in update:
        k = _GROUPS[name]
        groups[k] = sgd_step(groups[k], grads.get(name, {}), config.lr)
    return DualTowerParams(*groups, params.config), losses


def _run(data, params, mt, config: TrainConfig, buckets, terms, update, stream: str):
    if isinstance(data, Batch):
        full = data
    else:
        full = Batch.from_samples(data)
    pool = np.sort(np.concatenate([getattr(full, b) for b in buckets])).astype(int)
    history = History()
    if len(pool) == 0:
        return params, history
    rng = substream(config.seed, stream)
    B = config.batch_size
    for epoch in range(1, config.epochs + 1):
        order = pool[rng.permutation(len(pool))]
        sums = dict.fromkeys(TERMS, 0.0)
        for start in range(0, len(order), B):
            rows = order[start : start + B]
            batch = Batch(full.x[rows], full.y1[rows], full.y2[rows], full.imputed1[rows], full.imputed2[rows])
            params, losses = train_step(batch, params, mt, config, terms, update)
            for k, v in losses.values().items():
                sums[k] += v
            if not np.isfinite(sum(sums.values())):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
        history.append(epoch, sums, len(pool))
        log.debug("epoch %d total %.6g", epoch, history.rows[-1]["total"])
    return params, history


def train(
    train_data: Sequence[Sample] | Batch,
    params: DualTowerParams,
    mt: MultiTaskParams | None,
    config: TrainConfig,
) -> tuple[DualTowerParams, History]:
    """Integrated training over I_l, I_1 and I_2; I_u never enters."""
    full = train_data if isinstance(train_data, Batch) else Batch.from_samples(train_data)
    if len(full.I_l) + len(full.I_1) + len(full.I_2) == 0:
        raise ConfigError("training set has no labeled samples")
    _check_duality(params.config.task, config.weights, mt)
    return _run(full, params, mt, config, ("I_l", "I_1", "I_2"), TERMS, ("theta0", "theta1", "theta2"), "train-shuffle")


_MODES = {
    "a": (("I_l",), ("s1", "s2"), ("theta0", "theta1", "theta2")),
    "b1": (("I_1",), ("r1",), ("theta0", "theta1")),
    "b2": (("I_2",), ("r2",), ("theta0", "theta2")),
    "c": (("I_l", "I_1", "I_2"), ("d",), ("theta0", "theta1", "theta2")),
}


def train_mode(
    mode: str,
    data: Sequence[Sample] | Batch,
    params: DualTowerParams,
    mt: MultiTaskParams | None,
    config: TrainConfig,
) -> tuple[DualTowerParams, History]:
    """Train with a single mode: a (supervised), b1/b2 (reconstruction) or c (duality)."""
    if mode not in _MODES:
        raise ConfigError(f"unknown training mode {mode!r}; expected one of {sorted(_MODES)}")
    buckets, terms, update = _MODES[mode]
    full = data if isinstance(data, Batch) else Batch.from_samples(data)
    if mode == "c":
        if mt is None:
            raise ConfigError("mode c needs a pretrained multi-task model")
        _check_duality(params.config.task, config.weights, mt)
    if sum(len(getattr(full, b)) for b in buckets) == 0:
        log.warning("training mode %s has no samples in %s; skipping", mode, "/".join(buckets))
        return params, History()
    return _run(full, params, mt, config, buckets, terms, update, "train-shuffle")


# multi-task pretraining ---------------------------------------------------


def _mt_step(x, y1, y2, mt: MultiTaskParams, config: TrainConfig, task: TaskKind):
    p1, p2 = m_forward(x, mt)
    h1, h2 = np.flatnonzero(~np.isnan(y1)), np.flatnonzero(~np.isnan(y2))
    loss = _zero()
    if len(h1):
        loss = loss + _label_loss(p1.take(h1), y1[h1], task, config.class_weights).sum()
    if len(h2):
        loss = loss + _label_loss(p2.take(h2), y2[h2], task, config.class_weights).sum()
    grads = backward(loss / float(config.batch_size), mt.groups)
    new = [sgd_step(g, grads.get(g.name, {}), config.lr) for g in mt.groups]
    return MultiTaskParams(*new, mt.config), loss.item()


def pretrain_multitask(
    train_data: Sequence[Sample] | Batch, mt: MultiTaskParams, config: TrainConfig
) -> tuple[MultiTaskParams, list[float]]:
    """Fit both marginal heads; head k sees every sample whose y_k is present.

    With ``config.multitask_labeled_only`` only fully labeled samples are used.
    """
    full = train_data if isinstance(train_data, Batch) else Batch.from_samples(train_data)
    task = mt.config.task
    if config.multitask_labeled_only:
        pool = full.I_l
    else:
        pool = np.flatnonzero(full.has1 | full.has2)
    if not np.any(full.has1[pool]):
        raise ConfigError("multi-task head 1 has no labeled samples")
    if not np.any(full.has2[pool]):
        raise ConfigError("multi-task head 2 has no labeled samples")
    rng = substream(config.seed, "multitask-shuffle")
    B = config.batch_size
    history = []
    for _ in range(config.epochs):
        order = pool[rng.permutation(len(pool))]
        total = 0.0
        for start in range(0, len(order), B):
            rows = order[start : start + B]
            mt, v = _mt_step(full.x[rows], full.y1[rows], full.y2[rows], mt, config, task)
            total += v
        history.append(total / len(pool))
    return mt, history


__all__ = [
    "LOG_FLOOR",
    "Batch",
    "BatchLosses",
    "History",
    "LossWeights",
    "TrainConfig",
    "UnsupportedConfiguration",
    "batch_losses",
    "duality_loss",
    "duality_residual",
    "impute_missing",
    "pretrain_multitask",
    "reconstruction_losses",
    "supervision_losses",
    "train",
    "train_mode",
    "train_step",
]
