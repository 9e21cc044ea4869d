"""Decomposition baselines built on the same MLP stack as the dual-tower model.

ID      two independent models x -> y1, x -> y2
COL     one two-output model on fully labeled samples
SSL     COL, impute the semi-labeled samples, refit on the union
LS      x -> y2, then (x, y2) -> y1
DSML    x -> y2, (x, y2) -> y1, then (x, y1) -> y2 on everything
DSML_REV  DSML with the two labels swapped
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datahub import PresenceMask, Sample, TaskKind, substream
from .diffcore import ContractError, MLPSpec, ParamGroup, Tensor, backward, init_mlp, mlp_forward, no_grad, sgd_step
from .dualtower import ConfigError
from .training import Batch, TrainConfig, _label_loss, _zero


class BaselineKind(str, enum.Enum):
    ID = "ID"
    COL = "COL"
    SSL = "SSL"
    LS = "LS"
    DSML = "DSML"
    DSML_REV = "DSML_REV"


COMPONENTS = {"ID": 2, "COL": 1, "SSL": 2, "LS": 2, "DSML": 3, "DSML_REV": 3}


@dataclass(frozen=True)
class BaselineConfig:
    train: TrainConfig
    hidden: tuple[int, ...] = (32, 16, 16)
    hidden_activation: str = "tanh"


@dataclass
class FittedMLP:
    name: str
    spec: MLPSpec
    params: ParamGroup
    label_input: bool  # whether a label value is appended to x
    n_fit: int = 0  # samples that contributed gradients

    def __call__(self, x: np.ndarray, label: np.ndarray | None = None) -> np.ndarray:
        inp = x if not self.label_input else np.column_stack([x, label])
        with no_grad():
            out = mlp_forward(self.spec, self.params, Tensor(inp))
        return out.data


@dataclass
class BaselinePredictor:
    kind: BaselineKind
    models: dict[str, FittedMLP]
    task: TaskKind
    swapped: bool = False
    label_reads: int = field(default=0, repr=False)

    @property
    def n_components(self) -> int:
        return len(self.models)


def _point(v: np.ndarray, task: TaskKind) -> np.ndarray:
    return (v >= 0.5).astype(float) if task.is_classification else v


def fit_mlp(
    name: str,
    x: np.ndarray,
    targets: np.ndarray,
    task: TaskKind,
    config: BaselineConfig,
    label_input: np.ndarray | None = None,
) -> FittedMLP:
    """Supervised fit; ``targets`` is (n, k) with NaN where a target is absent."""
    tc = config.train
    targets = np.atleast_2d(np.asarray(targets, dtype=float).T).T
    inp = x if label_input is None else np.column_stack([x, label_input])
    k = targets.shape[1]
    out_act = "sigmoid" if task.is_classification else "identity"
    spec = MLPSpec((inp.shape[1],) + tuple(config.hidden) + (k,), config.hidden_activation, out_act)
    params = init_mlp(spec, substream(tc.seed, "baseline-init", name), ParamGroup(name))
    rows_ok = np.flatnonzero(~np.all(np.isnan(targets), axis=1))
    rng = substream(tc.seed, "baseline-shuffle", name)
    B = tc.batch_size
    for _ in range(tc.epochs):
        order = rows_ok[rng.permutation(len(rows_ok))]
        for start in range(0, len(order), B):
            rows = order[start : start + B]
            pred = mlp_forward(spec, params, Tensor(inp[rows]))
            loss = _zero()
            for j in range(k):
                have = np.flatnonzero(~np.isnan(targets[rows, j]))
                if len(have):
                    col = pred.take(have).column(j)
                    loss = loss + _label_loss(col, targets[rows[have], j], task, tc.class_weights).sum()
            grads = backward(loss / float(B), [params])
            params = sgd_step(params, grads.get(name, {}), tc.lr)
    return FittedMLP(name, spec, params, label_input is not None, len(rows_ok))


def _need(rows: np.ndarray, stage: str) -> np.ndarray:
    if len(rows) == 0:
        raise ConfigError(f"baseline stage {stage!r} has no training samples")
    return rows


def _fit_dsml(b: Batch, task: TaskKind, config: BaselineConfig, tag: str) -> dict[str, FittedMLP]:
    """Three DSML stages on batch ``b`` (labels already in the role order wanted)."""
    il, i1, i2 = b.I_l, b.I_1, b.I_2
    r = _need(np.concatenate([il, i2]), f"{tag}/M1 P(y2|x)")
    m1 = fit_mlp(f"{tag}.M1", b.x[r], b.y2[r], task, config)
    y2 = b.y2.copy()
    if len(i1):
        y2[i1] = _point(m1(b.x[i1])[:, 0], task)
    r = _need(np.concatenate([il, i1]), f"{tag}/M2 P(y1|x,y2)")
    m2 = fit_mlp(f"{tag}.M2", b.x[r], b.y1[r], task, config, label_input=y2[r])
    y1 = b.y1.copy()
    if len(i2):
        y1[i2] = _point(m2(b.x[i2], y2[i2])[:, 0], task)
    r = _need(np.concatenate([il, i1, i2]), f"{tag}/M3 P(y2|x,y1)")
    m3 = fit_mlp(f"{tag}.M3", b.x[r], y2[r], task, config, label_input=y1[r])
    return {"M1": m1, "M2": m2, "M3": m3}


def baseline_fit(kind: BaselineKind | str, train_data: Sequence[Sample] | Batch, task: TaskKind | str, config: BaselineConfig) -> BaselinePredictor:
    kind = BaselineKind(kind)
    task = TaskKind(task)
    b = train_data if isinstance(train_data, Batch) else Batch.from_samples(train_data)
    il, i1, i2 = b.I_l, b.I_1, b.I_2
    both = np.column_stack([b.y1, b.y2])
    if kind is BaselineKind.ID:
        r1 = _need(np.flatnonzero(b.has1), "ID/M1 P(y1|x)")
        r2 = _need(np.flatnonzero(b.has2), "ID/M2 P(y2|x)")
        models = {"M1": fit_mlp("ID.M1", b.x[r1], b.y1[r1], task, config),
                  "M2": fit_mlp("ID.M2", b.x[r2], b.y2[r2], task, config)}
    elif kind in (BaselineKind.COL, BaselineKind.SSL):
        r = _need(il, f"{kind.value}/multi-output on S_l")
        # same name for COL and SSL stage 1 so both draw identical streams
        m1 = fit_mlp("multi-output-Sl", b.x[r], both[r], task, config)
        if kind is BaselineKind.COL:
            models = {"M": m1}
        else:
            filled = both.copy()
            rows = np.concatenate([i1, i2])
            if len(rows):
                guess = _point(m1(b.x[rows]), task)
                miss = np.isnan(filled[rows])
                filled[rows] = np.where(miss, guess, filled[rows])
            r = _need(np.concatenate([il, i1, i2]), "SSL/M2 multi-output on imputed union")
            models = {"M1": m1, "M2": fit_mlp("SSL.M2", b.x[r], filled[r], task, config)}
    elif kind is BaselineKind.LS:
        r = _need(np.concatenate([il, i2]), "LS/M1 P(y2|x)")
        m1 = fit_mlp("LS.M1", b.x[r], b.y2[r], task, config)
        y2 = b.y2.copy()
        if len(i1):
            y2[i1] = _point(m1(b.x[i1])[:, 0], task)
        r = _need(np.concatenate([il, i1]), "LS/M2 P(y1|x,y2)")
        models = {"M1": m1, "M2": fit_mlp("LS.M2", b.x[r], b.y1[r], task, config, label_input=y2[r])}
    elif kind is BaselineKind.DSML:
        models = _fit_dsml(b, task, config, "DSML")
    else:
        swapped = Batch(b.x, b.y2, b.y1, b.imputed2, b.imputed1)
        return BaselinePredictor(kind, _fit_dsml(swapped, task, config, "DSML_REV"), task, swapped=True)
    return BaselinePredictor(kind, models, task)


def predict_arrays(
    pred: BaselinePredictor, x: np.ndarray, y1: np.ndarray | None = None, y2: np.ndarray | None = None
) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Predict every label not supplied. Returns (y1_hat, y2_hat); supplied labels give None."""
    if y1 is not None and y2 is not None:
        raise ContractError("both labels supplied; nothing to predict")
    if pred.swapped:
        b, a = _predict(pred, x, y2, y1)
        return a, b
    return _predict(pred, x, y1, y2)


def _predict(pred: BaselinePredictor, x, y1, y2):
    m, task, kind = pred.models, pred.task, pred.kind
    if kind is BaselineKind.ID:
        return (m["M1"](x)[:, 0] if y1 is None else None, m["M2"](x)[:, 0] if y2 is None else None)
    if kind is BaselineKind.COL:
        out = m["M"](x)
        return (out[:, 0] if y1 is None else None, out[:, 1] if y2 is None else None)
    if kind is BaselineKind.SSL:
        out = m["M2"](x)
        return (out[:, 0] if y1 is None else None, out[:, 1] if y2 is None else None)
    if kind is BaselineKind.LS:
        if y1 is None and y2 is not None:
            pred.label_reads += len(y2)
            return m["M2"](x, y2)[:, 0], None
        p2 = m["M1"](x)[:, 0]
        if y2 is None and y1 is not None:
            return None, p2
        return m["M2"](x, _point(p2, task))[:, 0], p2
    # DSML / DSML_REV (role-swapped inputs)
    if y1 is not None:
        pred.label_reads += len(y1)
        return None, m["M3"](x, y1)[:, 0]
    if y2 is not None:
        pred.label_reads += len(y2)
        return m["M2"](x, y2)[:, 0], None
    p2 = m["M1"](x)[:, 0]
    p1 = m["M2"](x, _point(p2, task))[:, 0]
    return p1, m["M3"](x, _point(p1, task))[:, 0]


def baseline_predict(pred: BaselinePredictor, sample: Sample, presence: PresenceMask) -> dict[int, float]:
    """Predictions for each missing label of one sample, keyed by label number."""
    if tuple(presence) == (1, 1):
        raise ContractError("sample is fully labeled; nothing to predict")
    x = np.atleast_2d(sample.x)
    y1 = np.array([sample.y1]) if presence[0] else None
    y2 = np.array([sample.y2]) if presence[1] else None
    p1, p2 = predict_arrays(pred, x, y1, y2)
    out = {}
    if p1 is not None:
        out[1] = float(p1[0])
    if p2 is not None:
        out[2] = float(p2[0])
    return out
