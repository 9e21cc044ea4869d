"""Experiment runner: presets, config documents, and the four report protocols."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import baselines as bl
from .datahub import (
    MinMaxScaler,
    Sample,
    TaskKind,
    features,
    fully_labeled,
    gen_synthetic_classification,
    gen_synthetic_regression,
    labels,
    load_csv,
    mask_labels,
    train_val_test_split,
)
from .diffcore import no_grad
from .dualtower import (
    ConfigError,
    DualTowerParams,
    ModelConfig,
    encode,
    f_from_encoding,
    g_from_encoding,
    init_multitask,
    init_params,
    m_forward,
    save_checkpoint,
)
from .evalkit import ResultTable, task_metrics
from .inference import FixedPointResult, InferenceConfig, alternate_infer_batch, write_traces
from .training import History, LossWeights, TrainConfig, pretrain_multitask, train

log = logging.getLogger(__name__)

METHODS = ("DLL", "ID", "COL", "SSL", "LS", "DSML", "DSML_REV")
TASKS = ("Single", "Double")
LABELS = ("y1", "y2")


# presets ------------------------------------------------------------------


@dataclass(frozen=True)
class Preset:
    name: str
    task: TaskKind
    weights: LossWeights
    batch_size: int
    epochs: int = 100
    class_weights: tuple[float, float] | None = None
    y0: float = 1.0
    L: int = 1000


PRESETS = {
    "tox21": Preset("tox21", TaskKind.BINARY, LossWeights(lambda11=2, lambda21=2, lambda12=1, lambda22=1, lambda_d=0.2),
                    batch_size=4, class_weights=(0.7, 0.3), y0=0.5),
    "higgs": Preset("higgs", TaskKind.REGRESSION, LossWeights(lambda11=1, lambda21=1, lambda12=1, lambda22=1, lambda_d=0),
                    batch_size=4, y0=1.0),
    "mof": Preset("mof", TaskKind.REGRESSION, LossWeights(lambda11=2, lambda21=2, lambda12=1, lambda22=1, lambda_d=0),
                  batch_size=1, y0=1.0),
}


def get_preset(name: str) -> Preset:
    key = name.lower().removesuffix("-like")
    if key not in PRESETS:
        raise ConfigError(f"preset: unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return PRESETS[key]


# configuration ------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSource:
    synthetic: str | None = "regression"  # regression | classification
    n: int = 500
    d: int = 10
    csv: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSource = field(default_factory=DatasetSource)
    preset: str = "higgs"
    rates: tuple[float, float] = (0.3, 0.3)
    seeds: tuple[int, ...] = (0,)
    methods: tuple[str, ...] = ("DLL",)
    lr: float = 0.05
    epochs: int | None = None
    batch_size: int | None = None
    encoder_hidden: tuple[int, ...] = (32, 16)
    embed_width: int = 8
    tower_hidden: tuple[int, ...] = (16,)
    hidden_activation: str = "tanh"
    y0: float | None = None
    L: int | None = None
    epsilon: float | None = None
    multitask_labeled_only: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        if not self.methods:
            raise ConfigError("methods: at least one method is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"methods: unknown method(s) {bad}; expected a subset of {list(METHODS)}")
        for i, r in enumerate(self.rates):
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"missing_rates[{i}]: must be in [0, 1], got {r}")
        get_preset(self.preset)
        if self.dataset.csv is None and self.dataset.synthetic not in ("regression", "classification"):
            raise ConfigError(f"dataset.synthetic: expected 'regression' or 'classification', got {self.dataset.synthetic!r}")
        if self.task.is_classification != get_preset(self.preset).task.is_classification and self.dataset.csv is None:
            raise ConfigError(f"preset: {self.preset!r} does not match the {self.dataset.synthetic} dataset")

    @property
    def preset_obj(self) -> Preset:
        return get_preset(self.preset)

    @property
    def task(self) -> TaskKind:
        if self.dataset.csv is not None:
            return self.preset_obj.task
        return TaskKind.BINARY if self.dataset.synthetic == "classification" else TaskKind.REGRESSION

    def train_config(self, seed: int, weights: LossWeights | None = None) -> TrainConfig:
        p = self.preset_obj
        return TrainConfig(
            epochs=self.epochs or p.epochs,
            batch_size=self.batch_size or p.batch_size,
            lr=self.lr,
            weights=weights or p.weights,
            class_weights=p.class_weights,
            seed=seed,
            multitask_labeled_only=self.multitask_labeled_only,
        )

    def model_config(self, d: int, seed: int) -> ModelConfig:
        enc = (d,) + tuple(self.encoder_hidden)
        return ModelConfig(enc, (1, self.embed_width), (enc[-1] + self.embed_width,) + tuple(self.tower_hidden) + (1,),
                           self.task, seed, self.hidden_activation)

    def inference_config(self) -> InferenceConfig:
        p = self.preset_obj
        return InferenceConfig(self.y0 if self.y0 is not None else p.y0, self.L or p.L, self.epsilon)

    def baseline_config(self, seed: int) -> bl.BaselineConfig:
        hidden = tuple(self.encoder_hidden) + tuple(self.tower_hidden)
        return bl.BaselineConfig(self.train_config(seed), hidden, self.hidden_activation)

    def to_dict(self) -> dict:
        return {
            "dataset": {"synthetic": self.dataset.synthetic, "n": self.dataset.n, "d": self.dataset.d, "csv": self.dataset.csv},
            "preset": self.preset,
            "missing_rates": list(self.rates),
            "seeds": list(self.seeds),
            "methods": list(self.methods),
            "train": {"lr": self.lr, "epochs": self.epochs, "batch_size": self.batch_size,
                      "multitask_labeled_only": self.multitask_labeled_only},
            "model": {"encoder_hidden": list(self.encoder_hidden), "embed_width": self.embed_width,
                      "tower_hidden": list(self.tower_hidden), "hidden_activation": self.hidden_activation},
            "inference": {"y0": self.y0, "L": self.L, "epsilon": self.epsilon},
        }


_SECTIONS = {
    "dataset": {"synthetic", "n", "d", "csv"},
    "train": {"lr", "epochs", "batch_size", "multitask_labeled_only"},
    "model": {"encoder_hidden", "embed_width", "tower_hidden", "hidden_activation"},
    "inference": {"y0", "L", "epsilon"},
}
_TOP = {"dataset", "preset", "missing_rates", "seeds", "methods", "train", "model", "inference"}


def _typed(path: str, value, kind):
    try:
        if kind is int and (isinstance(value, bool) or float(value) != int(value)):
            raise ValueError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected {kind.__name__}, got {value!r}") from None


def parse_config(doc: dict[str, Any] | None) -> ExperimentConfig:
    """Build a config from a key-value tree, reporting errors by field path."""
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("<root>: expected a mapping")
    unknown = set(doc) - _TOP
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown key")
    kw: dict[str, Any] = {}
    for sec, allowed in _SECTIONS.items():
        sub = doc.get(sec) or {}
        if not isinstance(sub, dict):
            raise ConfigError(f"{sec}: expected a mapping")
        extra = set(sub) - allowed
        if extra:
            raise ConfigError(f"{sec}.{sorted(extra)[0]}: unknown key")
        doc[sec] = sub
    ds = doc["dataset"]
    preset = get_preset(str(doc.get("preset", "higgs")))
    default_kind = "classification" if preset.task.is_classification else "regression"
    src = DatasetSource(
        synthetic=None if ds.get("csv") else str(ds.get("synthetic", default_kind)),
        n=_typed("dataset.n", ds.get("n", 500), int),
        d=_typed("dataset.d", ds.get("d", 10), int),
        csv=ds.get("csv"),
    )
    kw["dataset"] = src
    if "preset" in doc:
        kw["preset"] = str(doc["preset"])
    if "missing_rates" in doc:
        r = doc["missing_rates"]
        r = [r, r] if not isinstance(r, (list, tuple)) else list(r)
        if len(r) != 2:
            raise ConfigError("missing_rates: expected one rate or a [rate1, rate2] pair")
        kw["rates"] = tuple(_typed(f"missing_rates[{i}]", v, float) for i, v in enumerate(r))
    if "seeds" in doc:
        s = doc["seeds"]
        s = [s] if not isinstance(s, (list, tuple)) else s
        kw["seeds"] = tuple(_typed(f"seeds[{i}]", v, int) for i, v in enumerate(s))
    if "methods" in doc:
        m = doc["methods"]
        m = [m] if isinstance(m, str) else m
        kw["methods"] = tuple(str(v).upper().replace("-", "_") for v in m)
    tr = doc["train"]
    for key, kind in (("lr", float), ("epochs", int), ("batch_size", int)):
        if tr.get(key) is not None:
            kw[key] = _typed(f"train.{key}", tr[key], kind)
    if "multitask_labeled_only" in tr:
        kw["multitask_labeled_only"] = bool(tr["multitask_labeled_only"])
    md = doc["model"]
    if "encoder_hidden" in md:
        kw["encoder_hidden"] = tuple(_typed(f"model.encoder_hidden[{i}]", v, int) for i, v in enumerate(md["encoder_hidden"]))
    if "tower_hidden" in md:
        kw["tower_hidden"] = tuple(_typed(f"model.tower_hidden[{i}]", v, int) for i, v in enumerate(md["tower_hidden"]))
    if "embed_width" in md:
        kw["embed_width"] = _typed("model.embed_width", md["embed_width"], int)
    if "hidden_activation" in md:
        if md["hidden_activation"] not in ("relu", "tanh"):
            raise ConfigError(f"model.hidden_activation: expected relu or tanh, got {md['hidden_activation']!r}")
        kw["hidden_activation"] = md["hidden_activation"]
    inf = doc["inference"]
    if inf.get("y0") is not None:
        kw["y0"] = _typed("inference.y0", inf["y0"], float)
    if inf.get("L") is not None:
        kw["L"] = _typed("inference.L", inf["L"], int)
    if inf.get("epsilon") is not None:
        kw["epsilon"] = _typed("inference.epsilon", inf["epsilon"], float)
    return ExperimentConfig(**kw)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"<file>: cannot read {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"<file>: invalid YAML in {path}: {e}") from None
    return parse_config(doc)


# data preparation ---------------------------------------------------------


@dataclass
class Prepared:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]  # fully labeled, scaled


def load_dataset(config: ExperimentConfig, seed: int) -> list[Sample]:
    src = config.dataset
    if src.csv is not None:
        try:
            return load_csv(src.csv, config.task)
        except OSError as e:
            raise ConfigError(f"dataset.csv: cannot read {src.csv}: {e.strerror}") from None
    if src.synthetic == "classification":
        return gen_synthetic_classification(src.n, src.d, seed)[0]
    return gen_synthetic_regression(src.n, src.d, seed)[0]


def prepare(config: ExperimentConfig, seed: int, rates: tuple[float, float] | None = None) -> Prepared:
    data = load_dataset(config, seed)
    train_s, val_s, test_s = train_val_test_split(data, seed)
    r1, r2 = rates if rates is not None else config.rates
    train_s = mask_labels(train_s, r1, r2, seed)
    scaler = MinMaxScaler.fit(train_s)
    return Prepared(scaler.transform(train_s), scaler.transform(val_s), scaler.transform(fully_labeled(test_s)))


class LabelVault:
    """Ground truth of an evaluation set, counting label reads by purpose."""

    def __init__(self, samples: Sequence[Sample]):
        self.x = features(samples)
        self._y = {1: labels(samples, 1), 2: labels(samples, 2)}
        self.reads = {"input": 0, "score": 0}

    def as_input(self, which: int) -> np.ndarray:
        self.reads["input"] += len(self._y[which])
        return self._y[which]

    def truth(self, which: int) -> np.ndarray:
        self.reads["score"] += len(self._y[which])
        return self._y[which]


# methods ------------------------------------------------------------------


@dataclass
class DLLModel:
    params: DualTowerParams
    mt: Any
    history: History
    mt_history: list[float] = field(default_factory=list)


def fit_dll(config: ExperimentConfig, train_s: Sequence[Sample], seed: int, weights: LossWeights | None = None) -> DLLModel:
    tc = config.train_config(seed, weights)
    d = len(train_s[0].x)
    mcfg = config.model_config(d, seed)
    mt, mt_hist = None, []
    if tc.weights.lambda_d > 0:
        mt, mt_hist = pretrain_multitask(train_s, init_multitask(mcfg), tc)
    params, hist = train(train_s, init_params(mcfg), mt, tc)
    return DLLModel(params, mt, hist, mt_hist)


def dll_single(params: DualTowerParams, vault: LabelVault) -> dict[str, np.ndarray]:
    with no_grad():
        enc = encode(params, vault.x)
        return {"y1": g_from_encoding(params, enc, vault.as_input(2)).data,
                "y2": f_from_encoding(params, enc, vault.as_input(1)).data}


def dll_double(params: DualTowerParams, vault: LabelVault, inf: InferenceConfig) -> tuple[dict[str, np.ndarray], FixedPointResult]:
    res = alternate_infer_batch(vault.x, params, inf)
    return {"y1": res.y1, "y2": res.y2}, res


def baseline_single(pred: bl.BaselinePredictor, vault: LabelVault) -> dict[str, np.ndarray]:
    p1, _ = bl.predict_arrays(pred, vault.x, None, vault.as_input(2))
    _, p2 = bl.predict_arrays(pred, vault.x, vault.as_input(1), None)
    return {"y1": p1, "y2": p2}


def baseline_double(pred: bl.BaselinePredictor, vault: LabelVault) -> dict[str, np.ndarray]:
    p1, p2 = bl.predict_arrays(pred, vault.x)
    return {"y1": p1, "y2": p2}


def _score(table: ResultTable, method: str, tname: str, preds: dict[str, np.ndarray], vault: LabelVault, task: TaskKind):
    for lab, which in (("y1", 1), ("y2", 2)):
        table.add_many(method, tname, lab, task_metrics(task, preds[lab], vault.truth(which)))


# run ----------------------------------------------------------------------


@dataclass
class RunOutput:
    table: ResultTable
    histories: dict[int, History] = field(default_factory=dict)
    leak_reads: dict[str, int] = field(default_factory=dict)  # method/Double -> input label reads


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None,
                   rates: tuple[float, float] | None = None, write: bool = True) -> RunOutput:
    """Train every requested method per seed and score the four prediction tasks."""
    task = config.task
    inf = config.inference_config()
    out = RunOutput(ResultTable())
    ckdir = None
    if out_dir is not None and write:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckdir = out_dir / "checkpoints"
        ckdir.mkdir(exist_ok=True)
    for seed in config.seeds:
        prep = prepare(config, seed, rates)
        if not prep.test:
            raise ConfigError("dataset: test split has no fully labeled samples to evaluate")
        for method in config.methods:
            log.info("seed %d: %s", seed, method)
            single_v, double_v = LabelVault(prep.test), LabelVault(prep.test)
            if method == "DLL":
                model = fit_dll(config, prep.train, seed)
                out.histories[seed] = model.history
                single = dll_single(model.params, single_v)
                double, _ = dll_double(model.params, double_v, inf)
                if ckdir is not None:
                    save_checkpoint(ckdir / f"dll-seed{seed}.npz", model.params)
                    if model.mt is not None:
                        save_checkpoint(ckdir / f"multitask-seed{seed}.npz", model.mt)
            else:
                pred = bl.baseline_fit(method, prep.train, task, config.baseline_config(seed))
                single = baseline_single(pred, single_v)
                double = baseline_double(pred, double_v)
            _score(out.table, method, "Single", single, single_v, task)
            _score(out.table, method, "Double", double, double_v, task)
            out.leak_reads[f"{method}/Double"] = out.leak_reads.get(f"{method}/Double", 0) + double_v.reads["input"]
    if out_dir is not None and write:
        out.table.to_json(out_dir / "results.json", {"config": config.to_dict()})
        if out.histories:
            write_histories(out.histories, out_dir / "history.csv")
    return out


def write_histories(histories: dict[int, History], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "epoch", "s1", "s2", "r1", "r2", "d", "total"])
        for seed in sorted(histories):
            for r in histories[seed].rows:
                w.writerow([seed, r["epoch"]] + [repr(float(r[k])) for k in ("s1", "s2", "r1", "r2", "d", "total")])


# sweep --------------------------------------------------------------------

SWEEP_COLUMNS = ["rate", "method", "task", "label", "seed", "metric", "value"]


def sweep_missing_rates(config: ExperimentConfig, rates: Sequence[float], out_dir: str | Path | None = None) -> list[dict]:
    """Long-format rows, one per (rate, method, task, label, seed, metric)."""
    for r in rates:
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"rates: {r} is outside [0, 1]")
    rows = []
    for rate in rates:
        res = run_experiment(config, rates=(rate, rate), write=False)
        for method, tname, lab, metric in res.table.keys():
            for seed, v in zip(config.seeds, res.table.values((method, tname, lab, metric))):
                rows.append({"rate": rate, "method": method, "task": tname, "label": lab, "seed": seed,
                             "metric": metric, "value": v})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_rows(rows, SWEEP_COLUMNS, out_dir / "sweep.csv")
    return rows


def write_rows(rows: Sequence[dict], columns: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


# ablation -----------------------------------------------------------------

STACKS = ("f", "a", "a+b", "a+b+c")
ABLATION_COLUMNS = ["stack", "task", "label", "seed", "metric", "value"]


def stack_weights(stack: str, full: LossWeights) -> LossWeights:
    if stack == "a":
        return full.with_(lambda11=0.0, lambda22=0.0, lambda_d=0.0)
    if stack == "a+b":
        return full.with_(lambda_d=0.0)
    if stack == "a+b+c":
        return full
    raise ConfigError(f"unknown stack {stack!r}")


def ablation(config: ExperimentConfig, out_dir: str | Path | None = None) -> list[dict]:
    """Evaluate the multi-task model alone, then modes a, a+b, a+b+c on the same splits."""
    task = config.task
    if not task.is_classification:
        raise ConfigError("preset: ablation needs a classification preset (mode c uses the duality loss)")
    inf = config.inference_config()
    table = ResultTable()
    for seed in config.seeds:
        prep = prepare(config, seed)
        tc = config.train_config(seed)
        mcfg = config.model_config(len(prep.train[0].x), seed)
        mt, _ = pretrain_multitask(prep.train, init_multitask(mcfg), tc)
        vault = LabelVault(prep.test)
        with no_grad():
            p1, p2 = m_forward(vault.x, mt)
        preds = {"y1": p1.data, "y2": p2.data}
        for tname in TASKS:
            _score(table, "f", tname, preds, vault, task)
        for stack in STACKS[1:]:
            tc_s = replace(tc, weights=stack_weights(stack, tc.weights))
            params, _ = train(prep.train, init_params(mcfg), mt if tc_s.weights.lambda_d > 0 else None, tc_s)
            sv, dv = LabelVault(prep.test), LabelVault(prep.test)
            _score(table, stack, "Single", dll_single(params, sv), sv, task)
            _score(table, stack, "Double", dll_double(params, dv, inf)[0], dv, task)
    rows = []
    for stack, tname, lab, metric in table.keys():
        for seed, v in zip(config.seeds, table.values((stack, tname, lab, metric))):
            rows.append({"stack": stack, "task": tname, "label": lab, "seed": seed, "metric": metric, "value": v})
    rows.sort(key=lambda r: (STACKS.index(r["stack"]), r["task"], r["label"], r["seed"], r["metric"]))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_rows(rows, ABLATION_COLUMNS, out_dir / "ablation.csv")
        table.to_json(out_dir / "results.json", {"config": config.to_dict(), "protocol": "ablation"})
    return rows


# convergence --------------------------------------------------------------

CONVERGENCE_COLUMNS = ["seed", "iteration", "label", "metric", "value"]


def _filled(trace: np.ndarray) -> np.ndarray:
    """Carry each sample's last iterate forward past its stopping point."""
    out = trace.copy()
    for k in range(1, len(out)):
        gap = np.isnan(out[k])
        out[k, gap] = out[k - 1, gap]
    return out


def convergence_report(config: ExperimentConfig, out_dir: str | Path | None = None,
                       params_by_seed: dict[int, DualTowerParams] | None = None) -> dict:
    """Metric of the alternate-inference iterates at every iteration, per seed."""
    task = config.task
    inf = config.inference_config()
    rows: list[dict] = []
    histograms: dict[int, dict[int, int]] = {}
    final: dict[int, dict[str, dict[str, float]]] = {}
    first_trace = None
    for seed in config.seeds:
        prep = prepare(config, seed)
        params = (params_by_seed or {}).get(seed)
        if params is None:
            params = fit_dll(config, prep.train, seed).params
        vault = LabelVault(prep.test)
        res = alternate_infer_batch(vault.x, params, inf)
        t1, t2 = _filled(res.trace1), _filled(res.trace2)
        truth = {"y1": vault.truth(1), "y2": vault.truth(2)}
        for k in range(len(t1)):
            for lab, tr in (("y1", t1), ("y2", t2)):
                for metric, v in task_metrics(task, tr[k], truth[lab]).items():
                    rows.append({"seed": seed, "iteration": k + 1, "label": lab, "metric": metric, "value": v})
        final[seed] = {lab: task_metrics(task, {"y1": res.y1, "y2": res.y2}[lab], truth[lab]) for lab in LABELS}
        iters, counts = np.unique(res.iterations, return_counts=True)
        histograms[seed] = {int(k): int(c) for k, c in zip(iters, counts)}
        if first_trace is None:
            first_trace = {i: res.trace(i) for i in range(len(vault.x))}
    report = {"iteration_histogram": histograms, "final": final, "rows": rows}
    if inf.epsilon is not None:
        report["median_iterations"] = {s: float(np.median(np.repeat(list(h.keys()), list(h.values()))))
                                       for s, h in histograms.items()}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_rows(rows, CONVERGENCE_COLUMNS, out_dir / "convergence.csv")
        write_traces(first_trace or {}, out_dir / "trace.csv")
        summary = {k: v for k, v in report.items() if k != "rows"}
        (out_dir / "convergence.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report
