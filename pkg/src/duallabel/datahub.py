"""Samples, label presence, CSV I/O, synthetic generators and splits."""
from __future__ import annotations

import csv
import enum
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .diffcore import ContractError


class TaskKind(str, enum.Enum):
    BINARY = "binary_classification"
    REGRESSION = "regression"

    @property
    def is_classification(self) -> bool:
        return self is TaskKind.BINARY


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y1: float | None = None
    y2: float | None = None

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return np.array_equal(self.x, other.x) and self.y1 == other.y1 and self.y2 == other.y2

    __hash__ = None  # type: ignore[assignment]


class PresenceMask(NamedTuple):
    u1: int
    u2: int


def presence_indicator(sample: Sample) -> PresenceMask:
    return PresenceMask(int(sample.y1 is not None), int(sample.y2 is not None))


@dataclass
class DatasetSplit:
    I_l: list[int] = field(default_factory=list)
    I_1: list[int] = field(default_factory=list)
    I_2: list[int] = field(default_factory=list)
    I_u: list[int] = field(default_factory=list)

    def sizes(self) -> tuple[int, int, int, int]:
        return len(self.I_l), len(self.I_1), len(self.I_2), len(self.I_u)


_BUCKETS = {(1, 1): "I_l", (1, 0): "I_1", (0, 1): "I_2", (0, 0): "I_u"}


def partition(dataset: Sequence[Sample]) -> DatasetSplit:
    split = DatasetSplit()
    for i, s in enumerate(dataset):
        getattr(split, _BUCKETS[tuple(presence_indicator(s))]).append(i)
    return split


# seeds --------------------------------------------------------------------


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Generator for a named sub-stream of ``seed``.

    Names are hashed with crc32 so that adding a new consumer never shifts
    the draws of an existing one.
    """
    keys = [int(seed)] + [zlib.crc32(str(n).encode()) for n in names]
    return np.random.default_rng(np.random.SeedSequence(keys))


# masking and splitting ----------------------------------------------------


def _check_rate(name: str, rate: float) -> None:
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"{name} must be in [0, 1], got {rate}")


def mask_labels(dataset: Sequence[Sample], rate1: float, rate2: float, seed: int) -> list[Sample]:
    """Independently drop each y1 with prob ``rate1`` and each y2 with ``rate2``."""
    _check_rate("rate1", rate1)
    _check_rate("rate2", rate2)
    n = len(dataset)
    rng = substream(seed, "mask")
    drop1 = rng.random(n) < rate1
    drop2 = rng.random(n) < rate2
    out = []
    for s, d1, d2 in zip(dataset, drop1, drop2):
        out.append(replace(s, y1=None if d1 else s.y1, y2=None if d2 else s.y2))
    return out


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = math.floor(0.64 * n)
    n_val = math.floor(0.16 * n)
    return n_train, n_val, n - n_train - n_val


def train_val_test_split(dataset: Sequence[Sample], seed: int) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Seeded shuffle, then contiguous 64:16:20 cut (floors, remainder to test)."""
    order = substream(seed, "split").permutation(len(dataset))
    n_train, n_val, _ = split_sizes(len(dataset))
    pick = [dataset[int(i)] for i in order]
    return pick[:n_train], pick[n_train : n_train + n_val], pick[n_train + n_val :]


def fully_labeled(dataset: Sequence[Sample]) -> list[Sample]:
    return [s for s in dataset if s.y1 is not None and s.y2 is not None]


# features -----------------------------------------------------------------


@dataclass(frozen=True)
class MinMaxScaler:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, dataset: Sequence[Sample]) -> MinMaxScaler:
        X = features(dataset)
        return cls(X.min(axis=0), X.max(axis=0))

    def transform(self, dataset: Sequence[Sample]) -> list[Sample]:
        span = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        return [replace(s, x=(s.x - self.lo) / span) for s in dataset]


def features(dataset: Sequence[Sample]) -> np.ndarray:
    if not dataset:
        return np.zeros((0, 0))
    return np.stack([s.x for s in dataset])


def labels(dataset: Sequence[Sample], which: int) -> np.ndarray:
    """Label column as floats with NaN for missing values."""
    attr = "y1" if which == 1 else "y2"
    return np.array([np.nan if getattr(s, attr) is None else getattr(s, attr) for s in dataset], dtype=np.float64)


# CSV ----------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def save_csv(dataset: Sequence[Sample], path: str | Path) -> None:
    d = len(dataset[0].x) if dataset else 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(d)] + ["y1", "y2"])
        for s in dataset:
            row = [_fmt(v) for v in s.x]
            row += ["" if s.y1 is None else _fmt(s.y1), "" if s.y2 is None else _fmt(s.y2)]
            w.writerow(row)


def _parse_label(cell: str, task: TaskKind, row: int, col: str) -> float | None:
    cell = cell.strip()
    if cell == "":
        return None
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"row {row}, column {col}: cannot parse {cell!r} as a number") from None
    if task.is_classification and v not in (0.0, 1.0):
        raise ParseError(f"row {row}, column {col}: classification label must be 0 or 1, got {cell!r}")
    return v


def load_csv(path: str | Path, task: TaskKind | str) -> list[Sample]:
    task = TaskKind(task)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: missing header row") from None
        for col in ("y1", "y2"):
            if col not in header:
                raise SchemaError(f"{path}: header lacks column {col!r}")
        xcols = sorted((h for h in header if h.startswith("x") and h[1:].isdigit()), key=lambda h: int(h[1:]))
        if not xcols or [int(h[1:]) for h in xcols] != list(range(len(xcols))):
            raise SchemaError(f"{path}: feature columns must be x0..x{{d-1}}, got {xcols}")
        xpos = [header.index(h) for h in xcols]
        p1, p2 = header.index("y1"), header.index("y2")
        out = []
        for r, cells in enumerate(reader, start=1):
            if not cells:
                continue
            if len(cells) != len(header):
                raise ParseError(f"row {r}: expected {len(header)} cells, got {len(cells)}")
            x = np.empty(len(xpos))
            for j, p in enumerate(xpos):
                try:
                    x[j] = float(cells[p])
                except ValueError:
                    raise ParseError(f"row {r}, column {header[p]}: cannot parse {cells[p]!r} as a number") from None
            out.append(Sample(x, _parse_label(cells[p1], task, r, "y1"), _parse_label(cells[p2], task, r, "y2")))
    return out


# synthetic generators -----------------------------------------------------


@dataclass(frozen=True)
class RegressionTruth:
    """y2 = 1 + a.x ;  y1 = 0.5 * y2 + 1 + sin(x0)."""

    a: np.ndarray

    def y2(self, x: np.ndarray) -> np.ndarray:
        return 1.0 + x @ self.a

    def y1_from_y2(self, x: np.ndarray, y2) -> np.ndarray:
        return 0.5 * np.asarray(y2) + 1.0 + np.sin(x[..., 0])

    def y2_from_y1(self, x: np.ndarray, y1) -> np.ndarray:
        return 2.0 * (np.asarray(y1) - 1.0 - np.sin(x[..., 0]))


def gen_synthetic_regression(n: int, d: int, seed: int) -> tuple[list[Sample], RegressionTruth]:
    if n < 1 or d < 2:
        raise ContractError("need n >= 1 and d >= 2")
    rng = substream(seed, "synthetic-regression")
    # positive coefficients scaled so y2 stays in roughly [1, 3]
    a = rng.uniform(0.5, 1.5, size=d) * (2.0 / d)
    X = rng.uniform(0.0, 1.0, size=(n, d))
    truth = RegressionTruth(a)
    y2 = truth.y2(X)
    y1 = truth.y1_from_y2(X, y2)
    return [Sample(X[i], float(y1[i]), float(y2[i])) for i in range(n)], truth


@dataclass(frozen=True)
class ClassificationTruth:
    """t = b.x + N(0, 0.1^2); y1 = [t > thr1]; y2 = [t + 0.5 x1 > thr2]."""

    b: np.ndarray
    noise: np.ndarray
    thr1: float
    thr2: float


def gen_synthetic_classification(n: int, d: int, seed: int) -> tuple[list[Sample], ClassificationTruth]:
    if n < 1 or d < 2:
        raise ContractError("need n >= 1 and d >= 2")
    rng = substream(seed, "synthetic-classification")
    b = rng.normal(0.0, 1.0, size=d)
    X = rng.uniform(0.0, 1.0, size=(n, d))
    noise = rng.normal(0.0, 0.1, size=n)
    t = X @ b + noise
    s = t + 0.5 * X[:, 1]
    thr1, thr2 = float(np.median(t)), float(np.median(s))
    y1 = (t > thr1).astype(float)
    y2 = (s > thr2).astype(float)
    truth = ClassificationTruth(b, noise, thr1, thr2)
    return [Sample(X[i], float(y1[i]), float(y2[i])) for i in range(n)], truth
