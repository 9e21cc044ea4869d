"""Dual-tower model: shared encoder (theta0), g = Tower 1 (theta1), f = Tower 2 (theta2).

Label inputs enter their embedding as a single float (a 0/1 label, a class-1
probability, or a raw regression value). The encoded features and the
embedded label are concatenated, passed through the hidden activation and
then the tower.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datahub import TaskKind, substream
from .diffcore import MLPSpec, ParamGroup, Tensor, as_tensor, concat, init_mlp, mlp_forward

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    encoder_widths: tuple[int, ...]
    embed_widths: tuple[int, ...] = (1, 8)
    tower_widths: tuple[int, ...] = (24, 16, 1)
    task: TaskKind = TaskKind.REGRESSION
    seed: int = 0
    hidden_activation: str = "tanh"

    def __post_init__(self):
        for name in ("encoder_widths", "embed_widths", "tower_widths"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        object.__setattr__(self, "task", TaskKind(self.task))
        if len(self.encoder_widths) < 2 or len(self.embed_widths) < 2 or len(self.tower_widths) < 2:
            raise ConfigError("encoder, embedding and tower each need at least two widths")
        if self.embed_widths[0] != 1:
            raise ConfigError(f"embedding input width must be 1 (a single label value), got {self.embed_widths[0]}")
        if self.tower_widths[-1] != 1:
            raise ConfigError(f"tower output width must be 1, got {self.tower_widths[-1]}")
        if self.encoder_widths[-1] + self.embed_widths[-1] != self.tower_widths[0]:
            raise ConfigError(
                f"widths do not compose: encoder out {self.encoder_widths[-1]} + embedding out "
                f"{self.embed_widths[-1]} != tower in {self.tower_widths[0]}"
            )

    @classmethod
    def default(cls, input_dim: int, task: TaskKind | str = TaskKind.REGRESSION, seed: int = 0) -> ModelConfig:
        return cls((input_dim, 32, 16), (1, 8), (24, 16, 1), TaskKind(task), seed)

    @property
    def input_dim(self) -> int:
        return self.encoder_widths[0]

    @property
    def encoder(self) -> MLPSpec:
        return MLPSpec(self.encoder_widths, self.hidden_activation, "identity")

    @property
    def embedding(self) -> MLPSpec:
        return MLPSpec(self.embed_widths, self.hidden_activation, "identity")

    @property
    def tower(self) -> MLPSpec:
        out = "sigmoid" if self.task.is_classification else "identity"
        return MLPSpec(self.tower_widths, self.hidden_activation, out)

    @property
    def head(self) -> MLPSpec:
        out = "sigmoid" if self.task.is_classification else "identity"
        return MLPSpec((self.encoder_widths[-1],) + self.tower_widths[1:], self.hidden_activation, out)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.value
        return d


@dataclass
class DualTowerParams:
    theta0: ParamGroup
    theta1: ParamGroup
    theta2: ParamGroup
    config: ModelConfig = field(repr=False, default=None)

    @property
    def groups(self) -> tuple[ParamGroup, ParamGroup, ParamGroup]:
        return (self.theta0, self.theta1, self.theta2)

    def copy(self) -> DualTowerParams:
        return DualTowerParams(self.theta0.copy(), self.theta1.copy(), self.theta2.copy(), self.config)

    def equals(self, other: DualTowerParams) -> bool:
        return all(a.equals(b) for a, b in zip(self.groups, other.groups))


@dataclass
class MultiTaskParams:
    shared: ParamGroup
    head1: ParamGroup
    head2: ParamGroup
    config: ModelConfig = field(repr=False, default=None)

    @property
    def groups(self) -> tuple[ParamGroup, ParamGroup, ParamGroup]:
        return (self.shared, self.head1, self.head2)

    def copy(self) -> MultiTaskParams:
        return MultiTaskParams(self.shared.copy(), self.head1.copy(), self.head2.copy(), self.config)

    def equals(self, other: MultiTaskParams) -> bool:
        return all(a.equals(b) for a, b in zip(self.groups, other.groups))


def init_params(config: ModelConfig) -> DualTowerParams:
    rng = substream(config.seed, "dualtower-init")
    theta0 = init_mlp(config.encoder, rng, ParamGroup("theta0"), "enc.")
    theta1 = init_mlp(config.embedding, rng, ParamGroup("theta1"), "emb1.")
    init_mlp(config.tower, rng, theta1, "tower1.")
    theta2 = init_mlp(config.embedding, rng, ParamGroup("theta2"), "emb2.")
    init_mlp(config.tower, rng, theta2, "tower2.")
    return DualTowerParams(theta0, theta1, theta2, config)


def init_multitask(config: ModelConfig) -> MultiTaskParams:
    rng = substream(config.seed, "multitask-init")
    shared = init_mlp(config.encoder, rng, ParamGroup("mt_shared"), "enc.")
    head1 = init_mlp(config.head, rng, ParamGroup("mt_head1"), "head.")
    head2 = init_mlp(config.head, rng, ParamGroup("mt_head2"), "head.")
    return MultiTaskParams(shared, head1, head2, config)


# forward passes -----------------------------------------------------------


def _as_rows(x) -> Tensor:
    x = as_tensor(x)
    return x.reshape(1, -1) if x.data.ndim == 1 else x


def _label_column(y, n: int) -> Tensor:
    y = as_tensor(y)
    if y.data.ndim == 0:
        return Tensor(np.full((n, 1), y.item()))
    return y.reshape(n, 1)


def _activate(h: Tensor, config: ModelConfig) -> Tensor:
    return h.relu() if config.hidden_activation == "relu" else h.tanh()


def encode(params: DualTowerParams, x) -> Tensor:
    """Shared representation of ``x`` under theta0, shape (n, encoder_out)."""
    return mlp_forward(params.config.encoder, params.theta0, _as_rows(x), "enc.")


def _tower(config: ModelConfig, group: ParamGroup, which: int, enc: Tensor, y_in) -> Tensor:
    n = enc.shape[0]
    emb = mlp_forward(config.embedding, group, _label_column(y_in, n), f"emb{which}.")
    h = _activate(concat([enc, emb], axis=1), config)
    return mlp_forward(config.tower, group, h, f"tower{which}.").reshape(n)


def f_from_encoding(params: DualTowerParams, enc: Tensor, y1) -> Tensor:
    return _tower(params.config, params.theta2, 2, enc, y1)


def g_from_encoding(params: DualTowerParams, enc: Tensor, y2) -> Tensor:
    return _tower(params.config, params.theta1, 1, enc, y2)


def f_forward(x, y1, params: DualTowerParams) -> Tensor:
    """Predict y2 from (x, y1): class-1 probability or regression value, shape (n,)."""
    return f_from_encoding(params, encode(params, x), y1)


def g_forward(x, y2, params: DualTowerParams) -> Tensor:
    """Predict y1 from (x, y2)."""
    return g_from_encoding(params, encode(params, x), y2)


def m_forward(x, mt: MultiTaskParams) -> tuple[Tensor, Tensor]:
    """Marginal predictions (y1, y2) from x alone."""
    config = mt.config
    h = mlp_forward(config.encoder, mt.shared, _as_rows(x), "enc.")
    h = _activate(h, config)
    n = h.shape[0]
    p1 = mlp_forward(config.head, mt.head1, h, "head.").reshape(n)
    p2 = mlp_forward(config.head, mt.head2, h, "head.").reshape(n)
    return p1, p2


# checkpoints --------------------------------------------------------------


def save_checkpoint(path: str | Path, params: DualTowerParams | MultiTaskParams) -> None:
    kind = "dualtower" if isinstance(params, DualTowerParams) else "multitask"
    header = {"version": CHECKPOINT_VERSION, "kind": kind, "config": params.config.to_dict(),
              "groups": [[g.name, list(g.keys())] for g in params.groups]}
    arrays = {f"{g.name}/{k}": t.data for g in params.groups for k, t in g.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header)), **arrays)


def load_checkpoint(path: str | Path) -> DualTowerParams | MultiTaskParams:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {header.get('version')}")
        config = ModelConfig(**header["config"])
        groups = []
        for name, keys in header["groups"]:
            groups.append(ParamGroup(name, {k: Tensor(z[f"{name}/{k}"].copy()) for k in keys}))
    cls = DualTowerParams if header["kind"] == "dualtower" else MultiTaskParams
    return cls(*groups, config)
