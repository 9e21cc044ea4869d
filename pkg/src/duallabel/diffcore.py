"""Small reverse-mode autodiff over float64 numpy arrays.

Only what the dual-tower model needs: dense layers, a handful of
activations, the two loss primitives, plain SGD and a central-difference
gradient checker.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

LOG_FLOOR = 1e-12
DTYPE = np.float64

_grad_enabled = True


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("data", "_parents", "_backward", "name", "requires_grad")

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        live = _grad_enabled and any(p.requires_grad for p in parents)
        self._parents = parents if live else ()
        self._backward = backward if live else None
        self.requires_grad = live
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, data={self.data!r})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        out_data = self.data + other.data

        def backward(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))

        return Tensor(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> Tensor:
        other = as_tensor(other)
        out_data = self.data - other.data

        def backward(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape))

        return Tensor(out_data, (self, other), backward)

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) - self

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape))

        return Tensor(a * b, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return (_unbroadcast(g / b, self.shape), _unbroadcast(-g * a / (b * b), other.shape))

        return Tensor(a / b, (self, other), backward)

    def __pow__(self, exponent: float) -> Tensor:
        a = self.data
        return Tensor(a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other: Tensor) -> Tensor:
        a, b = self.data, other.data

        def backward(g):
            return (g @ b.T, a.T @ g)

        return Tensor(a @ b, (self, other), backward)

    # reductions / shape ----------------------------------------------------

    def sum(self) -> Tensor:
        shape = self.shape
        return Tensor(self.data.sum(), (self,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self) -> Tensor:
        n = self.data.size
        shape = self.shape
        return Tensor(self.data.mean(), (self,), lambda g: (np.full(shape, g / n),))

    def reshape(self, *shape) -> Tensor:
        old = self.shape
        return Tensor(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def take(self, rows: Sequence[int]) -> Tensor:
        """Gather rows along the first axis."""
        idx = np.asarray(rows, dtype=np.intp)
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=DTYPE)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor(self.data[idx], (self,), backward)

    def column(self, j: int) -> Tensor:
        """Column ``j`` of a 2-D tensor as a 1-D tensor."""
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=DTYPE)
            full[:, j] = g
            return (full,)

        return Tensor(self.data[:, j], (self,), backward)

    # elementwise functions -------------------------------------------------

    def relu(self) -> Tensor:
        mask = self.data > 0
        return Tensor(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,))

    def tanh(self) -> Tensor:
        t = np.tanh(self.data)
        return Tensor(t, (self,), lambda g: (g * (1.0 - t * t),))

    def sigmoid(self) -> Tensor:
        s = _stable_sigmoid(self.data)
        return Tensor(s, (self,), lambda g: (g * s * (1.0 - s),))

    def softmax(self) -> Tensor:
        z = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=-1, keepdims=True)

        def backward(g):
            return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

        return Tensor(s, (self,), backward)

    def log(self, floor: float = LOG_FLOOR) -> Tensor:
        """Natural log with the argument clamped from below at ``floor``."""
        a = self.data
        clipped = np.maximum(a, floor)
        live = a >= floor
        return Tensor(np.log(clipped), (self,), lambda g: (np.where(live, g / clipped, 0.0),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor(out, tuple(parts), backward)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select; ``mask`` is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def backward(g):
        return (_unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape))

    return Tensor(out, (a, b), backward)


# parameters ---------------------------------------------------------------


@dataclass
class ParamGroup:
    """Named, ordered collection of parameter tensors."""

    name: str
    entries: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        for key, t in self.entries.items():
            t.name = f"{self.name}/{key}"
            t.requires_grad = True

    def __getitem__(self, key: str) -> Tensor:
        return self.entries[key]

    def __setitem__(self, key: str, value) -> None:
        if key in self.entries:
            raise KeyError(f"duplicate parameter key {key!r} in group {self.name!r}")
        t = Tensor(value.data if isinstance(value, Tensor) else value)
        t.name = f"{self.name}/{key}"
        t.requires_grad = True
        self.entries[key] = t

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def keys(self):
        return self.entries.keys()

    def copy(self) -> ParamGroup:
        return ParamGroup(self.name, {k: Tensor(t.data.copy()) for k, t in self.entries.items()})

    def equals(self, other: ParamGroup) -> bool:
        """Bit-exact comparison of keys and values."""
        if list(self.keys()) != list(other.keys()):
            return False
        return all(np.array_equal(t.data, other[k].data) for k, t in self.items())


Gradients = dict[str, dict[str, np.ndarray]]


def backward(loss: Tensor, groups: Iterable[ParamGroup] = ()) -> Gradients:
    """Reverse-mode sweep from a scalar loss.

    Returns ``{group_name: {key: grad}}``. Every parameter that was reached
    gets an entry; parameters of ``groups`` that were never reached get a zero
    array so callers can rely on complete maps.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg

    out: Gradients = {}
    for node in order:
        if node.name is None or "/" not in node.name:
            continue
        group, key = node.name.split("/", 1)
        g = grads.get(id(node))
        out.setdefault(group, {})[key] = np.zeros_like(node.data) if g is None else np.asarray(g, dtype=DTYPE)
    for grp in groups:
        bucket = out.setdefault(grp.name, {})
        for key, t in grp.items():
            if key not in bucket:
                bucket[key] = np.zeros_like(t.data)
    return out


def sgd_step(params: ParamGroup, grads: Mapping[str, np.ndarray] | None, lr: float) -> ParamGroup:
    """Return a new group with ``w - lr * grad`` for every key that has a gradient."""
    grads = grads or {}
    unknown = set(grads) - set(params.keys())
    if unknown:
        raise ContractError(f"gradients for unknown keys {sorted(unknown)} in group {params.name!r}")
    new = {}
    for key, t in params.items():
        g = grads.get(key)
        if g is None:
            new[key] = Tensor(t.data.copy())
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {params.name}/{key}")
        new[key] = Tensor(t.data - lr * g)
    return ParamGroup(params.name, new)


# MLP ----------------------------------------------------------------------

HIDDEN = ("relu", "tanh")
OUTPUT = ("identity", "sigmoid", "softmax")


@dataclass(frozen=True)
class MLPSpec:
    layer_widths: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ContractError("an MLP needs at least input and output widths")
        if any(w <= 0 for w in self.layer_widths):
            raise ContractError(f"layer widths must be positive: {self.layer_widths}")
        if self.hidden_activation not in HIDDEN:
            raise ContractError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT:
            raise ContractError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


def init_mlp(spec: MLPSpec, rng: np.random.Generator, group: ParamGroup, prefix: str = "") -> ParamGroup:
    """Add ``{prefix}w{i}`` / ``{prefix}b{i}`` entries, uniform in +-1/sqrt(fan_in)."""
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        group[f"{prefix}w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        group[f"{prefix}b{i}"] = rng.uniform(-bound, bound, size=(fan_out,))
    return group


def mlp_forward(spec: MLPSpec, params: ParamGroup, input: Tensor, prefix: str = "") -> Tensor:
    h = as_tensor(input)
    if h.shape[-1] != spec.layer_widths[0]:
        raise DimensionError(
            f"layer 0 of {params.name}/{prefix or 'mlp'} expects width {spec.layer_widths[0]}, got {h.shape[-1]}"
        )
    squeeze = h.data.ndim == 1
    if squeeze:
        h = h.reshape(1, -1)
    for i in range(spec.n_layers):
        w, b = params[f"{prefix}w{i}"], params[f"{prefix}b{i}"]
        if w.shape != (spec.layer_widths[i], spec.layer_widths[i + 1]):
            raise DimensionError(f"layer {i} of {params.name}/{prefix or 'mlp'}: weight shape {w.shape} does not match spec")
        h = h @ w + b
        if i < spec.n_layers - 1:
            h = h.relu() if spec.hidden_activation == "relu" else h.tanh()
    if spec.output_activation == "sigmoid":
        h = h.sigmoid()
    elif spec.output_activation == "softmax":
        h = h.softmax()
    if squeeze:
        h = h.reshape(spec.layer_widths[-1])
    return h


# losses -------------------------------------------------------------------


def cross_entropy(prob: Tensor, label: int, class_weights: Sequence[float] | None = None) -> Tensor:
    """``-w[label] * log(prob[label])`` for a single distribution.

    ``class_weights`` is indexed by class, so for binary reweighting pass
    ``(w_negative, w_positive)``.
    """
    p = prob.data
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ContractError(f"cross_entropy needs a probability vector, got {p}")
    w = 1.0 if class_weights is None else float(class_weights[label])
    return -(prob.take([label]).log().sum()) * w


def binary_cross_entropy(p: Tensor, labels: np.ndarray, pos_weight: float = 1.0, neg_weight: float = 1.0) -> Tensor:
    """Per-row weighted cross entropy of class-1 probabilities against 0/1 labels.

    Same quantity as :func:`cross_entropy` on the 2-vector ``[1-p, p]``.
    """
    y = np.asarray(labels, dtype=DTYPE)
    w = np.where(y >= 0.5, pos_weight, neg_weight)
    picked = p * y + (1.0 - p) * (1.0 - y)
    return -(picked.log() * w)


def mse(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch {a.shape} vs {b.shape}")
    return ((a - b) ** 2).mean()


def squared_error(a: Tensor, b) -> Tensor:
    """Per-element squared error, unreduced."""
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return (a - b) ** 2


# gradient checking --------------------------------------------------------


def finite_difference(loss_fn: Callable[[], Tensor], groups: Sequence[ParamGroup], eps: float = 1e-5) -> Gradients:
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``groups``.

    Perturbs parameter arrays in place and restores them afterwards.
    """
    out: Gradients = {}
    with no_grad():
        for grp in groups:
            bucket = out.setdefault(grp.name, {})
            for key, t in grp.items():
                flat = t.data.reshape(-1)
                g = np.zeros_like(flat)
                for j in range(flat.size):
                    old = flat[j]
                    flat[j] = old + eps
                    up = loss_fn().item()
                    flat[j] = old - eps
                    down = loss_fn().item()
                    flat[j] = old
                    g[j] = (up - down) / (2 * eps)
                bucket[key] = g.reshape(t.shape)
    return out


def max_relative_error(analytic: Gradients, numeric: Gradients, atol: float = 1e-7) -> float:
    """Largest ``|a - n| / max(|a|, |n|, atol)`` across all matching entries."""
    worst = 0.0
    for group, bucket in numeric.items():
        for key, n in bucket.items():
            a = analytic.get(group, {}).get(key, np.zeros_like(n))
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
            err = np.max(np.abs(a - n) / denom) if n.size else 0.0
            worst = max(worst, float(err))
    return worst
