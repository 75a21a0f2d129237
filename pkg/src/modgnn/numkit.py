"""Dense tensors with a reverse-mode gradient tape, MLP layers and Adam.

Everything is float64 and numpy backed. Operations broadcast like numpy;
gradients are reduced back onto the shape of each input.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_GRAD_ENABLED = True
_DEBUG = False


def set_debug(flag: bool) -> None:
    """Turn finiteness assertions on every forward and backward value on or off."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.name = name
        if _DEBUG:
            _check_finite(self.data, name or "tensor")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction ---------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if _DEBUG:
            _check_finite(data, "forward result")
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)),
        )

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) - self

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __pow__(self, exponent: float) -> Tensor:
        a = self.data
        return Tensor._make(
            a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),)
        )

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index) -> Tensor:
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), back)

    # -- reductions and shape ops ----------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def swapaxes(self, a: int, b: int) -> Tensor:
        return Tensor._make(
            np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),)
        )

    # -- pointwise nonlinearities ----------------------------------------

    def tanh(self) -> Tensor:
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self) -> Tensor:
        pos = self.data > 0
        return Tensor._make(self.data * pos, (self,), lambda g: (g * pos,))

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a, b) -> Tensor:
    """Matrix product; leading batch dimensions of either side broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(ad @ bd, (a, b), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back
    )


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar loss.

    Gradients accumulate into existing ``.grad`` arrays, so callers zero them
    between passes.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if _DEBUG:
            _check_finite(g, "gradient")
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- MLPs ---------------------------------------------------------------

ACTIVATIONS = ("relu", "tanh", "identity")


def activate(x: Tensor, name: str) -> Tensor:
    if name == "tanh":
        return x.tanh()
    if name == "relu":
        return x.relu()
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths from input to output. Three entries past the input is a
    "three layer" MLP (two hidden layers plus the output layer)."""

    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ContractError("an MLP needs at least an input and an output width")
        if any(w <= 0 for w in widths):
            raise ContractError(f"layer widths must be positive: {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def param_count(self) -> int:
        w = self.layer_widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))


def init_mlp(spec: MlpSpec) -> list[Tensor]:
    """Weights and biases ``[W0, b0, W1, b1, ...]``, uniform in +-sqrt(1/fan_in)."""
    rng = np.random.default_rng(spec.seed)
    params = []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        bound = math.sqrt(1.0 / fan_in)
        params.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True))
        params.append(Tensor(rng.uniform(-bound, bound, (fan_out,)), requires_grad=True))
    return params


def mlp_forward(spec: MlpSpec, params: Sequence[Tensor], x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != spec.layer_widths[0]:
        raise ShapeError(f"MLP expects width {spec.layer_widths[0]}, got {x.shape[-1]}")
    if len(params) != 2 * spec.n_layers:
        raise ShapeError(f"expected {2 * spec.n_layers} parameter tensors, got {len(params)}")
    # a lone vector is treated as one row
    h = x.reshape((1, x.shape[0])) if x.ndim == 1 else x
    for layer in range(spec.n_layers):
        h = h @ params[2 * layer] + params[2 * layer + 1]
        if layer < spec.n_layers - 1:
            h = activate(h, spec.activation)
    return h.reshape((spec.layer_widths[-1],)) if x.ndim == 1 else h


# -- optimizer ----------------------------------------------------------


@dataclass
class OptimState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> OptimState:
        state = cls(**hyper)
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
        return state


def optim_step(state: OptimState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m = state.first_moment[i] = b1 * state.first_moment[i] + (1.0 - b1) * g
        v = state.second_moment[i] = b2 * state.second_moment[i] + (1.0 - b2) * g * g
        p.data = p.data - state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)


# -- checkpoints --------------------------------------------------------


def params_to_records(named: Iterable[tuple[str, Tensor]]) -> list[dict]:
    return [
        {"name": name, "shape": list(t.shape), "values": t.data.ravel().tolist()}
        for name, t in named
    ]


def records_to_arrays(records: Iterable[dict]) -> dict[str, np.ndarray]:
    out = {}
    for rec in records:
        arr = np.array(rec["values"], dtype=np.float64).reshape(rec["shape"])
        out[rec["name"]] = arr
    return out


def save_checkpoint(path, named_params: Iterable[tuple[str, Tensor]], header: dict) -> None:
    doc = {"format_version": CHECKPOINT_FORMAT_VERSION, **header}
    doc["params"] = params_to_records(named_params)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    params = records_to_arrays(doc.pop("params"))
    return doc, params
