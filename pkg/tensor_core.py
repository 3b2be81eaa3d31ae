"""Dense float32 tensors with tape-based reverse-mode differentiation and Adam.

Every operation returns a new :class:`Tensor`. While a :class:`Tape` is active
(``with Tape() as tape:``), operations touching a grad-enabled tensor append a
record holding the input node ids, the output node id and a local gradient
rule. :func:`backward` replays those records in reverse.
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from errors import ContractError, NumericalError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

GELU_COEFF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2 / math.pi)

_node_ids = itertools.count(1)
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)
_checked = os.environ.get("ICEVIT_CHECKED", "") not in ("", "0")

GradRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def set_checked_mode(enabled: bool) -> None:
    """Scan every op output for NaN/Inf and raise NumericalError when found."""
    global _checked
    _checked = bool(enabled)


def is_checked_mode() -> bool:
    return _checked


@contextlib.contextmanager
def checked_mode(enabled: bool = True) -> Iterator[None]:
    previous = _checked
    set_checked_mode(enabled)
    try:
        yield
    finally:
        set_checked_mode(previous)


class Tensor:
    """Row-major float32 array, optionally participating in a gradient tape."""

    __slots__ = ("data", "grad_enabled", "node_id")

    def __init__(self, data, grad_enabled: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if any(dim <= 0 for dim in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad_enabled = grad_enabled
        self.node_id: int | None = next(_node_ids) if grad_enabled else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.grad_enabled and self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", grad_enabled=True" if self.grad_enabled else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __pow__(self, exponent: float):
        return pow_scalar(self, exponent)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis, keepdims)


@dataclass(frozen=True)
class TapeRecord:
    op: str
    input_ids: tuple[int | None, ...]
    output_id: int
    rule: GradRule


class Tape:
    """Execution-ordered record of differentiable operations."""

    def __init__(self):
        self.records: list[TapeRecord] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        return backward(self, loss)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(out: np.ndarray, inputs: Sequence[Tensor], rule: GradRule, op: str) -> Tensor:
    result = Tensor(out)
    if _checked and not np.all(np.isfinite(result.data)):
        raise NumericalError(f"{op} produced non-finite values (output shape {result.shape})")
    tape = _active_tape.get()
    if tape is not None and any(t.tracked for t in inputs):
        result.grad_enabled = True
        result.node_id = next(_node_ids)
        input_ids = tuple(t.node_id if t.tracked else None for t in inputs)
        tape.records.append(TapeRecord(op, input_ids, result.node_id, rule))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _check_axis(x: Tensor, axis: int, op: str) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


# Elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    bd = b.data.astype(np.float64)

    def rule(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * a.data / (bd * bd), b.shape)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make(out, (a, b), rule, "div")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def pow_scalar(x: Tensor, exponent: float) -> Tensor:
    """x ** exponent for a constant exponent; x is expected non-negative unless exponent is integral."""
    xd = x.data.astype(np.float64)
    p = float(exponent)

    def rule(g):
        if p == 0:
            return (np.zeros_like(xd),)
        with np.errstate(divide="ignore", invalid="ignore"):
            local = p * xd ** (p - 1)
        # d/dx x^p at x == 0 is 0 for p > 1 and 1 for p == 1
        local = np.where(xd == 0, 1.0 if p == 1 else 0.0, local)
        return (g * local,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = xd**p
    return _make(out, (x,), rule, "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data.astype(np.float64))
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make(out, (x,), lambda g: (g / xd,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data.astype(np.float64))
    return _make(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


# Linear algebra and layout


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    ad = a.data.astype(np.float64)
    bd = b.data.astype(np.float64)

    def rule(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(ad, bd), (a, b), rule, "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def rule(g):
        grad = np.zeros(x.shape, dtype=np.float64)
        if basic:
            grad[index] = g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"getitem: {exc} for shape {x.shape}") from None
    return _make(out, (x,), rule, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = _check_axis(tensors[0], axis, "concat")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, rule, "concat")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


# Reductions


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.astype(np.float64).sum(axis=axis, keepdims=keepdims)
    return _make(out, (x,), lambda g: (_expand_reduced(g, x.shape, axis, keepdims),), "sum")


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = range(x.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.astype(np.float64).mean(axis=axis, keepdims=keepdims)
    return _make(out, (x,), lambda g: (_expand_reduced(g / count, x.shape, axis, keepdims),), "mean")


# Neural-network primitives


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "softmax")
    xd = x.data.astype(np.float64)
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), rule, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "log_softmax")
    xd = x.data.astype(np.float64)
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def rule(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), rule, "log_softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis with population variance, then scale and shift."""
    if eps < 0:
        raise ParameterError(f"layernorm eps must be non-negative, got {eps}")
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(f"layernorm: gamma {gamma.shape} / beta {beta.shape} must be ({width},) for input {x.shape}")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gamma.data.astype(np.float64)
    lead = tuple(range(x.ndim - 1))

    def rule(g):
        dxhat = g * gd
        dx = inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), rule, "layernorm")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    xd = x.data.astype(np.float64)
    t = np.tanh(_SQRT_2_OVER_PI * (xd + GELU_COEFF * xd**3))
    out = 0.5 * xd * (1 + t)

    def rule(g):
        du = _SQRT_2_OVER_PI * (1 + 3 * GELU_COEFF * xd * xd)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * du),)

    return _make(out, (x,), rule, "gelu")


# Differentiation


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss with respect to every grad-enabled leaf, keyed by node id."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.tracked:
        raise ContractError("loss was not computed from grad-enabled tensors on this tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=np.float64)}
    for record in reversed(tape.records):
        upstream = grads.pop(record.output_id, None)
        if upstream is None:
            continue
        for node_id, local in zip(record.input_ids, record.rule(upstream)):
            if node_id is None or local is None:
                continue
            previous = grads.get(node_id)
            grads[node_id] = local if previous is None else previous + local
    return {node_id: g.astype(np.float32) for node_id, g in grads.items()}


def gradients(tape: Tape, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Named gradients for a parameter set; unused parameters get zeros."""
    by_node = backward(tape, loss)
    named = {}
    for name, p in params.items():
        grad = by_node.get(p.node_id) if p.tracked else None
        named[name] = np.zeros(p.shape, dtype=np.float32) if grad is None else grad
    return named


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale gradients so their global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ParameterError(f"max_norm must be positive, got {max_norm}")
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total <= max_norm:
        return dict(grads), total
    scale = max_norm / (total + 1e-12)
    return {name: (g * scale).astype(np.float32) for name, g in grads.items()}, total


# Optimisation


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or self.epsilon <= 0:
            raise ParameterError(f"Adam lr and epsilon must be positive (lr={self.lr}, epsilon={self.epsilon})")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError(f"Adam betas must lie in [0, 1) (beta1={self.beta1}, beta2={self.beta2})")


def adam_step(
    params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if state.t < 0:
        raise ParameterError(f"Adam step counter must be non-negative, got {state.t}")
    if set(params) != set(grads):
        raise ContractError(f"gradient names {sorted(grads)} do not match parameters {sorted(params)}")
    t = state.t + 1
    new_params: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    correction1 = 1 - state.beta1**t
    correction2 = 1 - state.beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = np.zeros(p.shape) if m is None else m.astype(np.float64)
        v = np.zeros(p.shape) if v is None else v.astype(np.float64)
        if m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"Adam moments for {name!r} have shape {m.shape}, parameter has {p.shape}")
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        new_params[name] = Tensor(p.data.astype(np.float64) - update, grad_enabled=p.grad_enabled)
        new_m[name] = m.astype(np.float32)
        new_v[name] = v.astype(np.float32)
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.epsilon, t, new_m, new_v)
    return new_params, new_state
