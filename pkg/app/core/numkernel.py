"""
Dense float64 tensors with record-by-execution reverse-mode differentiation.

Every differentiable primitive computes its forward value with numpy and, when
any input requires a gradient, records an Operation holding its inputs and a
backward closure. Operations receive a global sequence number at execution
time, so sorting the operations reachable from a loss by that number yields a
topological order for the backward traversal.
"""
from __future__ import annotations

import contextvars
import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.validators.errors import (
    GcdValidationError,
    InfiniteDivergenceError,
    NonFiniteError,
    ShapeMismatchError,
)

DTYPE = np.float64
SIMPLEX_TOLERANCE = 1e-9
_TINY = np.finfo(DTYPE).tiny

_op_counter = itertools.count()
_recording = contextvars.ContextVar("numkernel_recording", default=True)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


@dataclass(eq=False)
class Operation:
    # One executed differentiable op; seq orders ops by execution
    name: str
    inputs: Tuple["Tensor", ...]
    backward: BackwardFn
    seq: int = field(default_factory=lambda: next(_op_counter))


class Tensor:
    # Dense real array; leaves with requires_grad own a same-shape grad accumulator
    __array_priority__ = 100

    def __init__(self, values: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(values, Tensor):
            values = values.data
        self.data = np.array(values, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if self.requires_grad else None
        self._op: Optional[Operation] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self) -> None:
        backward(self)

    # Operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)


@dataclass
class Graph:
    # Operations reachable from an output, in execution (= topological) order
    operations: List[Operation]

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        found = {}
        stack = [output._op] if output._op is not None else []
        while stack:
            op = stack.pop()
            if op.seq in found:
                continue
            found[op.seq] = op
            for tensor in op.inputs:
                if tensor._op is not None and tensor._op.seq not in found:
                    stack.append(tensor._op)
        return cls(operations=[found[seq] for seq in sorted(found)])

    def __len__(self) -> int:
        return len(self.operations)

    def op_names(self) -> List[str]:
        return [op.name for op in self.operations]


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable operation recording inside the block (evaluation passes)."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


def is_recording() -> bool:
    return _recording.get()


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def apply_op(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap a forward result and record its backward closure when needed."""
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=DTYPE)
    out.requires_grad = False
    out.name = None
    out.grad = None
    out._op = None
    if _recording.get() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = Operation(name=name, inputs=tuple(inputs), backward=backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf reachable from loss."""
    if loss.size != 1:
        raise GcdValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad += np.ones_like(loss.data)
        return

    graph = Graph.from_output(loss)
    pending = {loss._op.seq: np.ones_like(loss.data)}
    for op in reversed(graph.operations):
        upstream = pending.pop(op.seq, None)
        if upstream is None:
            continue
        for tensor, grad in zip(op.inputs, op.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.is_leaf:
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += grad
            elif tensor._op.seq in pending:
                pending[tensor._op.seq] = pending[tensor._op.seq] + grad
            else:
                pending[tensor._op.seq] = grad


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from None


# Elementwise arithmetic

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return apply_op("add", a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return apply_op("sub", a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return apply_op("mul", a.data * b.data, (a, b),
                    lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return apply_op("div", out, (a, b),
                    lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return apply_op("neg", -a.data, (a,), lambda g: (-g,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return apply_op("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return apply_op("exp", out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return apply_op("log", np.log(a.data), (a,), lambda g: (g / a.data,))


# Linear algebra and shape manipulation

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading (batch) axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner extents differ for {a.shape} @ {b.shape}")

    def _backward(g):
        grad_a = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        grad_b = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return grad_a, grad_b

    return apply_op("matmul", a.data @ b.data, (a, b), _backward)


def linear(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    """Row-vector convention: x @ weight^T + bias."""
    weight = as_tensor(weight)
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return apply_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return apply_op("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def take(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)

    def _backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return apply_op("take", a.data[index], (a,), _backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatchError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    splits = np.cumsum(sizes)[:-1]
    return apply_op("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def broadcast_rows(row: ArrayLike, rows: int) -> Tensor:
    """Repeat a bias row vector into a rows x n matrix."""
    row = as_tensor(row)
    flat = row.data.reshape(1, -1)
    return apply_op("broadcast_rows", np.repeat(flat, rows, axis=0), (row,),
                    lambda g: (g.sum(axis=0).reshape(row.shape),))


# Reductions

def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return apply_op("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), _backward)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return apply_op("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), _backward)


# Normalisation and probability

def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise GcdValidationError(f"temperature must be > 0, got {temperature}")


def softmax(x: ArrayLike, temperature: float = 1.0, axis: int = -1) -> Tensor:
    _check_temperature(temperature)
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax input contains non-finite values")
    scaled = x.data / temperature
    shifted = np.exp(scaled - scaled.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def _backward(g):
        return ((out * (g - (g * out).sum(axis=axis, keepdims=True))) / temperature,)

    return apply_op("softmax", out, (x,), _backward)


def log_softmax(x: ArrayLike, temperature: float = 1.0, axis: int = -1) -> Tensor:
    _check_temperature(temperature)
    x = as_tensor(x)
    scaled = x.data / temperature
    shifted = scaled - scaled.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def _backward(g):
        return ((g - probs * g.sum(axis=axis, keepdims=True)) / temperature,)

    return apply_op("log_softmax", out, (x,), _backward)


def layer_norm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale by gain and shift by bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    x_hat = (x.data - mu) * inv_std

    def _backward(g):
        g_hat = g * gain.data
        grad_x = inv_std * (g_hat - g_hat.mean(axis=-1, keepdims=True)
                            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True))
        return grad_x, _unbroadcast(g * x_hat, gain.shape), _unbroadcast(g, bias.shape)

    return apply_op("layer_norm", x_hat * gain.data + bias.data, (x, gain, bias), _backward)


def l2_normalize(x: ArrayLike, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = np.maximum(np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True)), eps)
    out = x.data / norm

    def _backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return apply_op("l2_normalize", out, (x,), _backward)


def check_simplex(name: str, values: np.ndarray) -> None:
    total = values.sum(axis=-1)
    if not np.all(np.isfinite(values)) or np.any(values < 0) or np.any(np.abs(total - 1.0) > SIMPLEX_TOLERANCE):
        raise GcdValidationError(f"{name} is not on the probability simplex (sum={total})")


def kl_divergence(p: ArrayLike, q: ArrayLike) -> Tensor:
    """D_KL(p || q) for 1-D distributions; q is treated as a constant target."""
    p = as_tensor(p)
    q_values = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=DTYPE)
    if p.shape != q_values.shape or p.ndim != 1:
        raise ShapeMismatchError(f"kl_divergence: shapes {p.shape} and {q_values.shape}")
    check_simplex("p", p.data)
    check_simplex("q", q_values)
    support = p.data > 0
    if np.any(support & (q_values == 0)):
        raise InfiniteDivergenceError("q has zero mass where p is positive")

    ratio = np.where(support, p.data, 1.0) / np.where(q_values > 0, q_values, 1.0)
    value = np.sum(np.where(support, p.data * np.log(ratio), 0.0))
    safe_q = np.where(q_values > 0, q_values, 1.0)

    def _backward(g):
        return (g * (np.log(np.maximum(p.data, _TINY) / safe_q) + 1.0),)

    return apply_op("kl_divergence", np.asarray(value), (p,), _backward)


# Gradient checking

def numerical_gradient(fn: Callable[[], Tensor], target: Tensor, step: float = 1e-5,
                       indices: Optional[Sequence[Tuple[int, ...]]] = None) -> np.ndarray:
    """Central finite differences of scalar fn() w.r.t. target's values (in place)."""
    grad = np.zeros_like(target.data)
    positions = indices if indices is not None else list(np.ndindex(target.shape))
    with no_grad():
        for position in positions:
            original = target.data[position]
            target.data[position] = original + step
            plus = fn().item()
            target.data[position] = original - step
            minus = fn().item()
            target.data[position] = original
            grad[position] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a| + |n|, floor)."""
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def zeros(shape: Sequence[int], requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad, name=name)


def ones(shape: Sequence[int], requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=requires_grad, name=name)


def gaussian(rng: np.random.Generator, shape: Sequence[int], std: float,
             requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad, name=name)
