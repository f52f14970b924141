"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` appends a node to the
active :class:`Tape`. Tapes are thread-local and opt-in: outside a
``with Tape():`` block nothing is recorded, so plain forward calls keep no
graph alive.

    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(sum_all(x * x))
    x.grad  # array([2., 4.])
"""
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import DimensionError, NonFiniteError, ShapeError

Number = Union[int, float]
ArrayLike = Union["Tensor", np.ndarray, Sequence, Number]

LAYER_NORM_EPS = 1e-5

# Per-thread tape stack and no-grad switch
_local = threading.local()


def _state():
    if not hasattr(_local, "stack"):
        _local.stack = []
        _local.grad_enabled = True
    return _local


class Tensor:
    """A float64 array that can take part in gradient computation"""

    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf")
    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NonFiniteError("tensor")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("tensors can only be divided by python scalars")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of the ops of one forward pass"""

    def __init__(self):
        self.nodes: List[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _state().stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _state().stack
        if any(tape is self for tape in stack):
            stack.remove(self)
        return False

    def clear(self):
        self.nodes = []

    def record(self, node: _Node):
        self.nodes.append(node)

    def backward(self, loss: Tensor):
        """Accumulate d loss / d leaf into ``grad`` of every participating leaf"""
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise DimensionError("loss does not depend on any tensor that requires grad")
        seed = np.ones_like(loss.data)
        if loss.is_leaf:
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        if not any(node.output is loss for node in self.nodes):
            raise DimensionError("loss was not recorded on this tape")

        pending = {id(loss): seed}
        for node in reversed(self.nodes):
            grad = pending.pop(id(node.output), None)
            if grad is None:
                continue
            for tensor, tensor_grad in zip(node.inputs, node.backward(grad)):
                if tensor_grad is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    tensor.grad = tensor_grad.copy() if tensor.grad is None else tensor.grad + tensor_grad
                else:
                    key = id(tensor)
                    pending[key] = tensor_grad if key not in pending else pending[key] + tensor_grad
        self.clear()


def current_tape() -> Tape:
    """The innermost active tape, or an empty idle one when none is active"""
    state = _state()
    return state.stack[-1] if state.stack else Tape()


def is_recording() -> bool:
    state = _state()
    return state.grad_enabled and bool(state.stack)


def reset_tape():
    """Deactivate and clear every tape of this thread"""
    state = _state()
    for tape in state.stack:
        tape.clear()
    state.stack.clear()


def backward(loss: Tensor):
    """Backward pass on the innermost active tape"""
    state = _state()
    if not state.stack:
        raise DimensionError("backward called outside a Tape context")
    state.stack[-1].backward(loss)


def is_grad_enabled() -> bool:
    return _state().grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them (inference, finite differences)"""
    state = _state()
    previous = state.grad_enabled
    state.grad_enabled = False
    try:
        yield
    finally:
        state.grad_enabled = previous


def _as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.is_leaf = False
    out.requires_grad = is_recording() and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        current_tape().record(_Node(op, inputs, out, backward_fn))
    return out


def _broadcast_shape(op: str, *shapes) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise DimensionError(f"{op}: shapes {' and '.join(str(tuple(s)) for s in shapes)} are not broadcastable")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# Elementwise ops

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, factor: Number) -> Tensor:
    factor = float(factor)
    return _emit("scale", x.data * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        y = np.sqrt(x.data)

    def backward_fn(g):
        # subgradient 0 at the kink so a perfect fit does not produce Inf
        safe = np.where(y > 0, y, 1.0)
        return (np.where(y > 0, g / (2.0 * safe), 0.0),)

    return _emit("sqrt", y, (x,), backward_fn)


def abs(x: Tensor) -> Tensor:  # noqa: A001
    sign = np.sign(x.data)
    return _emit("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def sum_all(x: Tensor) -> Tensor:
    return _emit("sum_all", np.array(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    count = x.size
    return _emit("mean_all", np.array(x.data.mean()), (x,),
                 lambda g: (np.full(x.shape, float(g) / count),))


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    axis = _normalize_axis(axis, x.ndim, "sum_axis")

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum_axis", x.data.sum(axis=axis, keepdims=keepdims), (x,), backward_fn)


# Shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}")
    return _emit("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return _emit("permute", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    axis1 = _normalize_axis(axis1, x.ndim, "swapaxes")
    axis2 = _normalize_axis(axis2, x.ndim, "swapaxes")
    return _emit("swapaxes", np.swapaxes(x.data, axis1, axis2), (x,),
                 lambda g: (np.swapaxes(g, axis1, axis2),))


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"transpose_last2: needs at least 2 axes, got shape {x.shape}")
    return swapaxes(x, -1, -2)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if _broadcast_shape("broadcast_to", x.shape, shape) != shape:
        raise DimensionError(f"broadcast_to: cannot expand {x.shape} to {shape}")
    return _emit("broadcast_to", np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (_unbroadcast(g, x.shape),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """Join tensors along ``axis``; every other axis must agree"""
    if not parts:
        raise DimensionError("concat: no tensors given")
    parts = tuple(_as_tensor(p) for p in parts)
    ndim = parts[0].ndim
    axis = _normalize_axis(axis, ndim, "concat")
    for part in parts[1:]:
        if part.ndim != ndim or any(
            part.shape[i] != parts[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise DimensionError(
                f"concat: shapes {parts[0].shape} and {part.shape} disagree off axis {axis}"
            )
    offsets = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _emit("concat", np.concatenate([p.data for p in parts], axis=axis), parts,
                 lambda g: tuple(np.split(g, offsets, axis=axis)))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous range ``[start, stop)`` of one axis"""
    axis = _normalize_axis(axis, x.ndim, "slice_axis")
    length = x.shape[axis]
    if not 0 <= start < stop <= length:
        raise DimensionError(f"slice_axis: range [{start}, {stop}) invalid for axis of length {length}")
    index = tuple(slice(start, stop) if i == axis else slice(None) for i in range(x.ndim))

    def backward_fn(g):
        full = np.zeros(x.shape)
        full[index] = g
        return (full,)

    return _emit("slice_axis", x.data[index].copy(), (x,), backward_fn)


# Linear algebra and normalization

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands need at least 2 axes, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])

    def backward_fn(g):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _emit("matmul", a.data @ b.data, (a, b), backward_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted"""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax: empty last axis in shape {x.shape}")
    shifted = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = shifted / shifted.sum(axis=-1, keepdims=True)
    return _emit("softmax", y, (x,),
                 lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    size = x.shape[-1]
    if gain.shape != (size,) or bias.shape != (size,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis of {x.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normalized = centered * inv_std
    y = normalized * gain.data + bias.data

    def backward_fn(g):
        reduce_axes = tuple(range(g.ndim - 1))
        grad_gain = (g * normalized).sum(axis=reduce_axes)
        grad_bias = g.sum(axis=reduce_axes)
        grad_norm = g * gain.data
        grad_x = inv_std / size * (
            size * grad_norm
            - grad_norm.sum(axis=-1, keepdims=True)
            - normalized * (grad_norm * normalized).sum(axis=-1, keepdims=True)
        )
        return grad_x, grad_gain, grad_bias

    return _emit("layer_norm", y, (x, gain, bias), backward_fn)


# Finite-difference helpers

def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``tensor``"""
    grad = np.zeros(tensor.shape)
    if not tensor.data.flags.c_contiguous:
        tensor.data = np.ascontiguousarray(tensor.data)
    # a view, so writes reach tensor.data
    flat = tensor.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = fn().item()
            flat[i] = original - h
            lower = fn().item()
            flat[i] = original
            grad.reshape(-1)[i] = (upper - lower) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denominator


def gradient_check(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4,
                   tiny: float = 1e-7, atol: float = 1e-9) -> bool:
    """
    True when every entry agrees to ``rtol`` relative error. Entries where both
    values are below ``tiny`` only need to agree to ``atol`` absolutely, since a
    central difference cannot resolve them any better in float64.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ShapeError(f"gradient_check: {analytic.shape} vs {numeric.shape}")
    close = relative_error(analytic, numeric) < rtol
    negligible = (np.maximum(np.abs(analytic), np.abs(numeric)) < tiny) & (np.abs(analytic - numeric) < atol)
    return bool(np.all(close | negligible))
