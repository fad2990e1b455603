"""Dense float64 tensors with reverse-mode differentiation.

Every value is a numpy float64 array. An operation that involves a tensor
requiring gradients records its parents and a closure mapping the output
gradient to one gradient per parent; ``backward`` replays those closures in
reverse topological order.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from app.errors import MaskError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_state = threading.local()

Axis = Optional[Union[int, Tuple[int, ...]]]


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation and inference)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class RngStream:
    """Seeded Philox stream; the same seed and keys give the same draws everywhere.

    ``substream`` derives an independent child stream, so a cohort generator can
    give every patient and every purpose its own sequence without the draws of
    one affecting another.
    """

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed) % 2**64
        self.keys = tuple(int(key) for key in keys)
        sequence = np.random.SeedSequence([self.seed, *self.keys])
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def substream(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, *self.keys, *keys)

    def random(self, size=None):
        return self.generator.random(size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low: int, high: Optional[int] = None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace: bool = True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, keys={self.keys})"


def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = axis if isinstance(axis, tuple) else (axis,)
    return tuple(sorted(a % ndim for a in axes))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _is_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(part, (list, np.ndarray)) for part in parts)


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it."""

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        array = np.asarray(data, dtype=np.float64)
        if not np.isfinite(array).all():
            raise NonFiniteError(f"non-finite values produced by {op}")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
            "sub",
        )

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return _make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return _make(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            "div",
        )

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self.data
        p = float(exponent)
        return _make(a**p, (self,), lambda g: (g * p * a ** (p - 1.0),), "pow")

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other) -> "Tensor":
        return matmul(other, self)

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape
        fancy = _is_fancy(index)

        def _backward(g):
            grad = np.zeros(shape)
            if fancy:
                np.add.at(grad, index, g)
            else:
                grad[index] += g
            return (grad,)

        return _make(self.data[index], (self,), _backward, "getitem")

    # reductions and shape changes

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        axes = _normalize_axes(axis, self.ndim)

        def _backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape),)

        return _make(self.data.sum(axis=axes, keepdims=keepdims), (self,), _backward, "sum")

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) / float(count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        try:
            data = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"cannot reshape {original} into {shape}") from exc
        return _make(data, (self,), lambda g: (g.reshape(original),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose")

    def swapaxes(self, first: int, second: int) -> "Tensor":
        return _make(
            np.swapaxes(self.data, first, second),
            (self,),
            lambda g: (np.swapaxes(g, first, second),),
            "swapaxes",
        )

    # elementwise

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _make(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a)
        return _make(out, (self,), lambda g: (g / a,), "log")

    def relu(self) -> "Tensor":
        a = self.data
        return _make(np.maximum(a, 0.0), (self,), lambda g: (g * (a > 0),), "relu")

    def sigmoid(self) -> "Tensor":
        s = expit(self.data)
        return _make(s, (self,), lambda g: (g * s * (1.0 - s),), "sigmoid")

    def softplus(self) -> "Tensor":
        a = self.data
        return _make(np.logaddexp(0.0, a), (self,), lambda g: (g * expit(a),), "softplus")

    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)
        return _make(t, (self,), lambda g: (g * (1.0 - t * t),), "tanh")

    def clip(self, low: Optional[float] = None, high: Optional[float] = None) -> "Tensor":
        a = self.data
        keep = np.ones(a.shape, dtype=bool)
        if low is not None:
            keep &= a >= low
        if high is not None:
            keep &= a <= high
        return _make(np.clip(a, low, high), (self,), lambda g: (g * keep,), "clip")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data, parents: Tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if is_grad_enabled() and any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least two axes, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch axes do not broadcast: {a.shape} @ {b.shape}") from exc
    a_data, b_data = a.data, b.data

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b_data, -1, -2))
        gb = np.matmul(np.swapaxes(a_data, -1, -2), g)
        return _unbroadcast(ga, a_data.shape), _unbroadcast(gb, b_data.shape)

    return _make(data, (a, b), _backward, "matmul")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concatenate")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    count = len(tensors)
    return _make(data, tuple(tensors), lambda g: tuple(np.take(g, i, axis=axis) for i in range(count)), "stack")


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable softmax; masked entries get exactly zero weight.

    ``mask`` broadcasts against ``x`` and marks the entries that may receive
    weight. A slice along ``axis`` with no unmasked entry is an error.
    """
    x = as_tensor(x)
    logits = x.data
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask).astype(bool), logits.shape)
        if not keep.any(axis=axis).all():
            raise MaskError("softmax slice has every entry masked")
        shifted = np.where(keep, logits, -np.inf)
        shifted = shifted - shifted.max(axis=axis, keepdims=True)
        weights = np.where(keep, np.exp(shifted), 0.0)
    else:
        shifted = logits - logits.max(axis=axis, keepdims=True)
        weights = np.exp(shifted)
    weights = weights / weights.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (weights * (g - (g * weights).sum(axis=axis, keepdims=True)),)

    return _make(weights, (x,), _backward, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = as_tensor(x)
    if as_tensor(gain).shape[-1] != x.shape[-1]:
        raise ShapeError(f"layer norm width {as_tensor(gain).shape[-1]} does not match input {x.shape}")
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (variance + eps) ** 0.5 * gain + bias


def dropout(x, p: float, rng: RngStream, training: bool = True) -> Tensor:
    """Inverted dropout: surviving entries are scaled by 1/(1-p); identity when not training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack_: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor that requires gradients and feeds ``loss``.

    Leaf gradients accumulate across calls until zeroed; intermediate
    gradients are recomputed from scratch.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, grad in zip(node._parents, node._backward(node.grad)):
            if grad is not None and parent.requires_grad:
                parent._accumulate(np.asarray(grad, dtype=np.float64))


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-3) -> float:
    """Largest relative gap between analytic and central-difference gradients of ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    point = Tensor(x.copy(), requires_grad=True)
    out = f(point)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = point.grad if point.grad is not None else np.zeros_like(x)
    numeric = np.zeros_like(x)
    with no_grad():
        for index in np.ndindex(x.shape):
            shifted = x.copy()
            shifted[index] += step
            upper = f(Tensor(shifted)).item()
            shifted[index] -= 2.0 * step
            lower = f(Tensor(shifted)).item()
            numeric[index] = (upper - lower) / (2.0 * step)
    return _relative_gap(analytic, numeric)


def grad_check_parameter(loss_fn: Callable[[], Tensor], parameter: Tensor, step: float = 1e-3) -> float:
    """Same as ``grad_check`` but perturbs a parameter in place."""
    parameter.grad = None
    out = loss_fn()
    backward(out)
    analytic = parameter.grad if parameter.grad is not None else np.zeros_like(parameter.data)
    numeric = np.zeros_like(parameter.data)
    original = parameter.data.copy()
    try:
        with no_grad():
            for index in np.ndindex(original.shape):
                parameter.data = original.copy()
                parameter.data[index] += step
                upper = loss_fn().item()
                parameter.data[index] -= 2.0 * step
                lower = loss_fn().item()
                numeric[index] = (upper - lower) / (2.0 * step)
    finally:
        parameter.data = original
    return _relative_gap(analytic, numeric)


def _relative_gap(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    denominator = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denominator))
