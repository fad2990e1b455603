"""Parameterised building blocks on top of ``app.tensor``."""

import logging
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from app.errors import ShapeError
from app.tensor import RngStream, Tensor, dropout, layer_norm

logger = logging.getLogger(__name__)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, op="parameter")


def glorot_uniform(rng: RngStream, fan_in: int, fan_out: int, shape: Optional[Tuple[int, ...]] = None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape or (fan_in, fan_out))


class Module:
    """Base class for anything holding parameters.

    Parameters are ``Tensor`` attributes with ``requires_grad``; child modules
    are found in attributes and in lists of modules, in definition order.
    """

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield f"{prefix}{name}", value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"parameter {name} has shape {p.shape}, stored {value.shape}")
            p.data = value.copy()


class Linear(Module):
    """``x @ W + b`` with Glorot-uniform weights."""

    def __init__(self, in_features: int, out_features: int, rng: RngStream, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = parameter(glorot_uniform(rng, in_features, out_features))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects last axis {self.in_features}, got shape {x.shape}")
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(1, self.in_features)
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(self.out_features) if squeeze else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gain = parameter(np.ones(dim))
        self.shift = parameter(np.zeros(dim))

    def forward(self, x) -> Tensor:
        return layer_norm(x, self.gain, self.shift, self.eps)


class Dropout(Module):
    def __init__(self, p: float, rng: RngStream):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x) -> Tensor:
        return dropout(x, self.p, self.rng, self.training)


class ResidualBlock(Module):
    """``x + W2 relu(W1 x)``."""

    def __init__(self, dim: int, rng: RngStream, hidden: Optional[int] = None):
        super().__init__()
        self.inner = Linear(dim, hidden or dim, rng)
        self.outer = Linear(hidden or dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.outer(self.inner(x).relu())
