"""Attention primitives: scaled-dot, efficient (spatial), transpose (channel),
the efficient dual attention block and skip-connection cross attention.

All kernels take token matrices shaped ``(..., n, d)``; leading axes are batch
axes and pass through untouched.
"""

import logging
import math
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveFloat, PositiveInt, model_validator

from app.errors import ShapeError
from app.layers import LayerNorm, Linear, Module, glorot_uniform, parameter
from app.tensor import RngStream, Tensor, as_tensor, softmax

logger = logging.getLogger(__name__)


class AttentionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    d_model: PositiveInt
    d_head: Optional[PositiveInt] = None
    temperature: Optional[PositiveFloat] = None
    eps: PositiveFloat = 1e-6
    heads: PositiveInt = 1

    @model_validator(mode="after")
    def _check_heads(self) -> "AttentionConfig":
        if self.head_dim % self.heads:
            raise ValueError(f"head width {self.head_dim} is not divisible by {self.heads} heads")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_head or self.d_model

    @property
    def tau(self) -> float:
        return self.temperature or math.sqrt(self.head_dim // self.heads)


class ProjectionSet(Module):
    """Query, key and value projections (no bias) plus an optional output projection."""

    def __init__(self, d_in: int, d_head: int, rng: RngStream, d_out: Optional[int] = None, output: bool = True):
        super().__init__()
        self.d_in = d_in
        self.d_head = d_head
        self.wq = parameter(glorot_uniform(rng, d_in, d_head))
        self.wk = parameter(glorot_uniform(rng, d_in, d_head))
        self.wv = parameter(glorot_uniform(rng, d_in, d_head))
        self.wo = parameter(glorot_uniform(rng, d_head, d_out or d_in)) if output else None

    def _check(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"projection expects width {self.d_in}, got shape {x.shape}")
        return x

    def queries(self, x) -> Tensor:
        return self._check(x) @ self.wq

    def keys(self, x) -> Tensor:
        return self._check(x) @ self.wk

    def values(self, x) -> Tensor:
        return self._check(x) @ self.wv

    def output(self, y: Tensor) -> Tensor:
        return y @ self.wo if self.wo is not None else y


def split_heads(x: Tensor, heads: int) -> Tensor:
    if heads == 1:
        return x
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-3, -2)


def merge_heads(x: Tensor, heads: int) -> Tensor:
    if heads == 1:
        return x
    *lead, h, n, d = x.shape
    return x.swapaxes(-3, -2).reshape(*lead, n, h * d)


def scaled_dot_attention(q, k, v, mask=None) -> Tuple[Tensor, Tensor]:
    """softmax(QKᵀ/√d)·V with an optional key-availability mask.

    ``mask`` is a 0/1 array over keys shaped like the leading axes of ``k``
    without the width axis; masked keys get weight exactly 0. Returns the
    attended values and the weight matrix.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} differs from key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    key_mask = None
    if mask is not None:
        mask = np.asarray(mask)
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("attention mask entries must be 0 or 1")
        if mask.shape[-1] != k.shape[-2]:
            raise ShapeError(f"mask covers {mask.shape[-1]} keys, got {k.shape[-2]}")
        key_mask = mask[..., None, :]
    scores = (q @ k.swapaxes(-1, -2)) / math.sqrt(q.shape[-1])
    weights = softmax(scores, axis=-1, mask=key_mask)
    return weights @ v, weights


def efficient_cross_attention(x_query, x_context, proj: ProjectionSet, heads: int = 1) -> Tensor:
    """ρq(Q)·(ρk(K)ᵀV): queries from ``x_query``, keys and values from ``x_context``.

    ρq is a softmax over features at each position, ρk a softmax over
    positions for each channel, so the cost is linear in the token count.
    """
    q = split_heads(proj.queries(x_query), heads)
    k = split_heads(proj.keys(x_context), heads)
    v = split_heads(proj.values(x_context), heads)
    context = softmax(k, axis=-2).swapaxes(-1, -2) @ v
    out = softmax(q, axis=-1) @ context
    return proj.output(merge_heads(out, heads))


def efficient_attention(x, proj: ProjectionSet, heads: int = 1) -> Tensor:
    return efficient_cross_attention(x, x, proj, heads)


def transpose_attention(x, proj: ProjectionSet, tau: float, heads: int = 1) -> Tensor:
    """Channel attention: A = softmax(QᵀK/τ) row-wise, output V·Aᵀ."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    q = split_heads(proj.queries(x), heads)
    k = split_heads(proj.keys(x), heads)
    v = split_heads(proj.values(x), heads)
    mixing = softmax((q.swapaxes(-1, -2) @ k) / tau, axis=-1)
    out = v @ mixing.swapaxes(-1, -2)
    return proj.output(merge_heads(out, heads))


class EfficientDualBlock(Module):
    """Transpose (channel) attention then efficient (spatial) attention,
    each pre-normalised and wrapped in a residual connection."""

    def __init__(self, config: AttentionConfig, rng: RngStream):
        super().__init__()
        self.config = config
        d = config.d_model
        self.channel_norm = LayerNorm(d, config.eps)
        self.channel = ProjectionSet(d, config.head_dim, rng, d_out=d)
        self.spatial_norm = LayerNorm(d, config.eps)
        self.spatial = ProjectionSet(d, config.head_dim, rng, d_out=d)

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.config.d_model:
            raise ShapeError(f"dual attention block expects width {self.config.d_model}, got {x.shape}")
        y = x + transpose_attention(self.channel_norm(x), self.channel, self.config.tau, self.config.heads)
        return y + efficient_attention(self.spatial_norm(y), self.spatial, self.config.heads)


class SkipCrossAttention(Module):
    """Cross attention between a decoder stage and its encoder skip connection.

    Decoder features are linearly scaled to the skip width; queries come from
    the skip features, keys and values from the scaled decoder features, and
    the skip features are added back as a residual.
    """

    def __init__(self, d_decoder: int, d_skip: int, rng: RngStream, config: Optional[AttentionConfig] = None):
        super().__init__()
        self.config = config or AttentionConfig(d_model=d_skip)
        if self.config.d_model != d_skip:
            raise ValueError(f"attention width {self.config.d_model} must equal skip width {d_skip}")
        self.scale = Linear(d_decoder, d_skip, rng)
        self.attention = ProjectionSet(d_skip, self.config.head_dim, rng, d_out=d_skip)

    def forward(self, decoder, skip) -> Tensor:
        decoder, skip = as_tensor(decoder), as_tensor(skip)
        if decoder.shape[-2] != skip.shape[-2]:
            raise ShapeError(f"token counts differ: decoder {decoder.shape[-2]}, skip {skip.shape[-2]}")
        scaled = self.scale(decoder)
        return skip + efficient_cross_attention(skip, scaled, self.attention, self.config.heads)
