"""Prescription text: word-level vocabulary, fixed-length tokenisation with an
attention mask, and a small trainable encoder producing the 768-d pooled
vector and its 256-d projection."""

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, field_validator

from app.attention import ProjectionSet, merge_heads, scaled_dot_attention, split_heads
from app.errors import ShapeError
from app.layers import Dropout, LayerNorm, Linear, Module, parameter
from app.tensor import RngStream, Tensor, as_tensor

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")

# words, doses such as 12.5mg and hyphenated drug names stay whole
TOKEN_PATTERN = re.compile(r"[a-z0-9]+(?:[.\-][a-z0-9]+)*")


def split_words(text: str) -> List[str]:
    return TOKEN_PATTERN.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    tokens: Tuple[str, ...]
    index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        object.__setattr__(self, "index", {token: i for i, token in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK)


def build_vocab(corpus: Iterable[str], max_size: Optional[int] = None) -> Vocab:
    """Frequency-ordered word vocabulary; ties break alphabetically, ``max_size`` caps the words."""
    texts = list(corpus)
    if not texts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(word for text in texts for word in split_words(text))
    words = [w for w, _ in sorted(counts.items(), key=lambda item: (-item[1], item[0])) if w not in SPECIAL_TOKENS]
    if max_size is not None:
        words = words[:max_size]
    logger.info(f"Vocabulary built: {len(words)} words from {len(texts)} texts")
    return Vocab(SPECIAL_TOKENS + tuple(words))


@dataclass(frozen=True)
class TokenSeq:
    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.ids.shape != self.mask.shape or self.ids.ndim != 1:
            raise ShapeError(f"ids {self.ids.shape} and mask {self.mask.shape} must be equal-length vectors")
        if not np.array_equal(self.ids == PAD, self.mask == 0):
            raise ValueError("mask must be 1 exactly on non-PAD positions")

    @property
    def max_len(self) -> int:
        return len(self.ids)


def tokenize(text: str, vocab: Vocab, max_len: int) -> TokenSeq:
    """[CLS] words [SEP] then PAD up to ``max_len``; long texts are cut before [SEP]."""
    if max_len < 2:
        raise ValueError(f"max_len must be at least 2, got {max_len}")
    words = split_words(text)[: max_len - 2]
    ids = [CLS] + [vocab.id_of(w) for w in words] + [SEP]
    real = len(ids)
    ids += [PAD] * (max_len - real)
    mask = np.zeros(max_len, dtype=np.int8)
    mask[:real] = 1
    return TokenSeq(np.asarray(ids, dtype=np.int64), mask)


def tokenize_batch(texts: Sequence[str], vocab: Vocab, max_len: int) -> Tuple[np.ndarray, np.ndarray]:
    seqs = [tokenize(text, vocab, max_len) for text in texts]
    return np.stack([s.ids for s in seqs]), np.stack([s.mask for s in seqs])


def patient_text(stages: Sequence[Tuple[str, str]]) -> str:
    """Stage-labelled prescription sentences joined in stage order."""
    return " ".join(f"{label}: {sentence}." for label, sentence in stages)


class TextEncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    max_len: PositiveInt = 512
    width: PositiveInt = 768
    blocks: PositiveInt = 2
    ffn: Optional[PositiveInt] = None
    heads: PositiveInt = 1
    pooled_dim: PositiveInt = 768
    feature_dim: PositiveInt = 256
    max_vocab: Optional[PositiveInt] = 5000
    dropout: float = Field(0.1, ge=0.0, lt=1.0)

    @field_validator("max_len")
    @classmethod
    def _room_for_specials(cls, value: int) -> int:
        if value < 2:
            raise ValueError("max_len must leave room for [CLS] and [SEP]")
        return value


class EncoderBlock(Module):
    """Pre-norm bidirectional self-attention and feed-forward, both residual, each dropped out before the sum."""

    def __init__(self, width: int, ffn: int, heads: int, rng: RngStream, dropout: float = 0.0, dropout_rng: Optional[RngStream] = None):
        super().__init__()
        self.heads = heads
        dropout_rng = dropout_rng or rng.substream(0)
        self.attention_dropout = Dropout(dropout, dropout_rng.substream(1))
        self.ffn_dropout = Dropout(dropout, dropout_rng.substream(2))
        self.attention_norm = LayerNorm(width)
        self.attention = ProjectionSet(width, width, rng, d_out=width)
        self.ffn_norm = LayerNorm(width)
        self.ffn_in = Linear(width, ffn, rng)
        self.ffn_out = Linear(ffn, width, rng)

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = self.attention_norm(x)
        q = split_heads(self.attention.queries(h), self.heads)
        k = split_heads(self.attention.keys(h), self.heads)
        v = split_heads(self.attention.values(h), self.heads)
        key_mask = mask[:, None, :] if self.heads > 1 else mask
        attended, _ = scaled_dot_attention(q, k, v, mask=key_mask)
        x = x + self.attention_dropout(self.attention.output(merge_heads(attended, self.heads)))
        return x + self.ffn_dropout(self.ffn_out(self.ffn_in(self.ffn_norm(x)).relu()))


class TextEncoder(Module):
    def __init__(self, config: TextEncoderConfig, vocab_size: int, rng: RngStream):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        width = config.width
        self.token_embedding = parameter(rng.normal(0.0, 0.02, (vocab_size, width)))
        self.position_embedding = parameter(rng.normal(0.0, 0.02, (config.max_len, width)))
        self.embedding_dropout = Dropout(config.dropout, rng.substream(0))
        self.blocks = [
            EncoderBlock(width, config.ffn or width, config.heads, rng, config.dropout, rng.substream(1 + i))
            for i in range(config.blocks)
        ]
        self.final_norm = LayerNorm(width)
        self.pooler = Linear(width, config.pooled_dim, rng) if width != config.pooled_dim else None
        self.projection = Linear(config.pooled_dim, config.feature_dim, rng)
        logger.info(f"Text encoder ready: vocab {vocab_size}, width {width}, {config.blocks} blocks")

    def embed(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[-1] != self.config.max_len:
            raise ShapeError(f"token sequences must have length {self.config.max_len}, got {ids.shape[-1]}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError(f"token id out of range for vocabulary of {self.vocab_size}")
        return self.embedding_dropout(self.token_embedding[ids] + self.position_embedding)

    def encode_embeddings(self, x, mask) -> Tensor:
        """Blocks, final norm and mask-weighted mean pooling over embedded tokens; (B, pooled_dim)."""
        x = as_tensor(x)
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim == 1:
            mask = mask[None, :]
        if (mask.sum(axis=1) == 0).any():
            raise ValueError("every sequence needs at least one unmasked token")
        for block in self.blocks:
            x = block(x, mask)
        x = self.final_norm(x)
        weights = mask / mask.sum(axis=1, keepdims=True)
        pooled = (x * weights[..., None]).sum(axis=1)
        return self.pooler(pooled) if self.pooler is not None else pooled

    def forward(self, ids, mask) -> Tensor:
        return self.encode_embeddings(self.embed(ids), mask)

    def encode_text(self, seq: TokenSeq) -> Tensor:
        return self.forward(seq.ids, seq.mask).reshape(self.config.pooled_dim)

    def project_text(self, pooled) -> Tensor:
        pooled = as_tensor(pooled)
        if pooled.shape[-1] != self.config.pooled_dim:
            raise ShapeError(f"projection expects a {self.config.pooled_dim}-d vector, got {pooled.shape}")
        return self.projection(pooled)


def encode_text(encoder: TextEncoder, seq: TokenSeq) -> Tensor:
    return encoder.encode_text(seq)


def project_text(encoder: TextEncoder, pooled) -> Tensor:
    return encoder.project_text(pooled)
