"""Attention fusion of the three modality features and the multi-task heads."""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from app.attention import ProjectionSet, scaled_dot_attention
from app.errors import ShapeError
from app.layers import Linear, Module, ResidualBlock
from app.risk_predictor import DEFAULT_THRESHOLDS, RISK_LEVELS, risk_level_codes, validate_thresholds
from app.tensor import RngStream, Tensor, as_tensor, softmax, stack

logger = logging.getLogger(__name__)

MODALITIES = ("text", "cine", "numeric")
CAUSE_LABELS = ("none", "pump failure", "arrhythmia", "other")
MACCES_LABELS = ("none", "stroke", "MI", "revascularization", "cardiac death")
HEADS = ("death", "cause", "days", "macces")


@dataclass
class ModalityFeatures:
    text: np.ndarray
    cine: np.ndarray
    numeric: np.ndarray
    available: Tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        self.available = tuple(int(a) for a in self.available)
        if len(self.available) != 3 or any(a not in (0, 1) for a in self.available):
            raise ValueError(f"availability must be three 0/1 flags, got {self.available}")
        if sum(self.available) == 0:
            raise ValueError("at least one modality must be available")
        for name in MODALITIES:
            vector = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.isfinite(vector).all():
                raise ValueError(f"{name} features are not finite")
            setattr(self, name, vector)


@dataclass(frozen=True)
class AllocationReport:
    text: float
    cine: float
    numeric: float

    def __post_init__(self):
        weights = np.array([self.text, self.cine, self.numeric])
        if (weights < 0).any() or abs(weights.sum() - 1.0) > 1e-6:
            raise ValueError(f"allocation weights must be nonnegative and sum to 1, got {weights.tolist()}")

    @classmethod
    def from_weights(cls, weights: Sequence[float]) -> "AllocationReport":
        return cls(*(float(w) for w in weights))

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


class AllocationStrategy(BaseModel):
    """Learned self-attention allocation, or fixed weights over (text, cine, numeric)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["self", "fixed"] = "self"
    weights: Optional[Tuple[float, float, float]] = None

    @model_validator(mode="after")
    def _check_weights(self) -> "AllocationStrategy":
        if self.kind == "self":
            if self.weights is not None:
                raise ValueError("self-attention allocation takes no fixed weights")
            return self
        if self.weights is None:
            raise ValueError("fixed allocation needs three weights")
        if min(self.weights) < 0 or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"fixed weights must be nonnegative and sum to 1, got {self.weights}")
        return self

    @classmethod
    def self_reasoning(cls) -> "AllocationStrategy":
        return cls(kind="self")

    @classmethod
    def fixed(cls, text: float, cine: float, numeric: float) -> "AllocationStrategy":
        return cls(kind="fixed", weights=(text, cine, numeric))

    @classmethod
    def parse(cls, value: str) -> "AllocationStrategy":
        """``self`` or ``fixed:0.5,0.25,0.25``."""
        value = value.strip().lower()
        if value in ("self", "self-attention"):
            return cls.self_reasoning()
        if value.startswith("fixed:"):
            parts = [float(p) for p in value[len("fixed:"):].split(",")]
            if len(parts) != 3:
                raise ValueError(f"fixed allocation needs three weights, got '{value}'")
            return cls.fixed(*parts)
        raise ValueError(f"unknown allocation strategy '{value}'")

    @property
    def strategy_id(self) -> str:
        if self.kind == "self":
            return "self-attention"
        return "fixed-" + "-".join(f"{round(w * 100):d}" for w in self.weights)

    @property
    def label(self) -> str:
        if self.kind == "self":
            return "Self-attention"
        text, cine, numeric = (f"{w * 100:g}%" for w in self.weights)
        return f"Text {text} + Cine {cine} + Num {numeric}"


@dataclass
class PredictionBundle:
    death_probability: float
    cause_of_death: str
    cause_probabilities: Dict[str, float]
    rehospitalization_days: float
    macces: str
    macces_probabilities: Dict[str, float]
    risk_level: str

    def __post_init__(self):
        if not 0.0 <= self.death_probability <= 1.0:
            raise ValueError(f"death probability {self.death_probability} outside [0, 1]")
        if self.rehospitalization_days < 0:
            raise ValueError("rehospitalization days must be nonnegative")
        if self.cause_of_death not in self.cause_probabilities:
            raise ValueError(f"cause '{self.cause_of_death}' not in the label set")
        if self.macces not in self.macces_probabilities:
            raise ValueError(f"MACCES '{self.macces}' not in the label set")
        if self.risk_level not in RISK_LEVELS:
            raise ValueError(f"unknown risk level '{self.risk_level}'")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class HeadOutputs:
    death: Tensor
    cause: Tensor
    days: Tensor
    macces: Tensor


class FusionPredictor(Module):
    """Modality-token attention, a linear fusion layer, two residual blocks and four heads."""

    def __init__(
        self,
        rng: RngStream,
        feature_dim: int = 256,
        cause_labels: Sequence[str] = CAUSE_LABELS,
        macces_labels: Sequence[str] = MACCES_LABELS,
        days_scale: float = 180.0,
    ):
        super().__init__()
        self.feature_dim = feature_dim
        self.cause_labels = tuple(cause_labels)
        self.macces_labels = tuple(macces_labels)
        self.days_scale = days_scale
        self.attention = ProjectionSet(feature_dim, feature_dim, rng, output=False)
        self.fusion = Linear(feature_dim, feature_dim, rng)
        self.residual = [ResidualBlock(feature_dim, rng), ResidualBlock(feature_dim, rng)]
        self.death_head = Linear(feature_dim, 1, rng)
        self.cause_head = Linear(feature_dim, len(self.cause_labels), rng)
        self.days_head = Linear(feature_dim, 1, rng)
        self.macces_head = Linear(feature_dim, len(self.macces_labels), rng)

    def attend(self, text, cine, numeric, available, strategy: AllocationStrategy) -> Tuple[Tensor, np.ndarray]:
        """Pre-fusion context (B, d) and per-modality allocation (B, 3)."""
        text, cine, numeric = as_tensor(text), as_tensor(cine), as_tensor(numeric)
        for name, value in zip(MODALITIES, (text, cine, numeric)):
            if value.ndim != 2 or value.shape[1] != self.feature_dim:
                raise ShapeError(f"{name} features must be (batch, {self.feature_dim}), got {value.shape}")
        available = np.asarray(available, dtype=np.float64).reshape(-1, 3)
        if available.shape[0] != text.shape[0]:
            raise ShapeError(f"availability covers {available.shape[0]} rows, features {text.shape[0]}")
        if (available.sum(axis=1) == 0).any():
            raise ValueError("at least one modality must be available for every patient")

        tokens = stack([text, cine, numeric], axis=1) * available[..., None]
        if strategy.kind == "self":
            q = self.attention.queries(tokens)
            k = self.attention.keys(tokens)
            v = self.attention.values(tokens)
            attended, weights = scaled_dot_attention(q, k, v, mask=available)
            query_weights = available / available.sum(axis=1, keepdims=True)
            context = (attended * query_weights[..., None]).sum(axis=1)
            allocation = (weights.data * query_weights[..., None]).sum(axis=1)
        else:
            allocation = np.asarray(strategy.weights)[None, :] * available
            totals = allocation.sum(axis=1, keepdims=True)
            if (totals == 0).any():
                raise ValueError("fixed allocation gives zero weight to every available modality")
            allocation = allocation / totals
            context = (tokens * allocation[..., None]).sum(axis=1)
        return context, allocation

    def fuse(self, text, cine, numeric, available, strategy: AllocationStrategy) -> Tuple[Tensor, np.ndarray]:
        context, allocation = self.attend(text, cine, numeric, available, strategy)
        fused = self.fusion(context)
        for block in self.residual:
            fused = block(fused)
        return fused, allocation

    def predict(self, fused) -> HeadOutputs:
        fused = as_tensor(fused)
        if fused.ndim == 1:
            fused = fused.reshape(1, -1)
        batch = fused.shape[0]
        return HeadOutputs(
            death=self.death_head(fused).sigmoid().reshape(batch),
            cause=softmax(self.cause_head(fused), axis=-1),
            days=self.days_head(fused).softplus().reshape(batch) * self.days_scale,
            macces=softmax(self.macces_head(fused), axis=-1),
        )

    def forward(self, text, cine, numeric, available, strategy: AllocationStrategy) -> Tuple[HeadOutputs, np.ndarray]:
        fused, allocation = self.fuse(text, cine, numeric, available, strategy)
        return self.predict(fused), allocation

    def fuse_features(self, features: ModalityFeatures, strategy: AllocationStrategy) -> Tuple[Tensor, AllocationReport]:
        fused, allocation = self.fuse(
            features.text[None, :], features.cine[None, :], features.numeric[None, :],
            np.asarray(features.available)[None, :], strategy,
        )
        return fused.reshape(self.feature_dim), AllocationReport.from_weights(allocation[0])

    def to_bundles(self, outputs: HeadOutputs, thresholds: Tuple[float, float] = DEFAULT_THRESHOLDS) -> List[PredictionBundle]:
        validate_thresholds(thresholds)
        death = outputs.death.data
        levels = risk_level_codes(death, thresholds)
        bundles = []
        for i in range(len(death)):
            cause = outputs.cause.data[i]
            macces = outputs.macces.data[i]
            bundles.append(
                PredictionBundle(
                    death_probability=float(death[i]),
                    cause_of_death=self.cause_labels[int(cause.argmax())],
                    cause_probabilities={label: float(p) for label, p in zip(self.cause_labels, cause)},
                    rehospitalization_days=float(outputs.days.data[i]),
                    macces=self.macces_labels[int(macces.argmax())],
                    macces_probabilities={label: float(p) for label, p in zip(self.macces_labels, macces)},
                    risk_level=RISK_LEVELS[levels[i]],
                )
            )
        return bundles


def fuse(predictor: FusionPredictor, features: ModalityFeatures, strategy: AllocationStrategy) -> Tuple[Tensor, AllocationReport]:
    return predictor.fuse_features(features, strategy)


def predict(predictor: FusionPredictor, fused, thresholds: Tuple[float, float] = DEFAULT_THRESHOLDS) -> PredictionBundle:
    return predictor.to_bundles(predictor.predict(fused), thresholds)[0]
