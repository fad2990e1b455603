"""Clinical indicator preprocessing and the two-layer numeric feature network."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.errors import SchemaError, ShapeError
from app.layers import Dropout, Linear, Module
from app.tensor import RngStream, Tensor, as_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Indicator:
    """Published baseline statistics of one clinical indicator."""

    name: str
    mean: float
    std: float
    low: float
    high: float
    binary: bool = False
    family: str = "normal"
    group: str = "medical"


# Baseline characteristics of the 688-patient clinical cohort.
BASELINE_INDICATORS: Tuple[Indicator, ...] = (
    Indicator("Gender", 0.801471, 0.400367, 0.0, 1.0, binary=True, group="demographic"),
    Indicator("Age", 52.36765, 14.39126, 18.0, 79.0, group="demographic"),
    Indicator("Weight", 73.00625, 16.87795, 42.0, 121.2, group="demographic"),
    Indicator("Heart Rate (bpm)", 85.60294, 19.33152, 43.0, 153.0, group="demographic"),
    Indicator("Diastolic BP", 85.24265, 18.89013, 39.0, 144.0, group="demographic"),
    Indicator("Myocardial Infarction", 0.117647, 0.323381, 0.0, 1.0, binary=True, group="demographic"),
    Indicator("Pacemaker", 0.044118, 0.206116, 0.0, 1.0, binary=True, group="demographic"),
    Indicator("IVSTd", 0.939134, 0.225375, 0.5, 1.87),
    Indicator("ALT", 38.26544, 42.40809, 5.3, 340.8, family="lognormal"),
    Indicator("AST", 30.63382, 26.28811, 10.8, 235.0, family="lognormal"),
    Indicator("Albumin/Globulin Ratio", 1.628088, 0.291198, 0.76, 2.32),
    Indicator("LDL-C", 2.507852, 0.910413, 0.46, 5.07),
    Indicator("Apo-AI", 0.906593, 0.204342, 0.46, 1.63),
    Indicator("HbA1c%", 6.245528, 1.163675, 4.3, 11.3),
)

INDICATORS_BY_NAME: Dict[str, Indicator] = {ind.name: ind for ind in BASELINE_INDICATORS}
BINARY_INDICATORS = frozenset(ind.name for ind in BASELINE_INDICATORS if ind.binary)


def noise_indicator(index: int) -> Indicator:
    """Uniform [0, 1] control column carrying no outcome signal."""
    return Indicator(f"Control Noise {index}", 0.5, math.sqrt(1.0 / 12.0), 0.0, 1.0, family="uniform", group="noise")


@dataclass
class NumericRecord:
    patient_id: str
    values: Dict[str, Optional[float]] = field(default_factory=dict)

    def __post_init__(self):
        cleaned: Dict[str, Optional[float]] = {}
        for name, value in self.values.items():
            if value is None or (isinstance(value, float) and math.isnan(value)):
                cleaned[name] = None
                continue
            value = float(value)
            if not math.isfinite(value):
                raise ValueError(f"patient {self.patient_id}: indicator '{name}' is not finite")
            if name in BINARY_INDICATORS and value not in (0.0, 1.0):
                raise ValueError(f"patient {self.patient_id}: flag '{name}' must be 0 or 1, got {value}")
            cleaned[name] = value
        self.values = cleaned


@dataclass(frozen=True)
class NumericSchema:
    indicators: Tuple[str, ...]
    median: Dict[str, float]
    minimum: Dict[str, float]
    maximum: Dict[str, float]

    @property
    def width(self) -> int:
        return len(self.indicators)

    def to_dict(self) -> Dict:
        return {
            "indicators": list(self.indicators),
            "median": dict(self.median),
            "minimum": dict(self.minimum),
            "maximum": dict(self.maximum),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "NumericSchema":
        return cls(
            indicators=tuple(data["indicators"]),
            median={k: float(v) for k, v in data["median"].items()},
            minimum={k: float(v) for k, v in data["minimum"].items()},
            maximum={k: float(v) for k, v in data["maximum"].items()},
        )


def records_to_frame(records: Sequence[NumericRecord], indicators: Sequence[str]) -> pd.DataFrame:
    rows = [[record.values.get(name) for name in indicators] for record in records]
    return pd.DataFrame(rows, columns=list(indicators), dtype=float)


def fit_schema(records: Sequence[NumericRecord], indicators: Optional[Sequence[str]] = None) -> NumericSchema:
    """Median, minimum and maximum of every indicator over the training records."""
    if not records:
        raise SchemaError("cannot fit a numeric schema without training records")
    indicators = tuple(indicators or records[0].values.keys())
    frame = records_to_frame(records, indicators)
    for name in indicators:
        if frame[name].notna().sum() == 0:
            raise SchemaError(f"indicator '{name}' has no values in the training split")
    medians, minima, maxima = frame.median(), frame.min(), frame.max()
    return NumericSchema(
        indicators=indicators,
        median={name: float(medians[name]) for name in indicators},
        minimum={name: float(minima[name]) for name in indicators},
        maximum={name: float(maxima[name]) for name in indicators},
    )


def transform(records: Sequence[NumericRecord], schema: NumericSchema) -> np.ndarray:
    """Impute with training medians, min-max scale and clamp to [0, 1]; shape (n, F)."""
    frame = records_to_frame(records, schema.indicators)
    frame = frame.fillna(pd.Series(schema.median))
    low = np.array([schema.minimum[name] for name in schema.indicators])
    high = np.array([schema.maximum[name] for name in schema.indicators])
    values = frame.to_numpy(dtype=np.float64)
    span = high - low
    varying = span > 0
    out = np.zeros_like(values)
    out[:, varying] = np.clip((values[:, varying] - low[varying]) / span[varying], 0.0, 1.0)
    return out


def impute_and_normalize(record: NumericRecord, schema: NumericSchema) -> np.ndarray:
    return transform([record], schema)[0]


def undersample_indices(labels, rng: RngStream, classes: Optional[Sequence] = None) -> np.ndarray:
    """Sorted indices keeping an equal, minority-sized share of every class."""
    labels = np.asarray(labels)
    present, counts = np.unique(labels, return_counts=True)
    if classes is not None:
        empty = [c for c in classes if c not in set(present.tolist())]
        if empty:
            raise ValueError(f"cannot undersample: class {empty[0]} has no samples")
        present = np.asarray(classes)
        counts = np.array([(labels == c).sum() for c in classes])
    if len(present) == 0:
        raise ValueError("cannot undersample an empty set")
    minority = int(counts.min())
    kept = [rng.choice(np.flatnonzero(labels == cls), size=minority, replace=False) for cls in present]
    return np.sort(np.concatenate(kept))


def undersample(records: Sequence, labels, rng: RngStream, classes: Optional[Sequence] = None) -> Tuple[List, np.ndarray]:
    labels = np.asarray(labels)
    if len(records) != len(labels):
        raise ShapeError(f"{len(records)} records but {len(labels)} labels")
    kept = undersample_indices(labels, rng, classes)
    return [records[i] for i in kept], labels[kept]


class NumericEncoder(Module):
    """Linear(F, 512) -> ReLU -> Dropout(0.2) -> Linear(512, 256)."""

    def __init__(self, n_features: int, rng: RngStream, hidden: int = 512, out_features: int = 256, dropout: float = 0.2):
        super().__init__()
        self.n_features = n_features
        self.hidden = Linear(n_features, hidden, rng)
        self.dropout = Dropout(dropout, rng.substream(1))
        self.output = Linear(hidden, out_features, rng)

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.n_features:
            raise ShapeError(f"numeric encoder expects {self.n_features} indicators, got {x.shape[-1]}")
        return self.output(self.dropout(self.hidden(x).relu()))


def encode_numeric(encoder: NumericEncoder, x) -> Tensor:
    return encoder(x)
