"""Deterministic synthetic heart-failure cohort with planted per-modality signal.

Every patient carries a latent risk

    latent = bias + beta_text * z_text + beta_cine * z_cine + beta_num * z_num

where z_text is expressed through the prescription trajectory, z_cine through
the size of a fibrosis blob on a cine phantom and z_num through four clinical
indicators. Outcome labels are drawn from the latent, so the accuracy an
oracle can reach from any subset of modalities is known in closed form up to
numerical integration (``bayes_oracle``).
"""

import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.polynomial.hermite_e import hermegauss
from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, NonNegativeInt, PositiveInt, model_validator
from scipy.optimize import least_squares
from scipy.special import expit
from scipy.stats import norm, qmc, truncnorm

from app.cine_segmenter import FIBROSIS, MYOCARDIUM, CineVolume, SegMask
from app.errors import UnknownPatientError
from app.fusion import CAUSE_LABELS, MACCES_LABELS
from app.numeric_encoder import BASELINE_INDICATORS, Indicator, NumericRecord, noise_indicator
from app.risk_predictor import DEFAULT_THRESHOLDS, RISK_LEVELS, risk_level_codes, risk_stratify, validate_thresholds
from app.tensor import RngStream
from app.text_encoder import patient_text

logger = logging.getLogger(__name__)

STAGES: Tuple[Tuple[str, float], ...] = (
    ("admission", 0.0),
    ("discharge", 14.0),
    ("month 3", 90.0),
    ("month 6", 180.0),
)

# indicators whose quantiles carry the numeric latent; Apo-AI enters with a negative sign
NUMERIC_SIGNAL = (("Age", 1.0), ("IVSTd", 1.0), ("HbA1c%", 1.0), ("Apo-AI", -1.0))

BASE_DOSES = {
    "beta-blocker": 12.5,
    "sglt2-inhibitor": 10.0,
    "ace-inhibitor": 5.0,
    "arb": 50.0,
    "arni": 50.0,
    "loop-diuretic": 20.0,
    "mra": 25.0,
}

NOTES = (
    "with food",
    "in the morning",
    "review at clinic",
    "continue diet advice",
    "monitor weight daily",
    "check blood pressure",
)

# substream keys
_COHORT, _PATIENT = 0, 1
_NUMERIC, _MISSING, _CINE_SUBSET = 0, 1, 2
_LATENT, _TEXT, _CINE, _LABELS = 0, 1, 2, 3

MODALITY_COEFFICIENTS = {"text": "beta_text", "cine": "beta_cine", "numeric": "beta_num"}


def _default_cause_priors() -> Dict[str, Tuple[float, ...]]:
    return {"low": (0.5, 0.2, 0.3), "medium": (0.55, 0.25, 0.2), "high": (0.6, 0.3, 0.1)}


def _default_macces_priors() -> Dict[str, Tuple[float, ...]]:
    return {
        "low": (0.8, 0.05, 0.05, 0.07, 0.03),
        "medium": (0.55, 0.1, 0.1, 0.15, 0.1),
        "high": (0.3, 0.15, 0.15, 0.15, 0.25),
    }


class CohortSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_clinical: PositiveInt = 688
    n_cine: NonNegativeInt = 136
    seed: NonNegativeInt = 7
    beta_text: NonNegativeFloat = 3.0
    beta_cine: NonNegativeFloat = 2.0
    beta_num: NonNegativeFloat = 1.5
    bias: float = -0.5
    missing_rate: float = Field(0.05, ge=0.0, lt=1.0)
    noise_indicators: NonNegativeInt = 1
    cine_shape: Tuple[PositiveInt, PositiveInt, PositiveInt] = (64, 64, 8)
    cine_noise: NonNegativeFloat = 0.05
    text_levels: int = Field(16, ge=2)
    days_intercept: float = 120.0
    days_slope: float = 30.0
    days_noise: NonNegativeFloat = 10.0
    days_max: float = Field(365.0, gt=0.0)
    risk_thresholds: Tuple[float, float] = DEFAULT_THRESHOLDS
    cause_labels: Tuple[str, ...] = CAUSE_LABELS
    macces_labels: Tuple[str, ...] = MACCES_LABELS
    cause_priors: Dict[str, Tuple[float, ...]] = Field(default_factory=_default_cause_priors)
    macces_priors: Dict[str, Tuple[float, ...]] = Field(default_factory=_default_macces_priors)

    @model_validator(mode="after")
    def _check(self) -> "CohortSpec":
        if self.n_cine > self.n_clinical:
            raise ValueError(f"n_cine ({self.n_cine}) cannot exceed n_clinical ({self.n_clinical})")
        validate_thresholds(self.risk_thresholds)
        for name, priors, width in (
            ("cause", self.cause_priors, len(self.cause_labels) - 1),
            ("macces", self.macces_priors, len(self.macces_labels)),
        ):
            if set(priors) != set(RISK_LEVELS):
                raise ValueError(f"{name} priors need one row per risk level {RISK_LEVELS}")
            for level, row in priors.items():
                if len(row) != width or min(row) < 0 or abs(sum(row) - 1.0) > 1e-9:
                    raise ValueError(f"{name} prior for '{level}' must be {width} probabilities summing to 1")
        return self

    @property
    def coefficients(self) -> Dict[str, float]:
        return {"bias": self.bias, "beta_text": self.beta_text, "beta_cine": self.beta_cine, "beta_num": self.beta_num}


@dataclass
class Outcomes:
    death: int
    cause: str
    days: float
    macces: str
    risk: str


@dataclass
class SyntheticPatient:
    patient_id: str
    numeric: NumericRecord
    stages: Tuple[Tuple[str, str], ...]
    outcomes: Outcomes
    cine: Optional[CineVolume] = None
    mask: Optional[SegMask] = None

    @property
    def has_cine(self) -> bool:
        return self.cine is not None

    @property
    def text(self) -> str:
        return patient_text(self.stages)


@dataclass
class GroundTruthPlan:
    coefficients: Dict[str, float]
    z_text: np.ndarray
    z_cine: np.ndarray
    z_num: np.ndarray
    latent: np.ndarray
    text_level: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, GroundTruthPlan) or self.coefficients != other.coefficients:
            return False
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("z_text", "z_cine", "z_num", "latent", "text_level")
        )

    def to_dict(self) -> Dict:
        return {
            "coefficients": dict(self.coefficients),
            "z_text": self.z_text.tolist(),
            "z_cine": self.z_cine.tolist(),
            "z_num": self.z_num.tolist(),
            "latent": self.latent.tolist(),
            "text_level": self.text_level.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "GroundTruthPlan":
        return cls(
            coefficients={k: float(v) for k, v in data["coefficients"].items()},
            z_text=np.asarray(data["z_text"], dtype=np.float64),
            z_cine=np.asarray(data["z_cine"], dtype=np.float64),
            z_num=np.asarray(data["z_num"], dtype=np.float64),
            latent=np.asarray(data["latent"], dtype=np.float64),
            text_level=np.asarray(data["text_level"], dtype=np.int64),
        )


@dataclass
class Cohort:
    spec: CohortSpec
    indicators: Tuple[Indicator, ...]
    patients: List[SyntheticPatient]
    plan: GroundTruthPlan
    _index: Dict[str, int] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self._index = {p.patient_id: i for i, p in enumerate(self.patients)}

    @property
    def indicator_names(self) -> Tuple[str, ...]:
        return tuple(ind.name for ind in self.indicators)

    @property
    def cine_patients(self) -> List[SyntheticPatient]:
        return [p for p in self.patients if p.has_cine]

    def patient(self, patient_id: str) -> SyntheticPatient:
        if patient_id not in self._index:
            raise UnknownPatientError(f"unknown patient '{patient_id}'")
        return self.patients[self._index[patient_id]]

    def __len__(self) -> int:
        return len(self.patients)


def patient_ids(n: int) -> List[str]:
    width = max(3, len(str(n)))
    return [f"P{i + 1:0{width}d}" for i in range(n)]


def cohort_indicators(spec: CohortSpec) -> Tuple[Indicator, ...]:
    return BASELINE_INDICATORS + tuple(noise_indicator(i + 1) for i in range(spec.noise_indicators))


def _patient_stream(spec: CohortSpec, index: int, purpose: int) -> RngStream:
    return RngStream(spec.seed, _PATIENT, index, purpose)


def _cohort_stream(spec: CohortSpec, purpose: int) -> RngStream:
    return RngStream(spec.seed, _COHORT, purpose)


# marginal calibration


@dataclass(frozen=True)
class TruncatedMarginal:
    """Normal or log-normal parent distribution truncated to [low, high]."""

    family: str
    loc: float
    scale: float
    low: float
    high: float

    def _bounds(self) -> Tuple[float, float]:
        transform = math.log if self.family == "lognormal" else (lambda v: v)
        return (transform(self.low) - self.loc) / self.scale, (transform(self.high) - self.loc) / self.scale

    def ppf(self, u) -> np.ndarray:
        a, b = self._bounds()
        values = truncnorm.ppf(u, a, b, loc=self.loc, scale=self.scale)
        if self.family == "lognormal":
            values = np.exp(values)
        return np.clip(values, self.low, self.high)

    def moments(self) -> Tuple[float, float]:
        a, b = self._bounds()
        if self.family == "normal":
            mean, var = truncnorm.stats(a, b, loc=self.loc, scale=self.scale, moments="mv")
            return float(mean), float(math.sqrt(max(float(var), 0.0)))
        s = self.scale
        mass = norm.cdf(b) - norm.cdf(a)
        first = math.exp(self.loc + s * s / 2.0) * (norm.cdf(b - s) - norm.cdf(a - s)) / mass
        second = math.exp(2.0 * self.loc + 2.0 * s * s) * (norm.cdf(b - 2.0 * s) - norm.cdf(a - 2.0 * s)) / mass
        return float(first), float(math.sqrt(max(second - first * first, 0.0)))


@functools.lru_cache(maxsize=None)
def calibrate_marginal(indicator: Indicator) -> TruncatedMarginal:
    """Solve the parent parameters so the truncated mean and std match the published ones."""
    if indicator.family == "lognormal":
        s0 = math.sqrt(math.log(1.0 + (indicator.std / indicator.mean) ** 2))
        loc0 = math.log(indicator.mean) - s0 * s0 / 2.0
    else:
        loc0, s0 = indicator.mean, indicator.std

    def residual(params):
        marginal = TruncatedMarginal(indicator.family, params[0], math.exp(params[1]), indicator.low, indicator.high)
        mean, std = marginal.moments()
        return [(mean - indicator.mean) / indicator.std, (std - indicator.std) / indicator.std]

    result = least_squares(residual, x0=[loc0, math.log(s0)], xtol=1e-12, ftol=1e-12, gtol=1e-12)
    marginal = TruncatedMarginal(indicator.family, float(result.x[0]), float(math.exp(result.x[1])), indicator.low, indicator.high)
    gap = float(np.max(np.abs(result.fun)))
    if gap > 1e-3:
        logger.warning(f"Marginal for {indicator.name} only calibrated to {gap:.2e} std units")
    return marginal


# generation


def generate_numeric(spec: CohortSpec) -> Tuple[List[NumericRecord], np.ndarray]:
    """Latin-hypercube draws through calibrated truncated marginals; returns records and z_num."""
    indicators = cohort_indicators(spec)
    n = spec.n_clinical
    sampler = qmc.LatinHypercube(d=len(indicators), seed=_cohort_stream(spec, _NUMERIC).generator)
    uniforms = np.clip(sampler.random(n), 1e-12, 1.0 - 1e-12)
    missing = _cohort_stream(spec, _MISSING).random((n, len(indicators))) < spec.missing_rate

    columns = {}
    for j, indicator in enumerate(indicators):
        u = uniforms[:, j]
        if indicator.binary:
            values = (u < indicator.mean).astype(np.float64)
        elif indicator.family == "uniform":
            values = np.round(u, 3)
        else:
            values = np.clip(np.round(calibrate_marginal(indicator).ppf(u), 3), indicator.low, indicator.high)
        columns[indicator.name] = values

    position = {ind.name: j for j, ind in enumerate(indicators)}
    z_num = sum(sign * norm.ppf(uniforms[:, position[name]]) for name, sign in NUMERIC_SIGNAL) / 2.0

    records = []
    for i, pid in enumerate(patient_ids(n)):
        values = {
            ind.name: (None if missing[i, j] else float(columns[ind.name][i])) for j, ind in enumerate(indicators)
        }
        records.append(NumericRecord(pid, values))
    return records, np.asarray(z_num, dtype=np.float64)


def draw_latent(spec: CohortSpec, z_num: np.ndarray) -> GroundTruthPlan:
    n = spec.n_clinical
    z_text = np.empty(n)
    z_cine = np.empty(n)
    for i in range(n):
        rng = _patient_stream(spec, i, _LATENT)
        z_text[i], z_cine[i] = rng.normal(size=2)
    latent = spec.bias + spec.beta_text * z_text + spec.beta_cine * z_cine + spec.beta_num * z_num
    text_level = np.minimum((norm.cdf(z_text) * spec.text_levels).astype(np.int64), spec.text_levels - 1)
    return GroundTruthPlan(spec.coefficients, z_text, z_cine, np.asarray(z_num, dtype=np.float64), latent, text_level)


def _regimen(severity: float, stage: int) -> List[str]:
    drugs = ["beta-blocker"]
    if severity >= 0.25:
        drugs.append("sglt2-inhibitor")
    drugs.append("arni" if severity >= 0.5 else "ace-inhibitor")
    if severity >= 0.6 and stage >= 1:
        drugs.append("loop-diuretic")
    if severity >= 0.85 and stage >= 2:
        drugs.append("mra")
    return drugs


def generate_text(spec: CohortSpec, z_text: float, rng: RngStream) -> Tuple[Tuple[str, str], ...]:
    """One prescription sentence per treatment stage; regimen and titration follow the text level."""
    level = min(int(norm.cdf(z_text) * spec.text_levels), spec.text_levels - 1)
    severity = level / (spec.text_levels - 1)
    stages = []
    for k, (label, _) in enumerate(STAGES):
        parts = []
        for drug in _regimen(severity, k):
            if drug == "ace-inhibitor" and rng.random() < 0.2:
                drug = "arb"
            dose = BASE_DOSES[drug] * 2 ** round(severity * k)
            parts.append(f"{drug} {dose:g}mg")
        parts.append(NOTES[int(rng.integers(len(NOTES)))])
        stages.append((label, ", ".join(parts)))
    return tuple(stages)


def generate_cine(spec: CohortSpec, z_cine: float, rng: RngStream) -> Tuple[CineVolume, SegMask]:
    """Annulus myocardium phantom with a fibrosis blob whose radius grows with z_cine."""
    height, width, depth = spec.cine_shape
    scale = min(height, width) / 64.0
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy = height / 2.0 + rng.uniform(-2.0, 2.0) * scale
    cx = width / 2.0 + rng.uniform(-2.0, 2.0) * scale
    angle = rng.uniform(0.0, 2.0 * math.pi)
    blob_radius = (2.0 + 5.0 * norm.cdf(z_cine)) * scale
    distance = np.hypot(yy - cy, xx - cx)

    voxels = np.empty((height, width, depth))
    labels = np.zeros((height, width, depth), dtype=np.uint8)
    for d in range(depth):
        phase = 1.0 + 0.06 * math.sin(2.0 * math.pi * d / depth)
        inner, outer = 12.0 * scale * phase, 20.0 * scale * phase
        myocardium = (distance >= inner) & (distance <= outer)
        middle = (inner + outer) / 2.0
        blob = np.hypot(yy - (cy + middle * math.sin(angle)), xx - (cx + middle * math.cos(angle))) <= blob_radius
        fibrosis = myocardium & blob

        frame = np.full((height, width), 0.15)
        frame[distance < inner] = 0.75
        frame[myocardium] = 0.35
        frame[fibrosis] = 0.95
        voxels[..., d] = frame + rng.normal(0.0, spec.cine_noise, (height, width))
        labels[myocardium, d] = MYOCARDIUM
        labels[fibrosis, d] = FIBROSIS

    voxels = np.clip(voxels, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return CineVolume(voxels), SegMask(labels)


def generate_labels(spec: CohortSpec, latent: float, rng: RngStream) -> Outcomes:
    probability = float(expit(latent))
    death = int(rng.random() < probability)
    risk = risk_stratify(probability, spec.risk_thresholds)
    cause = "none"
    if death:
        cause = spec.cause_labels[1 + int(rng.choice(len(spec.cause_labels) - 1, p=spec.cause_priors[risk]))]
    macces = spec.macces_labels[int(rng.choice(len(spec.macces_labels), p=spec.macces_priors[risk]))]
    days = spec.days_intercept - spec.days_slope * latent + rng.normal(0.0, spec.days_noise)
    days = round(float(np.clip(days, 0.0, spec.days_max)), 1)
    return Outcomes(death=death, cause=cause, days=days, macces=macces, risk=risk)


def generate_cohort(spec: CohortSpec) -> Cohort:
    logger.info(f"Generating cohort: {spec.n_clinical} clinical, {spec.n_cine} cine, seed {spec.seed}")
    records, z_num = generate_numeric(spec)
    plan = draw_latent(spec, z_num)
    cine_subset = set(
        _cohort_stream(spec, _CINE_SUBSET).choice(spec.n_clinical, size=spec.n_cine, replace=False).tolist()
    )
    patients = []
    for i, record in enumerate(records):
        stages = generate_text(spec, plan.z_text[i], _patient_stream(spec, i, _TEXT))
        cine, mask = None, None
        if i in cine_subset:
            cine, mask = generate_cine(spec, plan.z_cine[i], _patient_stream(spec, i, _CINE))
        outcomes = generate_labels(spec, plan.latent[i], _patient_stream(spec, i, _LABELS))
        patients.append(SyntheticPatient(record.patient_id, record, stages, outcomes, cine, mask))
    deaths = sum(p.outcomes.death for p in patients)
    logger.info(f"✅ Cohort generated: {len(patients)} patients, {deaths} deaths")
    return Cohort(spec, cohort_indicators(spec), patients, plan)


# oracle and calibration report


@dataclass
class OracleReport:
    observed: Tuple[str, ...]
    death: float
    cause: float
    macces: float
    risk: float

    @property
    def integrated(self) -> float:
        return (self.death + self.macces + self.risk) / 3.0


def bayes_oracle(spec: CohortSpec, observed: Sequence[str] = ("text", "cine", "numeric"), nodes: int = 64) -> OracleReport:
    """Bayes-optimal accuracy (percent) per head when the latent parts of ``observed`` are known.

    The observed part of the latent and the hidden remainder are both Gaussian,
    so each expectation is a Gauss-Hermite sum over the observed part with an
    inner sum over the hidden part.
    """
    unknown = set(observed) - set(MODALITY_COEFFICIENTS)
    if unknown:
        raise ValueError(f"unknown modalities {sorted(unknown)}")
    coefficients = spec.coefficients
    observed_sd = math.sqrt(sum(coefficients[MODALITY_COEFFICIENTS[m]] ** 2 for m in set(observed)))
    hidden_sd = math.sqrt(
        sum(coefficients[c] ** 2 for m, c in MODALITY_COEFFICIENTS.items() if m not in set(observed))
    )
    x, w = hermegauss(nodes)
    w = w / math.sqrt(2.0 * math.pi)

    latent = (spec.bias + observed_sd * x)[:, None] + (hidden_sd * x)[None, :]
    p = expit(latent)
    levels = risk_level_codes(p, spec.risk_thresholds)
    level_mass = np.stack([(w * (levels == k)).sum(axis=1) for k in range(len(RISK_LEVELS))], axis=1)
    death_level_mass = np.stack([(w * p * (levels == k)).sum(axis=1) for k in range(len(RISK_LEVELS))], axis=1)
    death = (w * p).sum(axis=1)

    cause_prior = np.array([spec.cause_priors[level] for level in RISK_LEVELS])
    macces_prior = np.array([spec.macces_priors[level] for level in RISK_LEVELS])
    cause = np.column_stack([1.0 - death, death_level_mass @ cause_prior])
    macces = level_mass @ macces_prior

    def expected_max(mass: np.ndarray) -> float:
        return float(100.0 * (w * mass.max(axis=1)).sum())

    return OracleReport(
        observed=tuple(observed),
        death=expected_max(np.column_stack([death, 1.0 - death])),
        cause=expected_max(cause),
        macces=expected_max(macces),
        risk=expected_max(level_mass),
    )


def cohort_oracle(spec: CohortSpec, observed: Sequence[str] = ("text", "cine", "numeric"), nodes: int = 64) -> OracleReport:
    """Oracle accuracy over the cohort as generated: only the cine subset shows its cine signal."""
    observed = tuple(observed)
    if "cine" not in observed:
        return bayes_oracle(spec, observed, nodes)
    share = spec.n_cine / spec.n_clinical
    with_cine = bayes_oracle(spec, observed, nodes)
    without_cine = bayes_oracle(spec, tuple(m for m in observed if m != "cine"), nodes)
    mixed = {
        head: share * getattr(with_cine, head) + (1.0 - share) * getattr(without_cine, head)
        for head in ("death", "cause", "macces", "risk")
    }
    return OracleReport(observed=observed, **mixed)


def calibration_summary(cohort: Cohort) -> pd.DataFrame:
    """Generated moments next to the published ones, one row per indicator."""
    frame = pd.DataFrame([p.numeric.values for p in cohort.patients], columns=list(cohort.indicator_names), dtype=float)
    rows = []
    for indicator in cohort.indicators:
        column = frame[indicator.name].dropna()
        mean, std = float(column.mean()), float(column.std())
        rows.append(
            {
                "indicator": indicator.name,
                "target_mean": indicator.mean,
                "sample_mean": round(mean, 4),
                "mean_rel_err": round(abs(mean - indicator.mean) / abs(indicator.mean), 4),
                "target_std": indicator.std,
                "sample_std": round(std, 4),
                "std_rel_err": round(abs(std - indicator.std) / indicator.std, 4),
            }
        )
    return pd.DataFrame(rows)
