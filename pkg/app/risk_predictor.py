"""Risk levels from death probability, piecewise-linear risk timelines and follow-up advice."""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.tensor import no_grad

if TYPE_CHECKING:
    from app.fusion import AllocationStrategy, FusionPredictor, ModalityFeatures, PredictionBundle

logger = logging.getLogger(__name__)

RISK_LEVELS = ("low", "medium", "high")
DEFAULT_THRESHOLDS = (0.33, 0.66)

# longest follow-up interval per risk level, in days
FOLLOW_UP_CAPS = {"low": 90, "medium": 30, "high": 14}


def validate_thresholds(thresholds: Sequence[float]) -> Tuple[float, float]:
    if len(thresholds) != 2:
        raise ValueError(f"expected two risk thresholds, got {len(thresholds)}")
    low, high = float(thresholds[0]), float(thresholds[1])
    if not 0.0 < low < high < 1.0:
        raise ValueError(f"risk thresholds must satisfy 0 < low < high < 1, got ({low}, {high})")
    return low, high


def risk_level_codes(probabilities, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> np.ndarray:
    """0 low (p <= t_low), 1 medium (p <= t_high), 2 high."""
    low, high = validate_thresholds(thresholds)
    return np.searchsorted(np.array([low, high]), np.asarray(probabilities, dtype=np.float64), side="left")


def risk_stratify(probability: float, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> str:
    if not 0.0 <= probability <= 1.0:
        raise ValueError(f"death probability {probability} outside [0, 1]")
    return RISK_LEVELS[int(risk_level_codes([probability], thresholds)[0])]


@dataclass(frozen=True)
class TimelinePoint:
    time: float
    probability: float
    level: str
    observed: bool


@dataclass
class TimedFeatures:
    time: float
    features: "ModalityFeatures"


@dataclass(frozen=True)
class FollowUpAdvice:
    days: int
    risk_level: str
    recommendation: str


def interpolate_timeline(
    times: Sequence[float],
    probabilities: Sequence[float],
    step: float = 1.0,
    horizon: Optional[float] = None,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> List[TimelinePoint]:
    """Linear interpolation between observations, held constant after the last one."""
    if len(times) == 0:
        raise ValueError("risk timeline needs at least one observation")
    if step <= 0:
        raise ValueError(f"timeline step must be positive, got {step}")
    order = np.argsort(np.asarray(times, dtype=np.float64), kind="stable")
    times = np.asarray(times, dtype=np.float64)[order]
    probabilities = np.asarray(probabilities, dtype=np.float64)[order]
    end = times[-1] if horizon is None else max(float(horizon), times[-1])
    grid = np.union1d(np.arange(times[0], end + step / 2.0, step), times)
    values = np.interp(grid, times, probabilities)
    levels = risk_level_codes(values, thresholds)
    observed = set(times.tolist())
    return [
        TimelinePoint(float(t), float(p), RISK_LEVELS[level], float(t) in observed)
        for t, p, level in zip(grid, values, levels)
    ]


class RiskPredictor:
    """
    Turns fused multimodal predictions into risk levels, risk timelines
    and follow-up recommendations for a patient
    """

    def __init__(self, predictor: "FusionPredictor", strategy: "AllocationStrategy", thresholds: Sequence[float] = DEFAULT_THRESHOLDS):
        self.predictor = predictor
        self.strategy = strategy
        self.thresholds = validate_thresholds(thresholds)
        logger.info(f"Risk predictor initialized - thresholds {self.thresholds}, strategy {strategy.strategy_id}")

    def predict_bundle(self, features: "ModalityFeatures") -> "PredictionBundle":
        with no_grad():
            fused, _ = self.predictor.fuse_features(features, self.strategy)
            return self.predictor.to_bundles(self.predictor.predict(fused), self.thresholds)[0]

    def risk_timeline(self, history: Sequence[TimedFeatures], step: float = 1.0, horizon: Optional[float] = None) -> List[TimelinePoint]:
        """Risk at each observation, interpolated across the windows without data"""
        if not history:
            raise ValueError("risk timeline needs at least one observation")
        probabilities = [self.predict_bundle(entry.features).death_probability for entry in history]
        return interpolate_timeline([entry.time for entry in history], probabilities, step, horizon, self.thresholds)

    def recommend_follow_up(self, bundle: "PredictionBundle") -> FollowUpAdvice:
        """Follow-up interval: the predicted rehospitalization window, capped by risk level"""
        cap = FOLLOW_UP_CAPS[bundle.risk_level]
        days = int(max(1, min(cap, round(bundle.rehospitalization_days))))
        return FollowUpAdvice(days=days, risk_level=bundle.risk_level, recommendation=self._get_recommendation(bundle))

    def _get_recommendation(self, bundle: "PredictionBundle") -> str:
        if bundle.risk_level == "high":
            return "🚨 HIGH RISK: schedule an early review and check medication titration."
        if bundle.risk_level == "medium":
            return "⚡ MEDIUM RISK: monthly follow-up, monitor symptoms and weight."
        return "✅ LOW RISK: routine follow-up."

    def summarize_timeline(self, points: Sequence[TimelinePoint], patient_id: str) -> str:
        """Human readable summary of the risk regions along a timeline"""
        if not points:
            return f"Patient {patient_id}: no observations"
        regions = []
        start = points[0]
        previous = points[0]
        for point in points[1:]:
            if point.level != start.level:
                regions.append((start.time, previous.time, start.level))
                start = point
            previous = point
        regions.append((start.time, previous.time, start.level))

        peak = max(points, key=lambda p: p.probability)
        summary = f"Patient {patient_id}: risk timeline over days {points[0].time:g}-{points[-1].time:g}"
        for begin, end, level in regions:
            summary += f"\n- days {begin:g}-{end:g}: {level.upper()}"
        summary += f"\nPeak death probability {peak.probability * 100:.1f}% at day {peak.time:g}"
        summary += f"\nFinal level: {points[-1].level.upper()}"
        return summary


def risk_timeline(
    history: Sequence[TimedFeatures],
    predictor: "FusionPredictor",
    strategy: "AllocationStrategy",
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    step: float = 1.0,
    horizon: Optional[float] = None,
) -> List[TimelinePoint]:
    return RiskPredictor(predictor, strategy, thresholds).risk_timeline(history, step, horizon)


def timeline_rows(points: Sequence[TimelinePoint]) -> List[Dict]:
    return [{"time": p.time, "probability": p.probability, "level": p.level} for p in points]
