# tests/test_risk_predictor.py
import numpy as np
import pytest

from app.fusion import AllocationStrategy, FusionPredictor, ModalityFeatures, PredictionBundle
from app.risk_predictor import (
    RiskPredictor,
    TimedFeatures,
    TimelinePoint,
    interpolate_timeline,
    risk_stratify,
    risk_timeline,
    timeline_rows,
    validate_thresholds,
)
from app.tensor import RngStream

DIM = 4


def bundle(probability=0.5, days=45.0, level="medium"):
    return PredictionBundle(probability, "none", {"none": 1.0}, days, "none", {"none": 1.0}, level)


@pytest.fixture
def risk_predictor():
    return RiskPredictor(FusionPredictor(RngStream(8), feature_dim=DIM), AllocationStrategy.self_reasoning())


@pytest.fixture
def history(np_rng):
    return [
        TimedFeatures(time, ModalityFeatures(*(np_rng.normal(size=DIM) for _ in range(3))))
        for time in (0.0, 10.0)
    ]


@pytest.mark.unit
class TestRiskStratify:
    """Two-threshold risk levels"""

    @pytest.mark.parametrize(
        "probability,expected",
        [(0.0, "low"), (0.33, "low"), (0.34, "medium"), (0.5, "medium"), (0.66, "medium"), (0.67, "high"), (1.0, "high")],
    )
    def test_default_thresholds(self, probability, expected):
        assert risk_stratify(probability) == expected

    def test_custom_thresholds(self):
        assert risk_stratify(0.5, (0.1, 0.2)) == "high"

    @pytest.mark.parametrize("thresholds", [(0.5, 0.5), (0.7, 0.3), (0.0, 0.5), (0.2,)])
    def test_invalid_thresholds(self, thresholds):
        with pytest.raises(ValueError):
            validate_thresholds(thresholds)

    def test_probability_range(self):
        with pytest.raises(ValueError):
            risk_stratify(1.2)


@pytest.mark.unit
class TestInterpolateTimeline:
    """Piecewise-linear risk between observations"""

    def test_midpoint(self):
        points = interpolate_timeline([0.0, 10.0], [0.2, 0.6])
        by_time = {p.time: p for p in points}
        assert len(points) == 11
        assert by_time[5.0].probability == pytest.approx(0.4)
        assert by_time[5.0].level == "medium"
        assert by_time[0.0].observed and not by_time[5.0].observed

    def test_single_observation_is_constant(self):
        points = interpolate_timeline([3.0], [0.7], horizon=8.0)
        assert [p.probability for p in points] == [0.7] * 6
        assert {p.level for p in points} == {"high"}

    def test_unsorted_history(self):
        points = interpolate_timeline([10.0, 0.0], [0.6, 0.2], step=5.0)
        assert [(p.time, p.probability) for p in points] == [(0.0, 0.2), (5.0, pytest.approx(0.4)), (10.0, 0.6)]

    def test_off_grid_observation_kept(self):
        times = [p.time for p in interpolate_timeline([0.0, 2.5], [0.1, 0.2])]
        assert times == [0.0, 1.0, 2.0, 2.5]

    def test_empty_or_bad_step(self):
        with pytest.raises(ValueError):
            interpolate_timeline([], [])
        with pytest.raises(ValueError):
            interpolate_timeline([0.0], [0.5], step=0.0)

    def test_rows(self):
        rows = timeline_rows([TimelinePoint(1.0, 0.5, "medium", True)])
        assert rows == [{"time": 1.0, "probability": 0.5, "level": "medium"}]


@pytest.mark.unit
class TestRiskPredictor:
    """Timelines, follow-up advice and summaries from a fusion predictor"""

    def test_timeline_hits_observations(self, risk_predictor, history):
        points = risk_predictor.risk_timeline(history)
        observed = [p for p in points if p.observed]
        expected = [risk_predictor.predict_bundle(entry.features).death_probability for entry in history]
        assert [p.probability for p in observed] == pytest.approx(expected)
        assert points[5].probability == pytest.approx(sum(expected) / 2)

    def test_timeline_is_deterministic(self, risk_predictor, history):
        assert risk_predictor.risk_timeline(history) == risk_predictor.risk_timeline(history)
        functional = risk_timeline(history, risk_predictor.predictor, risk_predictor.strategy)
        assert functional == risk_predictor.risk_timeline(history)

    def test_empty_history(self, risk_predictor):
        with pytest.raises(ValueError):
            risk_predictor.risk_timeline([])

    @pytest.mark.parametrize(
        "days,level,expected",
        [(45.0, "low", 45), (45.0, "medium", 30), (45.0, "high", 14), (0.2, "low", 1), (120.0, "low", 90)],
    )
    def test_follow_up_interval(self, risk_predictor, days, level, expected):
        advice = risk_predictor.recommend_follow_up(bundle(days=days, level=level))
        assert advice.days == expected
        assert advice.risk_level == level

    def test_recommendation_text(self, risk_predictor):
        assert "HIGH RISK" in risk_predictor.recommend_follow_up(bundle(0.9, level="high")).recommendation
        assert "routine" in risk_predictor.recommend_follow_up(bundle(0.1, level="low")).recommendation

    def test_summary_regions(self, risk_predictor):
        points = interpolate_timeline([0.0, 10.0], [0.1, 0.9])
        summary = risk_predictor.summarize_timeline(points, "P0007")
        assert summary.startswith("Patient P0007: risk timeline over days 0-10")
        assert "LOW" in summary and "MEDIUM" in summary and "HIGH" in summary
        assert "Peak death probability 90.0% at day 10" in summary
        assert summary.endswith("Final level: HIGH")

    def test_summary_without_points(self, risk_predictor):
        assert risk_predictor.summarize_timeline([], "P1") == "Patient P1: no observations"
