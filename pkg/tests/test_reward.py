from __future__ import annotations

import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from coachflow.reward import (
    BaselineValence,
    DurationStats,
    RewardConfig,
    calibrate_baseline,
    compute_reward,
    normalized_speech_duration,
    turn_reward,
    valence_deviation,
)

finite = st.floats(allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6)


class TestBaseline:
    def test_zero_mean(self):
        assert calibrate_baseline([0.0, 0.0]).value == 0.0

    def test_arithmetic_mean(self):
        assert calibrate_baseline([0.2, 0.4]).value == pytest.approx(0.3)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            calibrate_baseline([])

    def test_out_of_range_sample_rejected(self):
        with pytest.raises(ValueError):
            calibrate_baseline([1.5])


class TestValenceDeviation:
    def test_no_deviation(self):
        baseline = calibrate_baseline([0.25, 0.25])
        assert valence_deviation([0.25, 0.25], baseline, scale_fv=10.0) == 0.0

    def test_hand_arithmetic_positive(self):
        # mean 0.3, baseline 0.1, scale 10 -> 2.0
        baseline = BaselineValence(value=0.1, sample_count=4)
        assert valence_deviation([0.3, 0.3], baseline, 10.0) == pytest.approx(2.0)

    def test_hand_arithmetic_negative(self):
        baseline = BaselineValence(value=0.1, sample_count=4)
        assert valence_deviation([-0.2], baseline, 10.0) == pytest.approx(-3.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            valence_deviation([], BaselineValence(0.0, 1), 10.0)

    @given(st.lists(st.floats(min_value=-0.5, max_value=0.5), min_size=1, max_size=20),
           st.floats(min_value=-0.4, max_value=0.4))
    def test_baseline_shift_invariance(self, samples, shift):
        baseline = calibrate_baseline(samples)
        shifted_baseline = calibrate_baseline([s + shift for s in samples])
        turn = [s * 0.5 for s in samples]
        shifted_turn = [t + shift for t in turn]
        fv = valence_deviation(turn, baseline, 10.0)
        fv_shifted = valence_deviation(shifted_turn, shifted_baseline, 10.0)
        assert fv == pytest.approx(fv_shifted, abs=1e-12)


class TestSpeechDuration:
    STATS = DurationStats(mean_s=20.0, std_s=10.0)

    def test_mean_duration_is_zero(self):
        assert normalized_speech_duration(20.0, self.STATS, 5.0, 15.0) == 0.0

    def test_hand_arithmetic(self):
        # z = (30-20)/10 = 1; scaled by 5 -> 5.0
        assert normalized_speech_duration(30.0, self.STATS, 5.0, 15.0) == pytest.approx(5.0)

    def test_clipping(self):
        # z = 18, scaled 90, clipped at 15
        assert normalized_speech_duration(200.0, self.STATS, 5.0, 15.0) == 15.0

    def test_negative_duration_rejected(self):
        with pytest.raises(ValueError):
            normalized_speech_duration(-0.1, self.STATS, 5.0, 15.0)

    def test_monotone_below_clip(self):
        values = [normalized_speech_duration(d, self.STATS, 5.0, 15.0) for d in (5, 10, 20, 40)]
        assert values == sorted(values)
        assert len(set(values)) == len(values)


class TestComputeReward:
    def test_zero_case(self):
        assert compute_reward(0.0, 0.0).total == 0.0

    def test_sum(self):
        rc = compute_reward(2.0, -3.0)
        assert rc.total == -1.0
        assert rc.fv == 2.0 and rc.sd == -3.0

    @given(finite, finite)
    def test_additivity_exact(self, fv, sd):
        assert compute_reward(fv, sd).total == fv + sd

    @pytest.mark.parametrize("fv,sd", [(float("nan"), 0.0), (0.0, float("inf")),
                                       (float("-inf"), 1.0)])
    def test_non_finite_rejected(self, fv, sd):
        with pytest.raises(ValueError):
            compute_reward(fv, sd)


class TestTurnReward:
    def test_monotone_in_valence(self):
        baseline = BaselineValence(0.0, 5)
        stats = DurationStats(20.0, 10.0)
        cfg = RewardConfig()
        totals = [
            turn_reward([v], 25.0, baseline, stats, cfg).total
            for v in (-0.5, -0.1, 0.0, 0.2, 0.6)
        ]
        assert totals == sorted(totals)
        assert len(set(totals)) == len(totals)

    def test_components_recorded(self):
        baseline = BaselineValence(0.1, 5)
        stats = DurationStats(20.0, 10.0)
        cfg = RewardConfig(scale_fv=10.0, scale_sd=5.0, clip_sd=15.0)
        rc = turn_reward([0.3], 30.0, baseline, stats, cfg)
        assert rc.fv == pytest.approx(2.0)
        assert rc.sd == pytest.approx(5.0)
        assert rc.total == rc.fv + rc.sd


def test_duration_stats_requires_positive_std():
    with pytest.raises(ValueError):
        DurationStats(mean_s=10.0, std_s=0.0)


def test_reward_config_validation():
    with pytest.raises(ValueError):
        RewardConfig(scale_fv=0.0)
