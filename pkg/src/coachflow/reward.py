"""Turn reward: facial-valence deviation plus normalized speech duration.

The per-turn reward is the sum of two scaled deviations: how far the
coachee's facial valence moved from their session baseline, and how far
their speech duration moved from the reference distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class BaselineValence:
    """Per-session facial-valence baseline, calibrated from the intro phase."""

    value: float
    sample_count: int

    def __post_init__(self) -> None:
        if self.sample_count <= 0:
            raise ValueError("baseline needs at least one sample")
        if abs(self.value) > 1.0 + 1e-12:
            raise ValueError(f"baseline valence {self.value} outside [-1, 1]")


@dataclass(frozen=True)
class DurationStats:
    """Mean/std of speech duration used for z-normalization."""

    mean_s: float
    std_s: float
    source: str = "reference-corpus"  # or "per-coachee-running"

    def __post_init__(self) -> None:
        if self.std_s <= 0:
            raise ValueError("duration std must be positive")

    def zscore(self, duration_s: float) -> float:
        return (duration_s - self.mean_s) / self.std_s


@dataclass(frozen=True)
class RewardComponents:
    fv: float
    sd: float
    total: float


@dataclass(frozen=True)
class RewardConfig:
    """Scales and clipping for the two reward components.

    Defaults were tuned so the synthetic reference corpus brackets the
    target reward distribution (mean near -2.7, std near 5.6); they are
    configuration, not constants.
    """

    scale_fv: float = 10.0
    scale_sd: float = 5.0
    clip_sd: float = 15.0

    def __post_init__(self) -> None:
        if self.scale_fv <= 0 or self.scale_sd <= 0 or self.clip_sd <= 0:
            raise ValueError("reward scales and clip must be positive")


def calibrate_baseline(valence_samples: Sequence[float]) -> BaselineValence:
    """Arithmetic mean of the intro-phase valence samples."""
    samples = list(valence_samples)
    if not samples:
        raise ValueError("cannot calibrate a baseline from zero samples")
    for v in samples:
        if abs(v) > 1.0 + 1e-12:
            raise ValueError(f"valence sample {v} outside [-1, 1]")
    return BaselineValence(value=sum(samples) / len(samples), sample_count=len(samples))


def valence_deviation(
    turn_samples: Iterable[float], baseline: BaselineValence, scale_fv: float
) -> float:
    """FV component: scaled deviation of the turn's mean valence from baseline."""
    samples = list(turn_samples)
    if not samples:
        raise ValueError("cannot compute valence deviation from zero samples")
    if scale_fv <= 0:
        raise ValueError("scale_fv must be positive")
    turn_mean = sum(samples) / len(samples)
    return scale_fv * (turn_mean - baseline.value)


def normalized_speech_duration(
    duration_s: float, stats: DurationStats, scale_sd: float, clip: float
) -> float:
    """SD component: scaled z-score of speech duration, clamped to +/- clip."""
    if duration_s < 0:
        raise ValueError("speech duration cannot be negative")
    if clip <= 0:
        raise ValueError("clip must be positive")
    raw = scale_sd * stats.zscore(duration_s)
    return max(-clip, min(clip, raw))


def compute_reward(fv: float, sd: float) -> RewardComponents:
    """Combine the two components; the total is their exact sum."""
    if not (math.isfinite(fv) and math.isfinite(sd)):
        raise ValueError(f"reward components must be finite, got fv={fv} sd={sd}")
    return RewardComponents(fv=fv, sd=sd, total=fv + sd)


def turn_reward(
    valence_samples: Sequence[float],
    speech_duration_s: float,
    baseline: BaselineValence,
    stats: DurationStats,
    config: RewardConfig,
) -> RewardComponents:
    """Full per-turn reward from raw features."""
    fv = valence_deviation(valence_samples, baseline, config.scale_fv)
    sd = normalized_speech_duration(speech_duration_s, stats, config.scale_sd, config.clip_sd)
    return compute_reward(fv, sd)
