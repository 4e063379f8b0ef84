"""Shared domain types and the canonical policy-observation encoding.

Everything here is a plain value type, safe to share across threads. The
state layout is the one contract every other module leans on:

    [rupture one-hot (2)] [exercise one-hot (4)]
    [z speech duration (1)] [z silence duration (1)]
    [previous-action one-hot (3)]            -> 11 elements total
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .reward import DurationStats

STATE_DIM = 11
N_ACTIONS = 3

# Bound on the z-scored duration entries so the Q-network sees bounded inputs.
DURATION_Z_CLIP = 5.0


class ExerciseKind(Enum):
    SAVOURING = 0
    GRATITUDE = 1
    ACCOMPLISHMENT = 2
    ONE_DOOR_CLOSES_ONE_DOOR_OPENS = 3

    @classmethod
    def from_name(cls, name: str) -> "ExerciseKind":
        key = name.strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {
            "savouring": cls.SAVOURING,
            "savoring": cls.SAVOURING,
            "gratitude": cls.GRATITUDE,
            "accomplishment": cls.ACCOMPLISHMENT,
            "one_door_closes_one_door_opens": cls.ONE_DOOR_CLOSES_ONE_DOOR_OPENS,
            "one_door": cls.ONE_DOOR_CLOSES_ONE_DOOR_OPENS,
        }
        if key not in aliases:
            valid = ", ".join(sorted({k for k in aliases if "_" not in k or k.count("_") > 1}))
            raise ValueError(f"unknown exercise {name!r}; valid: {valid}")
        return aliases[key]


class DialogueAction(Enum):
    SUMMARISE = 0
    FOLLOW_UP_QUESTION = 1
    NEW_EPISODE = 2


def decode_action(index: int) -> DialogueAction:
    """Map a stable integer code back to its action."""
    if index not in (0, 1, 2):
        raise ValueError(f"action code must be 0, 1 or 2, got {index}")
    return DialogueAction(index)


@dataclass(frozen=True)
class TurnObservation:
    """Raw per-turn features observed at the end of a turn."""

    rupture_flag: bool
    exercise: ExerciseKind
    speech_duration_s: float
    silence_duration_s: float
    previous_action: Optional[DialogueAction]
    turn_index: int

    def __post_init__(self) -> None:
        if self.speech_duration_s < 0:
            raise ValueError("speech duration cannot be negative")
        if self.silence_duration_s < 0:
            raise ValueError("silence duration cannot be negative")
        if self.turn_index < 0:
            raise ValueError("turn index cannot be negative")


@dataclass(frozen=True)
class StateVector:
    """Fixed 11-element policy input."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.values) != STATE_DIM:
            raise ValueError(f"state vector must have {STATE_DIM} elements, got {len(self.values)}")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("state vector entries must be finite")

    def __len__(self) -> int:
        return STATE_DIM


@dataclass(frozen=True)
class Transition:
    """One (s, a, r, s', done) learning record with its provenance."""

    state: StateVector
    action: DialogueAction
    reward: float
    next_state: StateVector
    done: bool
    coachee_id: str
    session_index: int
    turn_index: int

    def __post_init__(self) -> None:
        if not math.isfinite(self.reward):
            raise ValueError("transition reward must be finite")


def encode_state(obs: TurnObservation, normalizer: DurationStats) -> StateVector:
    """Encode a turn observation into the canonical 11-element vector.

    Durations are z-normalized with the reference stats and clipped to
    +/- DURATION_Z_CLIP. The first turn of a session has no previous
    action; its previous-action block is all zeros.
    """
    if not (math.isfinite(obs.speech_duration_s) and math.isfinite(obs.silence_duration_s)):
        raise ValueError("durations must be finite to encode a state")

    rupture = [0.0, 0.0]
    rupture[1 if obs.rupture_flag else 0] = 1.0

    exercise = [0.0] * 4
    exercise[obs.exercise.value] = 1.0

    def znorm(duration: float) -> float:
        z = normalizer.zscore(duration)
        return max(-DURATION_Z_CLIP, min(DURATION_Z_CLIP, z))

    prev = [0.0] * N_ACTIONS
    if obs.previous_action is not None:
        prev[obs.previous_action.value] = 1.0

    values = (
        *rupture,
        *exercise,
        znorm(obs.speech_duration_s),
        znorm(obs.silence_duration_s),
        *prev,
    )
    return StateVector(values=values)
