"""Simulated coachees, synthetic pretraining corpus, and the study runner.

The simulated humans are deliberately simple: a coachee is a bundle of
numeric tendencies (baseline valence, talkativeness, per-action response
shifts). Rewards depend only on those numeric features; transcripts exist
to feed the LLM stub and are cosmetic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import (
    DialogueAction,
    ExerciseKind,
    Transition,
    TurnObservation,
    encode_state,
)
from .dialogue import (
    CoacheeTurnInput,
    SessionConfig,
    Termination,
    run_session,
)
from .llmclient import StubBackend
from .policy import (
    AdaptivePolicy,
    FrozenPolicy,
    OnlineConfig,
    PolicyCheckpoint,
    fork_for_coachee,
)
from .reward import (
    DurationStats,
    RewardConfig,
    calibrate_baseline,
    turn_reward,
)

logger = logging.getLogger(__name__)

DEFAULT_EXERCISE_ORDER = (
    ExerciseKind.SAVOURING,
    ExerciseKind.GRATITUDE,
    ExerciseKind.ACCOMPLISHMENT,
    ExerciseKind.ONE_DOOR_CLOSES_ONE_DOOR_OPENS,
)

ARMS = ("adaptive", "generic-frozen")

# Episode sentences for the simulated coachee; neutral by construction so
# the stub moderation gate never fires on simulated input.
_EPISODE_TEMPLATES = (
    "This week I spent an afternoon in the garden and it felt peaceful.",
    "I cooked a new recipe for my family and we enjoyed it together.",
    "I went for a long walk by the river and watched the light change.",
    "A friend called me out of the blue and we talked for an hour.",
    "I finished a small project at work and felt quietly proud.",
    "I listened to an old album and remembered a good summer.",
    "My neighbour and I shared coffee and laughed about small things.",
    "I read a chapter of a novel on the balcony before dinner.",
    "I tidied my desk and the room felt lighter afterwards.",
    "I watched the rain from the window with a warm cup of tea.",
)


@dataclass(frozen=True)
class ActionAffinity:
    """How one dialogue action shifts this coachee's response."""

    d_valence: float
    d_speech_s: float


@dataclass(frozen=True)
class CoacheeProfile:
    coachee_id: str
    base_valence: float
    talk_mean_s: float
    talk_std_s: float
    affinities: Mapping[DialogueAction, ActionAffinity]
    # Valence dip while doing the exercise, relative to the intro baseline.
    exercise_fatigue: float = 0.2
    engagement_drift_per_session: float = 0.0
    noise_std: float = 0.3
    valence_samples_per_turn: int = 5
    silence_mean_s: float = 3.0
    silence_std_s: float = 1.5
    rupture_prob: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        if not -1.0 <= self.base_valence <= 1.0:
            raise ValueError("base_valence must lie in [-1, 1]")
        if self.talk_mean_s < 0 or self.talk_std_s < 0:
            raise ValueError("talkativeness parameters cannot be negative")
        if self.noise_std < 0:
            raise ValueError("noise_std cannot be negative")
        if self.valence_samples_per_turn < 1:
            raise ValueError("need at least one valence sample per turn")
        if not 0.0 <= self.rupture_prob <= 1.0:
            raise ValueError("rupture_prob must lie in [0, 1]")
        missing = [a for a in DialogueAction if a not in self.affinities]
        if missing:
            raise ValueError(f"profile lacks affinities for {missing}")


def coachee_respond(
    profile: CoacheeProfile,
    action: Optional[DialogueAction],
    session_index: int = 1,
    rng: Optional[np.random.Generator] = None,
) -> CoacheeTurnInput:
    """Draw one simulated answer.

    action=None is the pre-exercise baseline answer: no affinity shift and
    no exercise fatigue, which is what makes later turn rewards read as
    deviations from a calm starting point.
    """
    if rng is None:
        rng = np.random.default_rng(profile.seed)
    drift = profile.engagement_drift_per_session * (session_index - 1)
    if action is None:
        mean_v = profile.base_valence + drift
        d_speech = 0.0
    else:
        affinity = profile.affinities[action]
        mean_v = (profile.base_valence - profile.exercise_fatigue
                  + affinity.d_valence + drift)
        d_speech = affinity.d_speech_s
    samples = rng.normal(mean_v, profile.noise_std, size=profile.valence_samples_per_turn)
    samples = np.clip(samples, -1.0, 1.0)
    speech = max(0.0, float(rng.normal(profile.talk_mean_s + d_speech, profile.talk_std_s)))
    silence = max(0.0, float(rng.normal(profile.silence_mean_s, profile.silence_std_s)))
    transcript = _EPISODE_TEMPLATES[int(rng.integers(len(_EPISODE_TEMPLATES)))]
    rupture = bool(rng.random() < profile.rupture_prob)
    return CoacheeTurnInput(
        transcript=transcript,
        speech_duration_s=speech,
        silence_duration_s=silence,
        valence_samples=tuple(float(v) for v in samples),
        rupture_flag=rupture,
    )


# ---------------------------------------------------------------------------
# Populations
# ---------------------------------------------------------------------------


def _make_profile(index: int, rng: np.random.Generator, seed: int,
                  affinity_scale: float = 1.0) -> CoacheeProfile:
    preferred = DialogueAction(index % 3)
    affinities = {}
    penalties = [-0.15, -0.20]
    speech_penalties = [-2.5, -5.0]
    slot = 0
    for a in DialogueAction:
        if a is preferred:
            affinities[a] = ActionAffinity(d_valence=0.275 * affinity_scale,
                                           d_speech_s=7.5 * affinity_scale)
        else:
            affinities[a] = ActionAffinity(d_valence=penalties[slot] * affinity_scale,
                                           d_speech_s=speech_penalties[slot] * affinity_scale)
            slot += 1
    return CoacheeProfile(
        coachee_id=f"sim-{index}",
        base_valence=float(rng.uniform(-0.2, 0.3)),
        talk_mean_s=float(rng.uniform(9.0, 16.0)),
        talk_std_s=float(rng.uniform(3.5, 6.0)),
        affinities=affinities,
        exercise_fatigue=float(rng.uniform(0.16, 0.26)),
        noise_std=0.28,
        rupture_prob=0.02,
        seed=seed * 1000 + index,
    )


def corpus_population(n: int = 5, seed: int = 0,
                      affinity_scale: float = 0.8) -> tuple[CoacheeProfile, ...]:
    """Default population for pretraining-corpus generation.

    A different cohort than the study population, with milder per-action
    effects: the pretraining recordings and the longitudinal study involve
    different people, so the generic policy starts from a related but not
    identical preference structure.
    """
    rng = np.random.default_rng(seed)
    return tuple(_make_profile(i, rng, seed, affinity_scale) for i in range(n))


def study_population(n: int = 17, seed: int = 0,
                     affinity_scale: float = 1.0) -> tuple[CoacheeProfile, ...]:
    """Default longitudinal-study population; preferences cycle over actions."""
    rng = np.random.default_rng(seed + 7919)
    return tuple(_make_profile(i, rng, seed, affinity_scale) for i in range(n))


# ---------------------------------------------------------------------------
# Pretraining corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationStats:
    mean: float
    std: float
    median: float
    count: int

    def as_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "median": self.median,
                "count": self.count}


@dataclass(frozen=True)
class CorpusResult:
    transitions: tuple[Transition, ...]
    duration_stats: DurationStats
    reward_config: RewardConfig
    calibration: CalibrationStats
    sessions_per_profile: int
    profile_ids: tuple[str, ...]


def generate_corpus(
    profiles: Sequence[CoacheeProfile],
    sessions_per_profile: int = 19,
    seed: int = 0,
    exercise_order: Sequence[ExerciseKind] = DEFAULT_EXERCISE_ORDER,
    reward_config: RewardConfig = RewardConfig(),
    turns_per_session: int = 8,
) -> CorpusResult:
    """Collect transitions under a uniform-random action policy.

    Two passes: the first simulates every session and records raw features,
    the second normalizes speech durations against the pooled statistics of
    this very corpus and computes rewards, so the SD component is z-scored
    against its own distribution rather than magic constants.
    """
    if not profiles:
        raise ValueError("need at least one profile")
    if sessions_per_profile < 1:
        raise ValueError("sessions_per_profile must be >= 1")

    raw_sessions = []
    durations: list[float] = []
    for p_idx, profile in enumerate(profiles):
        for s_idx in range(1, sessions_per_profile + 1):
            rng = np.random.default_rng([seed, p_idx, s_idx])
            exercise = exercise_order[(s_idx - 1) % len(exercise_order)]
            baseline_input = coachee_respond(profile, None, s_idx, rng)
            turns = []
            for t in range(1, turns_per_session + 1):
                action = DialogueAction(int(rng.integers(3)))
                response = coachee_respond(profile, action, s_idx, rng)
                turns.append((action, response))
                durations.append(response.speech_duration_s)
            raw_sessions.append((profile, s_idx, exercise, baseline_input, turns))

    # Degenerate (zero-variance) populations still need a positive std.
    std = max(float(np.std(durations)), 1e-6)
    stats = DurationStats(mean_s=float(np.mean(durations)), std_s=std)

    transitions: list[Transition] = []
    rewards: list[float] = []
    for profile, s_idx, exercise, baseline_input, turns in raw_sessions:
        baseline = calibrate_baseline(baseline_input.valence_samples)
        prev_obs = TurnObservation(
            rupture_flag=bool(baseline_input.rupture_flag),
            exercise=exercise,
            speech_duration_s=baseline_input.speech_duration_s,
            silence_duration_s=baseline_input.silence_duration_s,
            previous_action=None,
            turn_index=0,
        )
        state = encode_state(prev_obs, stats)
        for t, (action, response) in enumerate(turns, start=1):
            obs = TurnObservation(
                rupture_flag=bool(response.rupture_flag),
                exercise=exercise,
                speech_duration_s=response.speech_duration_s,
                silence_duration_s=response.silence_duration_s,
                previous_action=action,
                turn_index=t,
            )
            next_state = encode_state(obs, stats)
            reward = turn_reward(response.valence_samples, response.speech_duration_s,
                                 baseline, stats, reward_config)
            transitions.append(Transition(
                state=state,
                action=action,
                reward=reward.total,
                next_state=next_state,
                done=t == len(turns),
                coachee_id=profile.coachee_id,
                session_index=s_idx,
                turn_index=t,
            ))
            rewards.append(reward.total)
            state = next_state

    arr = np.asarray(rewards)
    calibration = CalibrationStats(
        mean=float(arr.mean()),
        std=float(arr.std()),
        median=float(np.median(arr)),
        count=int(arr.size),
    )
    return CorpusResult(
        transitions=tuple(transitions),
        duration_stats=stats,
        reward_config=reward_config,
        calibration=calibration,
        sessions_per_profile=sessions_per_profile,
        profile_ids=tuple(p.coachee_id for p in profiles),
    )


# ---------------------------------------------------------------------------
# Longitudinal study
# ---------------------------------------------------------------------------


class SimulatedCoacheeChannel:
    """Bridges a CoacheeProfile into the orchestrator's channel protocol."""

    def __init__(self, profile: CoacheeProfile, session_index: int,
                 rng: np.random.Generator):
        self.profile = profile
        self.session_index = session_index
        self.rng = rng
        self.frames = []
        self.ended: Optional[Termination] = None
        self._pending: Optional[CoacheeTurnInput] = None

    def speak(self, frame) -> None:
        self.frames.append(frame)
        if not frame.awaiting_input:
            return
        action = frame.action  # None for the scripted first question
        self._pending = coachee_respond(self.profile, action, self.session_index, self.rng)

    def poll(self) -> Optional[CoacheeTurnInput]:
        pending, self._pending = self._pending, None
        return pending

    def end(self, reason: Termination) -> None:
        self.ended = reason

    def disconnected(self) -> bool:
        return False


@dataclass(frozen=True)
class StudyConfig:
    profiles: tuple[CoacheeProfile, ...]
    sessions: int = 4
    exercise_order: tuple[ExerciseKind, ...] = DEFAULT_EXERCISE_ORDER
    arms: tuple[str, ...] = ARMS
    seed: int = 0
    online: OnlineConfig = field(default_factory=OnlineConfig)
    turn_limit: int = 8

    def __post_init__(self) -> None:
        if not self.profiles:
            raise ValueError("study needs at least one profile")
        if self.sessions < 1:
            raise ValueError("sessions must be >= 1")
        if not self.arms:
            raise ValueError("study needs at least one arm")
        unknown = [a for a in self.arms if a not in ARMS]
        if unknown:
            raise ValueError(f"unknown arms {unknown}; valid: {ARMS}")


@dataclass(frozen=True)
class ArmResult:
    arm: str
    # coachee_id -> per-session mean rewards, session index 1..sessions
    per_coachee: dict
    session_means: tuple[float, ...]  # pooled over all turn rewards
    session_stds: tuple[float, ...]
    action_counts: tuple[dict, ...]  # per session: {action name: count}
    errors: tuple[str, ...]

    def session_mean(self, session_index: int) -> float:
        return self.session_means[session_index - 1]


@dataclass(frozen=True)
class StudyReport:
    config_seed: int
    sessions: int
    arms: dict  # arm name -> ArmResult
    arm_deltas: tuple[float, ...]  # adaptive minus generic pooled mean/session
    calibration: Optional[CalibrationStats]

    def to_dict(self) -> dict:
        return {
            "config_seed": self.config_seed,
            "sessions": self.sessions,
            "arms": {
                name: {
                    "per_coachee": result.per_coachee,
                    "session_means": list(result.session_means),
                    "session_stds": list(result.session_stds),
                    "action_counts": list(result.action_counts),
                    "errors": list(result.errors),
                }
                for name, result in self.arms.items()
            },
            "arm_deltas": list(self.arm_deltas),
            "calibration": self.calibration.as_dict() if self.calibration else None,
        }


def _build_policy(arm: str, generic: PolicyCheckpoint, profile: CoacheeProfile,
                  config: StudyConfig, generic_corpus: Sequence[Transition]):
    if arm == "adaptive":
        fork = fork_for_coachee(generic, profile.coachee_id)
        return AdaptivePolicy(fork, config=config.online,
                              generic_corpus=generic_corpus,
                              seed=config.seed * 100003 + profile.seed)
    return FrozenPolicy(generic, epsilon=0.0, seed=config.seed)


def _run_coachee_arm(arm: str, profile: CoacheeProfile, p_idx: int,
                     generic: PolicyCheckpoint, config: StudyConfig,
                     generic_corpus: Sequence[Transition], backend) -> tuple:
    """All sessions for one coachee in one arm; returns per-session data."""
    policy = _build_policy(arm, generic, profile, config, generic_corpus)
    session_rewards: list[list[float]] = []
    session_actions: list[list[DialogueAction]] = []
    errors: list[str] = []
    arm_tag = ARMS.index(arm)
    for s_idx in range(1, config.sessions + 1):
        rng = np.random.default_rng([config.seed, arm_tag, p_idx, s_idx])
        channel = SimulatedCoacheeChannel(profile, s_idx, rng)
        session_config = SessionConfig(
            exercise=config.exercise_order[(s_idx - 1) % len(config.exercise_order)],
            coachee_id=profile.coachee_id,
            session_index=s_idx,
            turn_limit=config.turn_limit,
        )
        try:
            log = run_session(session_config, channel, policy, backend)
        except Exception as err:  # study must survive one bad session
            logger.exception("session failed for %s session %d", profile.coachee_id, s_idx)
            errors.append(f"{profile.coachee_id}/s{s_idx}: {err}")
            session_rewards.append([])
            session_actions.append([])
            continue
        if log.termination is not Termination.COMPLETED:
            errors.append(f"{profile.coachee_id}/s{s_idx}: ended {log.termination.value}")
        session_rewards.append([t.reward.total for t in log.turns])
        session_actions.append([t.action for t in log.turns])
    return session_rewards, session_actions, errors


def run_study(config: StudyConfig, generic_checkpoint: PolicyCheckpoint,
              generic_corpus: Sequence[Transition] = (),
              calibration: Optional[CalibrationStats] = None) -> StudyReport:
    """Run every (arm, coachee) cell and aggregate per-session rewards."""
    backend = StubBackend(seed=config.seed)
    arm_results = {}
    for arm in config.arms:
        pooled: list[list[float]] = [[] for _ in range(config.sessions)]
        actions: list[list[DialogueAction]] = [[] for _ in range(config.sessions)]
        per_coachee = {}
        errors: list[str] = []
        for p_idx, profile in enumerate(config.profiles):
            rewards, acts, errs = _run_coachee_arm(
                arm, profile, p_idx, generic_checkpoint, config, generic_corpus, backend)
            errors.extend(errs)
            per_coachee[profile.coachee_id] = [
                float(np.mean(r)) if r else float("nan") for r in rewards
            ]
            for s in range(config.sessions):
                pooled[s].extend(rewards[s])
                actions[s].extend(acts[s])
        session_means = tuple(
            float(np.mean(r)) if r else float("nan") for r in pooled)
        session_stds = tuple(
            float(np.std(r)) if r else float("nan") for r in pooled)
        action_counts = tuple(
            {a.name: sum(1 for x in acts if x is a) for a in DialogueAction}
            for acts in actions
        )
        arm_results[arm] = ArmResult(
            arm=arm,
            per_coachee=per_coachee,
            session_means=session_means,
            session_stds=session_stds,
            action_counts=action_counts,
            errors=tuple(errors),
        )
    if "adaptive" in arm_results and "generic-frozen" in arm_results:
        deltas = tuple(
            a - g for a, g in zip(arm_results["adaptive"].session_means,
                                  arm_results["generic-frozen"].session_means)
        )
    else:
        deltas = ()
    return StudyReport(
        config_seed=config.seed,
        sessions=config.sessions,
        arms=arm_results,
        arm_deltas=deltas,
        calibration=calibration,
    )


def sign_test_wins(deltas: Sequence[float]) -> tuple[int, float]:
    """One-sided sign test for median(delta) > 0; returns (wins, p-value).

    Ties are dropped, per the standard treatment. The p-value is the exact
    binomial tail P(X >= wins | n, 1/2).
    """
    nonzero = [d for d in deltas if d != 0.0]
    n = len(nonzero)
    wins = sum(1 for d in nonzero if d > 0)
    p = sum(_binom(n, k) for k in range(wins, n + 1)) / (2.0 ** n) if n else 1.0
    return wins, p


def _binom(n: int, k: int) -> int:
    from math import comb

    return comb(n, k)
