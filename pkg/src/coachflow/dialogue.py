"""Behavior-tree session orchestrator.

A session is a scripted scaffold around exactly `turn_limit` decision
turns. The coach opens with a fixed intro and first question; the answer
to that first question calibrates the coachee's valence baseline and
forms the first policy state. Each decision turn then runs the leaf
sequence

    AwaitCoachee -> Moderate(input) -> Detect -> FinishTurn ->
    CheckTurnLimit -> Decide -> Prompt -> Moderate(output) -> Speak

ticked at a fixed rate. Every coachee transcript and every generated
utterance passes exactly one moderation check; a flag (or a moderation
transport failure, which is treated as a flag) speaks the refusal line
and ends the session.
"""

from __future__ import annotations

import json
import logging
import math
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .core import (
    DialogueAction,
    ExerciseKind,
    StateVector,
    Transition,
    TurnObservation,
    encode_state,
)
from .llmclient import (
    REFUSAL_UTTERANCE,
    ChatHistory,
    LlmTransportError,
    build_prompt,
    complete,
    moderate,
)
from .reward import BaselineValence, RewardComponents, calibrate_baseline, turn_reward

logger = logging.getLogger(__name__)

PHASES = ("intro", "first-question", "outro")


class Status(Enum):
    RUNNING = "running"
    SUCCESS = "success"
    FAILURE = "failure"


class Termination(Enum):
    COMPLETED = "completed"
    MODERATION_STOP = "moderation-stop"
    TIMEOUT = "timeout"
    CLIENT_DISCONNECT = "client-disconnect"
    # Defensive catch-all for unhandled leaf failures; not part of the
    # normal contract and always accompanied by an error log.
    ERROR = "error"


# ---------------------------------------------------------------------------
# Scripts
# ---------------------------------------------------------------------------

_EXERCISE_KEYS = {
    ExerciseKind.SAVOURING: "savouring",
    ExerciseKind.GRATITUDE: "gratitude",
    ExerciseKind.ACCOMPLISHMENT: "accomplishment",
    ExerciseKind.ONE_DOOR_CLOSES_ONE_DOOR_OPENS: "one_door_closes_one_door_opens",
}
_PHASE_KEYS = {"intro": "intro", "first-question": "first_question", "outro": "outro"}


@dataclass(frozen=True)
class Scripts:
    exercises: dict
    reprompt: str
    fallback: str

    def line(self, exercise: ExerciseKind, phase: str) -> str:
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}; valid: {PHASES}")
        return self.exercises[_EXERCISE_KEYS[exercise]][_PHASE_KEYS[phase]]

    def system_context(self, exercise: ExerciseKind) -> str:
        return self.exercises[_EXERCISE_KEYS[exercise]]["system"]


def load_scripts(path=None) -> Scripts:
    """Load and validate the script file; missing entries fail at startup."""
    if path is None:
        raw = resources.files("coachflow.data").joinpath("scripts.json").read_text()
    else:
        with open(path, encoding="utf-8") as fh:
            raw = fh.read()
    data = json.loads(raw)
    exercises = data.get("exercises", {})
    for kind, key in _EXERCISE_KEYS.items():
        entry = exercises.get(key)
        if entry is None:
            raise ValueError(f"script file missing exercise {key!r}")
        for wanted in ("system", "intro", "first_question", "outro"):
            if not entry.get(wanted):
                raise ValueError(f"script file missing {key}.{wanted}")
    shared = data.get("shared", {})
    for wanted in ("reprompt", "fallback"):
        if not shared.get(wanted):
            raise ValueError(f"script file missing shared.{wanted}")
    return Scripts(exercises=exercises, reprompt=shared["reprompt"], fallback=shared["fallback"])


_DEFAULT_SCRIPTS: Optional[Scripts] = None


def default_scripts() -> Scripts:
    global _DEFAULT_SCRIPTS
    if _DEFAULT_SCRIPTS is None:
        _DEFAULT_SCRIPTS = load_scripts()
    return _DEFAULT_SCRIPTS


def scripted_lines(exercise: ExerciseKind, phase: str) -> str:
    return default_scripts().line(exercise, phase)


# ---------------------------------------------------------------------------
# Session types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SessionConfig:
    exercise: ExerciseKind
    coachee_id: str
    session_index: int = 1
    turn_limit: int = 8
    tick_rate_hz: float = 10.0
    listen_timeout_s: float = 60.0
    session_timeout_s: Optional[float] = None
    llm_max_retries: int = 2
    llm_backoff_s: float = 0.5
    realtime: bool = False  # pace ticks with wall-clock sleeps
    session_id: Optional[str] = None

    def __post_init__(self) -> None:
        if self.turn_limit < 1:
            raise ValueError("turn_limit must be >= 1")
        if self.tick_rate_hz <= 0:
            raise ValueError("tick_rate_hz must be positive")
        if self.listen_timeout_s <= 0:
            raise ValueError("listen_timeout_s must be positive")
        if self.session_index < 1:
            raise ValueError("session indices start at 1")


@dataclass(frozen=True)
class CoacheeTurnInput:
    """One coachee answer with its extracted numeric features."""

    transcript: str
    speech_duration_s: float
    silence_duration_s: float
    valence_samples: tuple[float, ...]
    rupture_flag: Optional[bool] = None
    facial_window: Optional[np.ndarray] = None
    audio_window: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.speech_duration_s < 0 or self.silence_duration_s < 0:
            raise ValueError("durations cannot be negative")
        if not self.valence_samples:
            raise ValueError("valence_samples must be non-empty")
        if any(not -1.0 <= v <= 1.0 for v in self.valence_samples):
            raise ValueError("valence samples must lie in [-1, 1]")


@dataclass
class TurnRecord:
    """Everything needed to replay one decision turn."""

    turn_index: int  # 1-based
    state: StateVector
    q_values: tuple[float, float, float]
    epsilon: float
    explored: bool
    action: DialogueAction
    prompt: str
    coach_utterance: str
    llm_fallback: bool
    coachee_transcript: str
    observation: TurnObservation  # features of the coachee's response
    reward: RewardComponents
    rupture_flag: bool
    moderation_checks: tuple[str, ...]  # e.g. ("output", "input")
    timestamp: float

    def to_dict(self) -> dict:
        return {
            "turn_index": self.turn_index,
            "state": list(self.state.values),
            "q_values": list(self.q_values),
            "epsilon": self.epsilon,
            "explored": self.explored,
            "action": self.action.value,
            "prompt": self.prompt,
            "coach_utterance": self.coach_utterance,
            "llm_fallback": self.llm_fallback,
            "coachee_transcript": self.coachee_transcript,
            "observation": {
                "rupture_flag": self.observation.rupture_flag,
                "exercise": self.observation.exercise.value,
                "speech_duration_s": self.observation.speech_duration_s,
                "silence_duration_s": self.observation.silence_duration_s,
                "previous_action": (
                    self.observation.previous_action.value
                    if self.observation.previous_action is not None else None
                ),
                "turn_index": self.observation.turn_index,
            },
            "reward": {"fv": self.reward.fv, "sd": self.reward.sd, "total": self.reward.total},
            "rupture_flag": self.rupture_flag,
            "moderation_checks": list(self.moderation_checks),
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TurnRecord":
        obs = data["observation"]
        prev = obs["previous_action"]
        return cls(
            turn_index=data["turn_index"],
            state=StateVector(values=tuple(data["state"])),
            q_values=tuple(data["q_values"]),
            epsilon=data["epsilon"],
            explored=data["explored"],
            action=DialogueAction(data["action"]),
            prompt=data["prompt"],
            coach_utterance=data["coach_utterance"],
            llm_fallback=data["llm_fallback"],
            coachee_transcript=data["coachee_transcript"],
            observation=TurnObservation(
                rupture_flag=obs["rupture_flag"],
                exercise=ExerciseKind(obs["exercise"]),
                speech_duration_s=obs["speech_duration_s"],
                silence_duration_s=obs["silence_duration_s"],
                previous_action=None if prev is None else DialogueAction(prev),
                turn_index=obs["turn_index"],
            ),
            reward=RewardComponents(
                fv=data["reward"]["fv"], sd=data["reward"]["sd"], total=data["reward"]["total"]
            ),
            rupture_flag=data["rupture_flag"],
            moderation_checks=tuple(data["moderation_checks"]),
            timestamp=data["timestamp"],
        )


@dataclass
class SessionLog:
    session_id: str
    coachee_id: str
    exercise: ExerciseKind
    session_index: int
    turns: list[TurnRecord] = field(default_factory=list)
    termination: Optional[Termination] = None
    intro_utterance: str = ""
    first_question_utterance: str = ""
    outro_utterance: Optional[str] = None
    final_utterance: str = ""
    baseline: Optional[BaselineValence] = None
    baseline_transcript: str = ""
    baseline_moderation_checks: tuple[str, ...] = ()
    started_at: float = 0.0
    ended_at: float = 0.0

    def mean_reward(self) -> float:
        if not self.turns:
            return 0.0
        return float(np.mean([t.reward.total for t in self.turns]))

    def to_summary_dict(self) -> dict:
        return {
            "record": "summary",
            "session_id": self.session_id,
            "coachee_id": self.coachee_id,
            "exercise": self.exercise.value,
            "session_index": self.session_index,
            "turn_count": len(self.turns),
            "termination": self.termination.value if self.termination else None,
            "intro_utterance": self.intro_utterance,
            "first_question_utterance": self.first_question_utterance,
            "outro_utterance": self.outro_utterance,
            "final_utterance": self.final_utterance,
            "baseline": None if self.baseline is None else {
                "value": self.baseline.value, "sample_count": self.baseline.sample_count
            },
            "baseline_transcript": self.baseline_transcript,
            "baseline_moderation_checks": list(self.baseline_moderation_checks),
            "mean_reward": self.mean_reward(),
            "started_at": self.started_at,
            "ended_at": self.ended_at,
        }


@dataclass(frozen=True)
class CoachFrame:
    """One utterance pushed to the coachee channel."""

    kind: str  # intro | first-question | turn | reprompt | outro | refusal | fallback-notice
    text: str
    turn_index: Optional[int] = None
    awaiting_input: bool = False
    action: Optional[DialogueAction] = None
    q_values: Optional[tuple[float, float, float]] = None


class CoacheeChannel(Protocol):
    def speak(self, frame: CoachFrame) -> None: ...
    def poll(self) -> Optional[CoacheeTurnInput]: ...
    def end(self, reason: Termination) -> None: ...
    def disconnected(self) -> bool: ...


class TickPacer:
    """Keeps a loop at a fixed tick rate using monotonic time."""

    def __init__(self, rate_hz: float):
        if rate_hz <= 0:
            raise ValueError("tick rate must be positive")
        self.period = 1.0 / rate_hz
        self._next = time.monotonic() + self.period

    def wait(self) -> None:
        now = time.monotonic()
        delay = self._next - now
        if delay > 0:
            time.sleep(delay)
            self._next += self.period
        else:
            # Fell behind; re-anchor rather than bursting to catch up.
            self._next = now + self.period


# ---------------------------------------------------------------------------
# The behavior tree
# ---------------------------------------------------------------------------

LEAF_ORDER = (
    "AwaitCoachee",
    "ModerateInput",
    "Detect",
    "FinishTurn",
    "CheckTurnLimit",
    "Decide",
    "Prompt",
    "ModerateOutput",
    "Speak",
)


class SessionRuntime:
    """Mutable per-session state driven by tick()."""

    def __init__(self, config: SessionConfig, channel: CoacheeChannel, policy,
                 backend, rupture_model: Optional[Callable] = None,
                 scripts: Optional[Scripts] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.channel = channel
        self.policy = policy
        self.backend = backend
        self.rupture_model = rupture_model
        self.scripts = scripts or default_scripts()
        self.sleep = sleep

        checkpoint = policy.checkpoint
        self.duration_stats = checkpoint.duration_stats
        self.reward_config = checkpoint.reward_config
        self.history = ChatHistory(self.scripts.system_context(config.exercise))
        self.log = SessionLog(
            session_id=config.session_id or uuid.uuid4().hex,
            coachee_id=config.coachee_id,
            exercise=config.exercise,
            session_index=config.session_index,
            started_at=time.time(),
        )

        self.cursor = 0  # index into LEAF_ORDER
        self.turns_done = 0
        self.baseline: Optional[BaselineValence] = None
        self.state: Optional[StateVector] = None
        self.prev_action: Optional[DialogueAction] = None
        self.prev_decision: Optional[dict] = None  # pending turn awaiting its response
        self.pending_input: Optional[CoacheeTurnInput] = None
        self.pending_checks: list[str] = []
        self.pending_rupture = False
        self.pending_utterance: Optional[str] = None
        self.pending_fallback = False
        self.await_started: Optional[float] = None
        self.reprompted = False
        self.done = False

    # -- leaves -------------------------------------------------------------

    def leaf_await_coachee(self) -> Status:
        if self.channel.disconnected():
            self._terminate(Termination.CLIENT_DISCONNECT)
            return Status.FAILURE
        if self.await_started is None:
            self.await_started = time.monotonic()
            self.reprompted = False
        got = self.channel.poll()
        if got is not None:
            self.pending_input = got
            self.await_started = None
            return Status.SUCCESS
        waited = time.monotonic() - self.await_started
        if waited >= self.config.listen_timeout_s:
            if not self.reprompted:
                self.channel.speak(CoachFrame(kind="reprompt", text=self.scripts.reprompt,
                                              awaiting_input=True))
                self.reprompted = True
                self.await_started = time.monotonic()
                return Status.RUNNING
            # Count the turn with silence features.
            self.pending_input = CoacheeTurnInput(
                transcript="",
                speech_duration_s=0.0,
                silence_duration_s=self.config.listen_timeout_s,
                valence_samples=(0.0,),
            )
            self.await_started = None
            return Status.SUCCESS
        return Status.RUNNING

    def leaf_moderate_input(self) -> Status:
        self.pending_checks = []
        text = self.pending_input.transcript
        if not text:
            return Status.SUCCESS  # silence has no text to check
        try:
            verdict = moderate(self.backend, text)
        except LlmTransportError as err:
            logger.warning("input moderation unavailable, failing closed: %s", err)
            self._refuse()
            return Status.FAILURE
        self.pending_checks.append("input")
        if verdict.flagged:
            logger.info("coachee input flagged: %s", sorted(verdict.categories))
            self._refuse()
            return Status.FAILURE
        return Status.SUCCESS

    def leaf_detect(self) -> Status:
        inp = self.pending_input
        if inp.rupture_flag is not None:
            self.pending_rupture = bool(inp.rupture_flag)
        elif (self.rupture_model is not None and inp.facial_window is not None
              and inp.audio_window is not None):
            prob = float(self.rupture_model(inp.facial_window, inp.audio_window))
            self.pending_rupture = prob >= 0.5
        else:
            self.pending_rupture = False
        return Status.SUCCESS

    def leaf_finish_turn(self) -> Status:
        """Close out the previous decision turn using this response."""
        inp = self.pending_input
        obs = TurnObservation(
            rupture_flag=self.pending_rupture,
            exercise=self.config.exercise,
            speech_duration_s=inp.speech_duration_s,
            silence_duration_s=inp.silence_duration_s,
            previous_action=self.prev_action,
            turn_index=self.turns_done,
        )
        next_state = encode_state(obs, self.duration_stats)

        if self.prev_decision is None:
            # This was the baseline answer to the scripted first question.
            self.baseline = calibrate_baseline(inp.valence_samples)
            self.log.baseline = self.baseline
            self.log.baseline_transcript = inp.transcript
            self.log.baseline_moderation_checks = tuple(self.pending_checks)
            self.state = next_state
            return Status.SUCCESS

        decision = self.prev_decision
        reward = turn_reward(
            inp.valence_samples, inp.speech_duration_s, self.baseline,
            self.duration_stats, self.reward_config,
        )
        turn_index = self.turns_done
        done = turn_index >= self.config.turn_limit
        record = TurnRecord(
            turn_index=turn_index,
            state=decision["state"],
            q_values=decision["q_values"],
            epsilon=decision["epsilon"],
            explored=decision["explored"],
            action=decision["action"],
            prompt=decision["prompt"],
            coach_utterance=decision["utterance"],
            llm_fallback=decision["fallback"],
            coachee_transcript=inp.transcript,
            observation=obs,
            reward=reward,
            rupture_flag=self.pending_rupture,
            moderation_checks=tuple(decision["checks"] + self.pending_checks),
            timestamp=time.time(),
        )
        self.log.turns.append(record)
        transition = Transition(
            state=decision["state"],
            action=decision["action"],
            reward=reward.total,
            next_state=next_state,
            done=done,
            coachee_id=self.config.coachee_id,
            session_index=self.config.session_index,
            turn_index=turn_index,
        )
        self.policy.update_online(transition)
        self.state = next_state
        self.prev_decision = None
        return Status.SUCCESS

    def leaf_check_turn_limit(self) -> Status:
        if self.turns_done >= self.config.turn_limit:
            outro = self.scripts.line(self.config.exercise, "outro")
            self.log.outro_utterance = outro
            self.log.final_utterance = outro
            self.channel.speak(CoachFrame(kind="outro", text=outro))
            self._terminate(Termination.COMPLETED)
            return Status.FAILURE  # routes out of the decision branch
        return Status.SUCCESS

    def leaf_decide(self) -> Status:
        qvals = self.policy.q_values(self.state)
        epsilon = self._epsilon()
        action = self._select(qvals, epsilon)
        greedy = max(range(3), key=lambda i: (qvals[i], -i))
        self.prev_decision = {
            "state": self.state,
            "q_values": qvals,
            "epsilon": epsilon,
            "explored": action.value != greedy,
            "action": action,
            "prompt": "",
            "utterance": "",
            "fallback": False,
            "checks": [],
        }
        return Status.SUCCESS

    def leaf_prompt(self) -> Status:
        decision = self.prev_decision
        prompt = build_prompt(decision["action"])
        decision["prompt"] = prompt
        transcript = self.pending_input.transcript or "(The Human stayed silent.)"
        message = f"{transcript}\n\n{prompt}"
        delay = self.config.llm_backoff_s
        for attempt in range(self.config.llm_max_retries + 1):
            try:
                decision["utterance"] = complete(self.backend, self.history, message)
                return Status.SUCCESS
            except LlmTransportError as err:
                logger.warning("completion attempt %d failed: %s", attempt + 1, err)
                if attempt < self.config.llm_max_retries:
                    self.sleep(delay)
                    delay *= 2
        decision["utterance"] = self.scripts.fallback
        decision["fallback"] = True
        return Status.SUCCESS

    def leaf_moderate_output(self) -> Status:
        decision = self.prev_decision
        if decision["fallback"]:
            return Status.SUCCESS  # scripted text, pre-vetted
        try:
            verdict = moderate(self.backend, decision["utterance"])
        except LlmTransportError as err:
            logger.warning("output moderation unavailable, failing closed: %s", err)
            self._refuse()
            return Status.FAILURE
        decision["checks"].append("output")
        if verdict.flagged:
            # Never speak flagged model output; stop the practice.
            logger.warning("generated utterance flagged: %s", sorted(verdict.categories))
            self._refuse()
            return Status.FAILURE
        return Status.SUCCESS

    def leaf_speak(self) -> Status:
        decision = self.prev_decision
        self.prev_action = decision["action"]
        self.turns_done += 1
        self.channel.speak(
            CoachFrame(
                kind="turn",
                text=decision["utterance"],
                turn_index=self.turns_done,
                awaiting_input=True,
                action=decision["action"],
                q_values=decision["q_values"],
            )
        )
        return Status.SUCCESS

    # -- helpers ------------------------------------------------------------

    def _epsilon(self) -> float:
        getter = getattr(self.policy, "config", None)
        if getter is not None and hasattr(getter, "epsilon_for_session"):
            return getter.epsilon_for_session(self.config.session_index)
        return getattr(self.policy, "epsilon", 0.0)

    def _select(self, qvals, epsilon) -> DialogueAction:
        from .policy import select_action

        return select_action(qvals, epsilon, self.policy.rng)

    def _refuse(self) -> None:
        self.log.final_utterance = REFUSAL_UTTERANCE
        self.channel.speak(CoachFrame(kind="refusal", text=REFUSAL_UTTERANCE))
        self._terminate(Termination.MODERATION_STOP)

    def _terminate(self, reason: Termination) -> None:
        if self.log.termination is None:
            self.log.termination = reason
            self.log.ended_at = time.time()
            self.done = True
            self.channel.end(reason)

    def start(self) -> None:
        intro = self.scripts.line(self.config.exercise, "intro")
        first_q = self.scripts.line(self.config.exercise, "first-question")
        self.log.intro_utterance = intro
        self.log.first_question_utterance = first_q
        self.channel.speak(CoachFrame(kind="intro", text=intro))
        self.channel.speak(CoachFrame(kind="first-question", text=first_q, awaiting_input=True))


_LEAVES = {
    "AwaitCoachee": SessionRuntime.leaf_await_coachee,
    "ModerateInput": SessionRuntime.leaf_moderate_input,
    "Detect": SessionRuntime.leaf_detect,
    "FinishTurn": SessionRuntime.leaf_finish_turn,
    "CheckTurnLimit": SessionRuntime.leaf_check_turn_limit,
    "Decide": SessionRuntime.leaf_decide,
    "Prompt": SessionRuntime.leaf_prompt,
    "ModerateOutput": SessionRuntime.leaf_moderate_output,
    "Speak": SessionRuntime.leaf_speak,
}


def tick(runtime: SessionRuntime) -> Status:
    """One tree evaluation: run leaves from the cursor until one blocks.

    Returns the sequence status for this tick: RUNNING while waiting on
    input, SUCCESS when a full cycle (or termination) completed, FAILURE
    only on an unhandled leaf error.
    """
    if runtime.done:
        return Status.SUCCESS
    if runtime.config.session_timeout_s is not None:
        if time.time() - runtime.log.started_at > runtime.config.session_timeout_s:
            runtime._terminate(Termination.TIMEOUT)
            return Status.SUCCESS
    while True:
        name = LEAF_ORDER[runtime.cursor]
        try:
            status = _LEAVES[name](runtime)
        except Exception:
            logger.exception("unhandled failure in leaf %s", name)
            runtime._terminate(Termination.ERROR)
            return Status.FAILURE
        if status is Status.RUNNING:
            return Status.RUNNING
        if status is Status.FAILURE:
            # Terminal branches (refusal, outro, disconnect) set done.
            return Status.SUCCESS if runtime.done else Status.FAILURE
        runtime.cursor = (runtime.cursor + 1) % len(LEAF_ORDER)
        if runtime.cursor == 0:
            return Status.SUCCESS  # completed one full cycle


def run_session(config: SessionConfig, channel: CoacheeChannel, policy, backend,
                rupture_model: Optional[Callable] = None,
                scripts: Optional[Scripts] = None) -> SessionLog:
    """Run one session to termination and return its log."""
    runtime = SessionRuntime(config, channel, policy, backend,
                             rupture_model=rupture_model, scripts=scripts)
    runtime.start()
    pacer = TickPacer(config.tick_rate_hz) if config.realtime else None
    while not runtime.done:
        tick(runtime)
        if pacer is not None and not runtime.done:
            pacer.wait()
    return runtime.log
