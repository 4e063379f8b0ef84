"""Session orchestrator tests: scaffold, moderation gate, turn limit, log."""

import json
import time
from collections import deque

import numpy as np
import pytest

from coachflow.core import DialogueAction, ExerciseKind
from coachflow.dialogue import (
    CoachFrame,
    CoacheeTurnInput,
    SessionConfig,
    SessionRuntime,
    Status,
    Termination,
    TickPacer,
    TurnRecord,
    load_scripts,
    run_session,
    scripted_lines,
    tick,
)
from coachflow.llmclient import (
    ACTION_PROMPTS,
    REFUSAL_UTTERANCE,
    LlmTransportError,
    StubBackend,
)
from coachflow.policy import (
    AdaptivePolicy,
    FrozenPolicy,
    OnlineConfig,
    PolicyCheckpoint,
    QNetwork,
    q_network_spec,
)
from coachflow.reward import DurationStats, RewardConfig


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def make_checkpoint(coachee_id=None, seed=3):
    spec = q_network_spec(hidden=16, seed=seed)
    net = QNetwork(spec)
    return PolicyCheckpoint(
        algorithm="dqn",
        spec=spec,
        params=net.params,
        duration_stats=DurationStats(mean_s=12.0, std_s=6.0),
        reward_config=RewardConfig(),
        metadata={},
        coachee_id=coachee_id,
    )


def capture_policy(steps_per_turn=0, epsilon=0.0, seed=11):
    """Adaptive policy that buffers transitions without learning."""
    config = OnlineConfig(steps_per_turn=steps_per_turn, epsilon_session1=epsilon)
    return AdaptivePolicy(make_checkpoint("c-1"), config=config, seed=seed)


def make_input(text="I had a calm walk in the park.", speech=12.0, silence=2.0,
               valence=(0.1, 0.2), rupture=False):
    return CoacheeTurnInput(
        transcript=text,
        speech_duration_s=speech,
        silence_duration_s=silence,
        valence_samples=tuple(valence),
        rupture_flag=rupture,
    )


def n_inputs(n, prefix="Episode"):
    return [make_input(text=f"{prefix} {i}: I enjoyed my morning tea.") for i in range(n)]


class QueueChannel:
    """In-memory channel: queued inputs, recorded frames."""

    def __init__(self, inputs=(), disconnect_after_polls=None):
        self.queue = deque(inputs)
        self.frames: list[CoachFrame] = []
        self.ended = None
        self.polls = 0
        self.disconnect_after_polls = disconnect_after_polls

    def speak(self, frame):
        self.frames.append(frame)

    def poll(self):
        self.polls += 1
        if self.queue:
            return self.queue.popleft()
        return None

    def end(self, reason):
        self.ended = reason

    def disconnected(self):
        return (self.disconnect_after_polls is not None
                and self.polls >= self.disconnect_after_polls)


class CountingBackend:
    """Wraps a backend, recording every moderated text and chat call."""

    def __init__(self, inner):
        self.inner = inner
        self.moderated: list[str] = []
        self.chats = 0

    def chat(self, messages):
        self.chats += 1
        return self.inner.chat(messages)

    def moderation(self, text):
        self.moderated.append(text)
        return self.inner.moderation(text)


class FlakyBackend(StubBackend):
    """Completion fails the first `failures` times, then behaves."""

    def __init__(self, failures, **kwargs):
        super().__init__(**kwargs)
        self.failures = failures
        self.attempts = 0

    def chat(self, messages):
        self.attempts += 1
        if self.attempts <= self.failures:
            raise LlmTransportError("injected outage")
        return super().chat(messages)


class ToxicBackend(StubBackend):
    """Generates an utterance the moderation stub must flag."""

    def chat(self, messages):
        return "You should punch the wall to let it out."


def default_config(**overrides):
    base = dict(
        exercise=ExerciseKind.GRATITUDE,
        coachee_id="c-1",
        listen_timeout_s=60.0,
        llm_backoff_s=0.0,
    )
    base.update(overrides)
    return SessionConfig(**base)


def run_default(inputs=9, policy=None, backend=None, **cfg):
    channel = QueueChannel(n_inputs(inputs) if isinstance(inputs, int) else inputs)
    policy = policy or capture_policy()
    backend = backend or StubBackend(seed=1)
    log = run_session(default_config(**cfg), channel, policy, backend)
    return log, channel, policy


# ---------------------------------------------------------------------------
# Scripts
# ---------------------------------------------------------------------------


class TestScripts:
    def test_gratitude_intro_names_the_exercise(self):
        assert "exercise on gratitude" in scripted_lines(ExerciseKind.GRATITUDE, "intro")

    def test_every_exercise_has_all_phases(self):
        for kind in ExerciseKind:
            for phase in ("intro", "first-question", "outro"):
                assert scripted_lines(kind, phase).strip()

    def test_intros_introduce_the_robot(self):
        for kind in ExerciseKind:
            assert scripted_lines(kind, "intro").startswith("Hi, my name is QT.")

    def test_deterministic(self):
        a = scripted_lines(ExerciseKind.SAVOURING, "outro")
        b = scripted_lines(ExerciseKind.SAVOURING, "outro")
        assert a == b

    def test_unknown_phase_rejected(self):
        with pytest.raises(ValueError, match="phase"):
            scripted_lines(ExerciseKind.SAVOURING, "closing")

    def test_missing_entry_fails_at_load(self, tmp_path):
        crippled = {
            "shared": {"reprompt": "x", "fallback": "y"},
            "exercises": {"savouring": {"system": "s", "intro": "i", "first_question": "q"}},
        }
        path = tmp_path / "scripts.json"
        path.write_text(json.dumps(crippled))
        with pytest.raises(ValueError, match="savouring.outro|missing"):
            load_scripts(path)

    def test_missing_shared_line_fails_at_load(self, tmp_path):
        full = load_scripts()
        crippled = {"shared": {"reprompt": "x"}, "exercises": full.exercises}
        path = tmp_path / "scripts.json"
        path.write_text(json.dumps(crippled))
        with pytest.raises(ValueError, match="fallback"):
            load_scripts(path)


# ---------------------------------------------------------------------------
# Full-session structure
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def completed():
    return run_default()


class TestSessionStructure:
    def test_exactly_eight_decision_turns(self, completed):
        log, _, _ = completed
        assert len(log.turns) == 8
        assert [t.turn_index for t in log.turns] == list(range(1, 9))

    def test_termination_completed(self, completed):
        log, channel, _ = completed
        assert log.termination is Termination.COMPLETED
        assert channel.ended is Termination.COMPLETED

    def test_scaffold_frames_bracket_the_turns(self, completed):
        log, channel, _ = completed
        kinds = [f.kind for f in channel.frames]
        assert kinds[0] == "intro"
        assert kinds[1] == "first-question"
        assert kinds[-1] == "outro"
        assert kinds[2:-1] == ["turn"] * 8

    def test_scripted_lines_match_log(self, completed):
        log, channel, _ = completed
        assert log.intro_utterance == scripted_lines(ExerciseKind.GRATITUDE, "intro")
        assert log.first_question_utterance == scripted_lines(
            ExerciseKind.GRATITUDE, "first-question")
        assert log.outro_utterance == scripted_lines(ExerciseKind.GRATITUDE, "outro")
        assert log.final_utterance == log.outro_utterance
        assert channel.frames[0].text == log.intro_utterance
        assert channel.frames[-1].text == log.outro_utterance

    def test_turn_frames_await_input_with_indices(self, completed):
        _, channel, _ = completed
        turn_frames = [f for f in channel.frames if f.kind == "turn"]
        assert [f.turn_index for f in turn_frames] == list(range(1, 9))
        assert all(f.awaiting_input for f in turn_frames)
        assert all(f.action is not None and f.q_values is not None for f in turn_frames)

    def test_baseline_from_first_answer(self, completed):
        log, _, _ = completed
        assert log.baseline is not None
        assert log.baseline.sample_count == 2
        assert log.baseline.value == pytest.approx(0.15)
        assert log.baseline_transcript.startswith("Episode 0")

    def test_transcripts_line_up_with_inputs(self, completed):
        log, _, _ = completed
        for i, record in enumerate(log.turns, start=1):
            assert record.coachee_transcript.startswith(f"Episode {i}")

    def test_first_state_has_zero_previous_action_block(self, completed):
        log, _, _ = completed
        first = log.turns[0].state.values
        assert first[8:] == (0.0, 0.0, 0.0)

    def test_later_states_carry_previous_action_one_hot(self, completed):
        log, _, _ = completed
        for prev, record in zip(log.turns, log.turns[1:]):
            block = record.state.values[8:]
            assert sum(block) == 1.0
            assert block[prev.action.value] == 1.0

    def test_coach_utterances_come_from_backend(self, completed):
        log, _, _ = completed
        for record in log.turns:
            assert record.coach_utterance.strip()
            assert not record.llm_fallback
            assert record.prompt == ACTION_PROMPTS[record.action]

    def test_rewards_are_components_sums(self, completed):
        log, _, _ = completed
        for record in log.turns:
            assert np.isfinite(record.reward.total)
            assert record.reward.total == pytest.approx(record.reward.fv + record.reward.sd)

    def test_transitions_buffered_with_done_only_at_last(self, completed):
        log, _, policy = completed
        transitions = list(policy.buffer)
        assert len(transitions) == 8
        assert [t.done for t in transitions] == [False] * 7 + [True]
        assert [t.turn_index for t in transitions] == list(range(1, 9))
        for record, tr in zip(log.turns, transitions):
            assert tr.reward == pytest.approx(record.reward.total)
            assert tr.action is record.action
            assert tr.state.values == record.state.values

    def test_observation_features_match_inputs(self, completed):
        log, _, _ = completed
        for record in log.turns:
            assert record.observation.speech_duration_s == 12.0
            assert record.observation.silence_duration_s == 2.0
            assert record.observation.exercise is ExerciseKind.GRATITUDE

    def test_timestamps_monotonic(self, completed):
        log, _, _ = completed
        stamps = [t.timestamp for t in log.turns]
        assert stamps == sorted(stamps)
        assert log.started_at <= log.ended_at


class TestTurnBound:
    @pytest.mark.parametrize("limit", [1, 3])
    def test_turn_limit_respected(self, limit):
        log, channel, _ = run_default(inputs=limit + 1, turn_limit=limit)
        assert len(log.turns) == limit
        assert log.termination is Termination.COMPLETED
        assert channel.frames[-1].kind == "outro"

    def test_never_exceeds_limit_with_surplus_inputs(self):
        log, channel, _ = run_default(inputs=20, turn_limit=2)
        assert len(log.turns) == 2
        # Surplus inputs stay queued; the session never polls them.
        assert len(channel.queue) == 20 - 3

    def test_turn_limit_validation(self):
        with pytest.raises(ValueError):
            default_config(turn_limit=0)


# ---------------------------------------------------------------------------
# Moderation gate
# ---------------------------------------------------------------------------


class TestModerationGate:
    def test_every_text_checked_once_per_direction(self):
        backend = CountingBackend(StubBackend(seed=1))
        log, _, _ = run_default(backend=backend)
        inputs_checked = [t for t in backend.moderated if t.startswith("Episode")]
        outputs_checked = [t for t in backend.moderated if not t.startswith("Episode")]
        assert len(backend.moderated) == 17  # 9 coachee texts + 8 coach texts
        assert sorted(inputs_checked) == sorted(
            [log.baseline_transcript] + [t.coachee_transcript for t in log.turns])
        assert sorted(outputs_checked) == sorted(t.coach_utterance for t in log.turns)

    def test_per_record_check_bookkeeping(self):
        log, _, _ = run_default()
        assert log.baseline_moderation_checks == ("input",)
        for record in log.turns:
            assert record.moderation_checks == ("output", "input")

    def test_flagged_input_speaks_verbatim_refusal_and_stops(self):
        inputs = n_inputs(4)
        inputs[2] = make_input(text="This week I punched someone in the face")
        log, channel, _ = run_default(inputs=inputs)
        assert log.termination is Termination.MODERATION_STOP
        assert log.final_utterance == REFUSAL_UTTERANCE
        assert channel.frames[-1].kind == "refusal"
        assert channel.frames[-1].text == REFUSAL_UTTERANCE
        assert channel.ended is Termination.MODERATION_STOP
        # Turn 2's decision never resolved into a logged turn.
        assert len(log.turns) == 1

    def test_flagged_baseline_stops_before_any_turn(self):
        inputs = [make_input(text="I want to hurt myself")] + n_inputs(3)
        log, channel, _ = run_default(inputs=inputs)
        assert log.termination is Termination.MODERATION_STOP
        assert log.turns == []
        assert channel.frames[-1].text == REFUSAL_UTTERANCE

    def test_moderation_transport_failure_fails_closed(self):
        backend = StubBackend(seed=1, moderation_error=True)
        log, channel, _ = run_default(backend=backend)
        assert log.termination is Termination.MODERATION_STOP
        assert log.final_utterance == REFUSAL_UTTERANCE
        assert log.turns == []

    def test_flagged_output_never_reaches_the_coachee(self):
        log, channel, _ = run_default(backend=ToxicBackend(seed=1))
        assert log.termination is Termination.MODERATION_STOP
        spoken = [f.text for f in channel.frames if f.kind == "turn"]
        assert spoken == []
        assert channel.frames[-1].text == REFUSAL_UTTERANCE


# ---------------------------------------------------------------------------
# LLM failure handling
# ---------------------------------------------------------------------------


class TestLlmFallback:
    def test_retries_then_success_is_not_fallback(self):
        backend = FlakyBackend(failures=2, seed=1)  # 2 retries configured
        log, _, _ = run_default(backend=backend)
        assert log.termination is Termination.COMPLETED
        assert not log.turns[0].llm_fallback
        assert log.turns[0].coach_utterance.strip()

    def test_exhausted_retries_fall_back_to_script(self):
        backend = StubBackend(seed=1, completion_error=True)
        log, channel, _ = run_default(backend=backend)
        scripts = load_scripts()
        assert log.termination is Termination.COMPLETED
        assert len(log.turns) == 8
        for record in log.turns:
            assert record.llm_fallback
            assert record.coach_utterance == scripts.fallback
            # Scripted fallback is pre-vetted: no output moderation call.
            assert record.moderation_checks == ("input",)

    def test_fallback_count_matches_attempts(self):
        backend = FlakyBackend(failures=10_000, seed=1)
        log, _, _ = run_default(backend=backend, turn_limit=2)
        # 1 + 2 retries per decision turn.
        assert backend.attempts == 3 * 2


# ---------------------------------------------------------------------------
# Replayability
# ---------------------------------------------------------------------------


class TestReplayability:
    def test_greedy_session_actions_match_argmax(self):
        log, _, _ = run_default(policy=capture_policy(epsilon=0.0))
        for record in log.turns:
            greedy = max(range(3), key=lambda i: (record.q_values[i], -i))
            assert record.action.value == greedy
            assert not record.explored
            assert record.epsilon == 0.0

    def test_explored_flag_explains_every_deviation(self):
        # High epsilon so both branches occur across sessions.
        log, _, _ = run_default(policy=capture_policy(epsilon=0.8, seed=5))
        for record in log.turns:
            greedy = max(range(3), key=lambda i: (record.q_values[i], -i))
            assert record.explored == (record.action.value != greedy)
            assert record.epsilon == 0.8

    def test_turn_records_round_trip_through_dicts(self):
        log, _, _ = run_default(turn_limit=2, inputs=3)
        for record in log.turns:
            clone = TurnRecord.from_dict(record.to_dict())
            assert clone.state.values == record.state.values
            assert clone.action is record.action
            assert clone.q_values == pytest.approx(record.q_values)
            assert clone.reward.total == pytest.approx(record.reward.total)
            assert clone.moderation_checks == record.moderation_checks
            assert clone.observation == record.observation

    def test_summary_dict_is_json_ready(self):
        log, _, _ = run_default(turn_limit=1, inputs=2)
        summary = log.to_summary_dict()
        json.dumps(summary)
        assert summary["turn_count"] == 1
        assert summary["termination"] == "completed"
        assert summary["exercise"] == ExerciseKind.GRATITUDE.value


# ---------------------------------------------------------------------------
# Waiting, timeouts, disconnects
# ---------------------------------------------------------------------------


class TestWaiting:
    def test_tick_runs_while_no_input(self):
        channel = QueueChannel([])
        runtime = SessionRuntime(default_config(), channel, capture_policy(),
                                 StubBackend(seed=1))
        runtime.start()
        assert tick(runtime) is Status.RUNNING
        assert tick(runtime) is Status.RUNNING
        assert not runtime.done
        assert len(channel.frames) == 2  # intro + first question only

    def test_listen_timeout_reprompts_once_then_counts_silence(self):
        channel = QueueChannel([])
        log = run_session(
            default_config(listen_timeout_s=0.01, turn_limit=1),
            channel, capture_policy(), StubBackend(seed=1))
        assert log.termination is Termination.COMPLETED
        reprompts = [f for f in channel.frames if f.kind == "reprompt"]
        assert len(reprompts) == 2  # one per awaited input (baseline + turn 1)
        assert log.baseline_transcript == ""
        assert log.baseline.value == 0.0
        record = log.turns[0]
        assert record.coachee_transcript == ""
        assert record.observation.speech_duration_s == 0.0
        assert record.observation.silence_duration_s == pytest.approx(0.01)
        # Empty transcript carries no text to moderate.
        assert record.moderation_checks == ("output",)

    def test_session_timeout_terminates(self):
        channel = QueueChannel([])
        log = run_session(
            default_config(session_timeout_s=0.0, listen_timeout_s=60.0),
            channel, capture_policy(), StubBackend(seed=1))
        assert log.termination is Termination.TIMEOUT
        assert channel.ended is Termination.TIMEOUT
        assert log.turns == []

    def test_disconnect_terminates(self):
        channel = QueueChannel(n_inputs(3), disconnect_after_polls=4)
        log = run_session(default_config(), channel, capture_policy(),
                          StubBackend(seed=1))
        assert log.termination is Termination.CLIENT_DISCONNECT
        assert len(log.turns) <= 3


class TestTickPacer:
    def test_holds_the_requested_rate(self):
        pacer = TickPacer(50.0)
        start = time.monotonic()
        for _ in range(50):
            pacer.wait()
        elapsed = time.monotonic() - start
        assert 0.85 <= elapsed <= 1.30  # 1 s nominal, 10% + scheduler slack

    def test_rejects_nonpositive_rate(self):
        with pytest.raises(ValueError):
            TickPacer(0.0)

    def test_config_rejects_nonpositive_rate(self):
        with pytest.raises(ValueError):
            default_config(tick_rate_hz=-1.0)


# ---------------------------------------------------------------------------
# Input validation
# ---------------------------------------------------------------------------


class TestInputValidation:
    def test_negative_duration_rejected(self):
        with pytest.raises(ValueError):
            make_input(speech=-1.0)

    def test_empty_valence_rejected(self):
        with pytest.raises(ValueError):
            CoacheeTurnInput(transcript="x", speech_duration_s=1.0,
                             silence_duration_s=0.0, valence_samples=())

    def test_valence_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            make_input(valence=(0.2, 1.5))

    def test_rupture_flag_propagates_into_observation(self):
        inputs = n_inputs(9)
        inputs[3] = make_input(text="Episode 3: something felt off.", rupture=True)
        log, _, _ = run_default(inputs=inputs)
        assert log.turns[2].rupture_flag is True
        assert log.turns[2].observation.rupture_flag is True
        assert all(not t.rupture_flag for i, t in enumerate(log.turns) if i != 2)
