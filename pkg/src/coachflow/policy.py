"""Dialogue-flow policy: batch-pretrained Q-network with online adaptation.

The generic policy is trained offline on a logged transition corpus
(DQN, Double-DQN or fitted-Q iteration); per-coachee copies are then
fine-tuned turn by turn during live sessions, mixing fresh transitions
with decayed replay from the generic corpus.
"""

from __future__ import annotations

import logging
import math
import random
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import N_ACTIONS, STATE_DIM, DialogueAction, StateVector, Transition, decode_action
from .neural import Network, NetworkSpec, TrainConfig, dense, q_mse_loss
from .neural.optim import clip_gradients, make_optimizer
from .reward import DurationStats, RewardConfig

logger = logging.getLogger(__name__)

ALGORITHMS = ("dqn", "double-dqn", "nfq")


def q_network_spec(hidden: int = 64, seed: int = 0) -> NetworkSpec:
    return NetworkSpec(
        layers=(
            dense(STATE_DIM, hidden, "relu"),
            dense(hidden, hidden, "relu"),
            dense(hidden, N_ACTIONS, "linear"),
        ),
        loss="q_mse",
        seed=seed,
    )


class QNetwork:
    """Online Q-network with a lagged target copy for TD bootstrapping."""

    def __init__(self, spec: NetworkSpec, params=None):
        if spec.in_dim != STATE_DIM or spec.out_dim != N_ACTIONS:
            raise ValueError(
                f"Q-network must map {STATE_DIM} -> {N_ACTIONS}, got "
                f"{spec.in_dim} -> {spec.out_dim}"
            )
        self.spec = spec
        self.network = Network(spec)
        self.params = params if params is not None else self.network.init_params()
        self.target_params = Network.clone_params(self.params)
        self.sync_counter = 0

    def sync_target(self) -> None:
        self.target_params = Network.clone_params(self.params)

    def q_batch(self, states: np.ndarray, target: bool = False) -> np.ndarray:
        params = self.target_params if target else self.params
        return self.network.forward(params, states)

    def copy(self) -> "QNetwork":
        clone = QNetwork(self.spec, Network.clone_params(self.params))
        clone.target_params = Network.clone_params(self.target_params)
        clone.sync_counter = self.sync_counter
        return clone


def q_values(policy: QNetwork, state: StateVector) -> tuple[float, float, float]:
    """Q(s, .) for the three actions, indexed by action code."""
    row = np.asarray([state.values], dtype=float)
    out = policy.q_batch(row)[0]
    return (float(out[0]), float(out[1]), float(out[2]))


def select_action(qvals: Sequence[float], epsilon: float, rng: random.Random) -> DialogueAction:
    """Epsilon-greedy choice; greedy ties break toward the lowest action code."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if len(qvals) != N_ACTIONS or not all(math.isfinite(v) for v in qvals):
        raise ValueError("need three finite q-values")
    if epsilon > 0.0 and rng.random() < epsilon:
        return decode_action(rng.randrange(N_ACTIONS))
    best = max(range(N_ACTIONS), key=lambda i: (qvals[i], -i))
    return decode_action(best)


class ReplayBuffer:
    """Bounded FIFO of transitions."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)

    def append(self, transition: Transition) -> None:
        self._items.append(transition)

    def sample(self, k: int, rng: random.Random) -> list[Transition]:
        if not self._items:
            return []
        return [self._items[rng.randrange(len(self._items))] for _ in range(k)]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


@dataclass(frozen=True)
class PolicyCheckpoint:
    """Everything needed to reproduce a policy's decisions bit for bit."""

    algorithm: str
    spec: NetworkSpec
    params: dict
    duration_stats: DurationStats
    reward_config: RewardConfig
    metadata: dict = field(default_factory=dict)
    coachee_id: Optional[str] = None

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; valid: {ALGORITHMS}")

    def build(self) -> QNetwork:
        net = QNetwork(self.spec, Network.clone_params(self.params))
        net.sync_target()
        return net


def fork_for_coachee(generic: PolicyCheckpoint, coachee_id: str) -> PolicyCheckpoint:
    """Deep-copy the generic checkpoint as the starting point for one coachee."""
    if generic.coachee_id is not None:
        raise ValueError(
            f"checkpoint is already personalised to {generic.coachee_id!r}; fork the generic one"
        )
    return replace(
        generic,
        params=Network.clone_params(generic.params),
        metadata=dict(generic.metadata),
        coachee_id=coachee_id,
    )


def _stack_states(transitions: Sequence[Transition]) -> tuple[np.ndarray, ...]:
    states = np.asarray([t.state.values for t in transitions], dtype=float)
    actions = np.asarray([t.action.value for t in transitions], dtype=int)
    rewards = np.asarray([t.reward for t in transitions], dtype=float)
    next_states = np.asarray([t.next_state.values for t in transitions], dtype=float)
    dones = np.asarray([t.done for t in transitions], dtype=bool)
    return states, actions, rewards, next_states, dones


def _td_targets(policy: QNetwork, algo: str, rewards, next_states, dones, gamma: float):
    if algo == "double-dqn":
        online_next = policy.q_batch(next_states)
        chosen = online_next.argmax(axis=1)
        target_next = policy.q_batch(next_states, target=True)
        bootstrap = target_next[np.arange(len(chosen)), chosen]
    else:  # dqn and nfq bootstrap from the frozen network's max
        bootstrap = policy.q_batch(next_states, target=True).max(axis=1)
    targets = rewards + gamma * bootstrap
    targets[dones] = rewards[dones]
    return targets


@dataclass(frozen=True)
class BatchTrainResult:
    checkpoint: PolicyCheckpoint
    loss_curve: list[float]


def train_batch(
    corpus: Sequence[Transition],
    algo: str,
    config: TrainConfig,
    gamma: float,
    *,
    duration_stats: DurationStats,
    reward_config: RewardConfig | None = None,
    hidden: int = 64,
    seed: int = 0,
    target_sync_every: int = 100,
    nfq_iterations: int = 60,
    corpus_id: str = "unnamed",
) -> BatchTrainResult:
    """Pretrain the generic policy on a logged corpus.

    TD targets per algorithm:
      dqn        r + gamma * max_a' Q_target(s', a')
      double-dqn r + gamma * Q_target(s', argmax_a' Q_online(s', a'))
      nfq        full-batch fitted-Q iterations against a frozen copy
    Terminal transitions regress to the bare reward.
    """
    if algo not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algo!r}; valid: {ALGORITHMS}")
    if not corpus:
        raise ValueError("training corpus is empty")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")

    policy = QNetwork(q_network_spec(hidden=hidden, seed=seed))
    states, actions, rewards, next_states, dones = _stack_states(corpus)
    optimizer = make_optimizer(config.optimizer, config.learning_rate,
                               config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.shuffle_seed)
    curve: list[float] = []

    if algo == "nfq":
        for iteration in range(nfq_iterations):
            targets = _td_targets(policy, algo, rewards, next_states, dones, gamma)
            iter_loss = 0.0
            steps = 0
            for _ in range(config.epochs):
                order = rng.permutation(len(corpus))
                for start in range(0, len(corpus), config.batch_size):
                    idx = order[start:start + config.batch_size]
                    loss = _q_step(policy, optimizer, config, states[idx], actions[idx],
                                   targets[idx])
                    _check_finite(loss, iteration)
                    iter_loss += loss
                    steps += 1
            policy.sync_target()
            curve.append(iter_loss / steps)
    else:
        grad_steps = 0
        for epoch in range(config.epochs):
            order = rng.permutation(len(corpus))
            epoch_loss = 0.0
            batches = 0
            for start in range(0, len(corpus), config.batch_size):
                idx = order[start:start + config.batch_size]
                targets = _td_targets(policy, algo, rewards[idx], next_states[idx],
                                      dones[idx], gamma)
                loss = _q_step(policy, optimizer, config, states[idx], actions[idx], targets)
                _check_finite(loss, epoch)
                epoch_loss += loss
                batches += 1
                grad_steps += 1
                if grad_steps % target_sync_every == 0:
                    policy.sync_target()
            curve.append(epoch_loss / batches)
        policy.sync_target()

    checkpoint = PolicyCheckpoint(
        algorithm=algo,
        spec=policy.spec,
        params=policy.params,
        duration_stats=duration_stats,
        reward_config=reward_config or RewardConfig(),
        metadata={
            "corpus_id": corpus_id,
            "corpus_size": len(corpus),
            "seed": seed,
            "epochs": config.epochs,
            "gamma": gamma,
        },
    )
    return BatchTrainResult(checkpoint=checkpoint, loss_curve=curve)


def _q_step(policy: QNetwork, optimizer, config: TrainConfig, states, actions, targets) -> float:
    pred, caches = policy.network.forward_with_caches(policy.params, states)
    loss, d_pred = q_mse_loss(pred, actions, targets)
    grads = policy.network.backward(policy.params, caches, d_pred)
    grads = clip_gradients(grads, config.grad_clip_norm)
    optimizer.step(policy.params, grads)
    return loss


def _check_finite(loss: float, epoch: int) -> None:
    if not math.isfinite(loss):
        raise RuntimeError(f"batch Q-training diverged at epoch {epoch}: loss={loss}")


@dataclass
class OnlineConfig:
    """Per-turn fine-tuning knobs for the adaptive policy."""

    steps_per_turn: int = 4
    batch_size: int = 32
    # Small by design: per-coachee data arrives 8 turns per session, and the
    # fine-tune must still be visibly improving at session 4, not converged
    # within session 1.
    learning_rate: float = 3e-4
    grad_clip_norm: float = 5.0
    gamma: float = 0.9
    target_sync_every: int = 100
    buffer_capacity: int = 512
    epsilon_session1: float = 0.1
    epsilon_decay_per_session: float = 0.5
    generic_mix_initial: float = 0.5
    generic_mix_final: float = 0.2
    mix_decay_sessions: int = 4

    def epsilon_for_session(self, session_index: int) -> float:
        if session_index < 1:
            raise ValueError("session indices start at 1")
        return self.epsilon_session1 * self.epsilon_decay_per_session ** (session_index - 1)

    def generic_mix_for_session(self, session_index: int) -> float:
        if session_index < 1:
            raise ValueError("session indices start at 1")
        span = max(self.mix_decay_sessions - 1, 1)
        frac = min(session_index - 1, span) / span
        return self.generic_mix_initial + frac * (self.generic_mix_final - self.generic_mix_initial)


class AdaptivePolicy:
    """A per-coachee policy that keeps learning during sessions.

    Owns its Q-network exclusively; the generic corpus it replays from is
    read-only and shared.
    """

    def __init__(
        self,
        checkpoint: PolicyCheckpoint,
        config: OnlineConfig | None = None,
        generic_corpus: Sequence[Transition] = (),
        seed: int = 0,
    ):
        self.checkpoint = checkpoint
        self.config = config or OnlineConfig()
        self.q_network = checkpoint.build()
        self.buffer = ReplayBuffer(self.config.buffer_capacity)
        self.generic_corpus = list(generic_corpus)
        self.rng = random.Random(seed)
        self._optimizer = make_optimizer("adam", self.config.learning_rate)
        self._grad_steps = 0

    @property
    def coachee_id(self) -> Optional[str]:
        return self.checkpoint.coachee_id

    def q_values(self, state: StateVector) -> tuple[float, float, float]:
        return q_values(self.q_network, state)

    def select(self, state: StateVector, session_index: int) -> DialogueAction:
        eps = self.config.epsilon_for_session(session_index)
        return select_action(self.q_values(state), eps, self.rng)

    def update_online(self, transition: Transition) -> None:
        """Record one transition and take the configured gradient steps.

        Any numeric failure leaves the parameters untouched and is logged
        rather than raised; a live session must not die mid-turn.
        """
        self.buffer.append(transition)
        if self.config.steps_per_turn <= 0:
            return
        before = Network.clone_params(self.q_network.params)
        try:
            for _ in range(self.config.steps_per_turn):
                batch = self._sample_batch(transition.session_index)
                self._gradient_step(batch)
        except (FloatingPointError, RuntimeError) as err:
            logger.warning("online update failed, keeping previous params: %s", err)
            self.q_network.params = before
            self.q_network.sync_target()

    def _sample_batch(self, session_index: int) -> list[Transition]:
        mix = self.config.generic_mix_for_session(session_index) if self.generic_corpus else 0.0
        batch: list[Transition] = []
        for _ in range(self.config.batch_size):
            if self.generic_corpus and self.rng.random() < mix:
                batch.append(self.generic_corpus[self.rng.randrange(len(self.generic_corpus))])
            else:
                batch.extend(self.buffer.sample(1, self.rng))
        return batch

    def _gradient_step(self, batch: Sequence[Transition]) -> None:
        if not batch:
            return
        states, actions, rewards, next_states, dones = _stack_states(batch)
        targets = _td_targets(self.q_network, "dqn", rewards, next_states, dones,
                              self.config.gamma)
        pred, caches = self.q_network.network.forward_with_caches(self.q_network.params, states)
        loss, d_pred = q_mse_loss(pred, actions, targets)
        if not math.isfinite(loss):
            raise RuntimeError(f"online TD loss non-finite: {loss}")
        grads = self.q_network.network.backward(self.q_network.params, caches, d_pred)
        grads = clip_gradients(grads, self.config.grad_clip_norm)
        self._optimizer.step(self.q_network.params, grads)
        self._grad_steps += 1
        if self._grad_steps % self.config.target_sync_every == 0:
            self.q_network.sync_target()

    def to_checkpoint(self) -> PolicyCheckpoint:
        return replace(
            self.checkpoint,
            params=Network.clone_params(self.q_network.params),
            metadata=dict(self.checkpoint.metadata),
        )


class FrozenPolicy:
    """Greedy wrapper over a checkpoint that never learns."""

    def __init__(self, checkpoint: PolicyCheckpoint, epsilon: float = 0.0, seed: int = 0):
        self.checkpoint = checkpoint
        self.q_network = checkpoint.build()
        self.epsilon = epsilon
        self.rng = random.Random(seed)

    @property
    def coachee_id(self) -> Optional[str]:
        return self.checkpoint.coachee_id

    def q_values(self, state: StateVector) -> tuple[float, float, float]:
        return q_values(self.q_network, state)

    def select(self, state: StateVector, session_index: int) -> DialogueAction:
        return select_action(self.q_values(state), self.epsilon, self.rng)

    def update_online(self, transition: Transition) -> None:
        # Frozen by definition.
        return


def greedy_policy_table(policy: QNetwork, states: Iterable[StateVector]) -> list[DialogueAction]:
    rng = random.Random(0)
    return [select_action(q_values(policy, s), 0.0, rng) for s in states]
