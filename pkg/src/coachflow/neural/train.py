"""Generic supervised training loop over a Network."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import Network, mse_loss, q_mse_loss, softmax_cross_entropy
from .optim import clip_gradients, global_norm, make_optimizer


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 50
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float = 5.0
    shuffle_seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch
        self.loss = loss


def _loss_and_grad(network: Network, params, x, target):
    pred, caches = network.forward_with_caches(params, x)
    tag = network.spec.loss
    if tag == "mse":
        loss, d_pred = mse_loss(pred, target)
    elif tag == "softmax_cross_entropy":
        loss, d_pred = softmax_cross_entropy(pred, target)
    elif tag == "q_mse":
        actions, targets = target
        loss, d_pred = q_mse_loss(pred, actions, targets)
    else:  # pragma: no cover - NetworkSpec validates the tag
        raise ValueError(tag)
    grads = network.backward(params, caches, d_pred)
    return loss, grads


def train(network: Network, dataset: tuple[np.ndarray, np.ndarray],
          config: TrainConfig, params=None):
    """Fit the network on (inputs, targets); returns (params, per-epoch loss curve).

    Targets are integer labels for the cross-entropy loss and arrays shaped
    like the output for MSE. The (seed, data order) pair fully determines
    the fitted parameters.
    """
    x, targets = dataset
    n = x.shape[0]
    if n == 0:
        raise ValueError("dataset is empty")
    if params is None:
        params = network.init_params()
    optimizer = make_optimizer(config.optimizer, config.learning_rate,
                               config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.shuffle_seed)
    curve: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                loss, grads = _loss_and_grad(network, params, x[idx], targets[idx])
            except FloatingPointError:
                raise TrainingDiverged(epoch, float("nan")) from None
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            with np.errstate(over="ignore"):
                if not math.isfinite(global_norm(grads)):
                    raise TrainingDiverged(epoch, loss)
            grads = clip_gradients(grads, config.grad_clip_norm)
            optimizer.step(params, grads)
            epoch_loss += loss
            batches += 1
        curve.append(epoch_loss / batches)
    return params, curve
