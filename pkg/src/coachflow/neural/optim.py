"""Parameter updates: SGD and Adam, with global-norm gradient clipping."""

from __future__ import annotations

import numpy as np

Params = dict[str, dict[str, np.ndarray]]


def global_norm(grads: Params) -> float:
    total = 0.0
    for layer_grads in grads.values():
        for g in layer_grads.values():
            total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_gradients(grads: Params, max_norm: float) -> Params:
    """Scale all gradients down if their global norm exceeds max_norm."""
    if max_norm <= 0:
        raise ValueError("clip norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {name: {k: g * scale for k, g in lg.items()} for name, lg in grads.items()}


class SGD:
    def __init__(self, learning_rate: float):
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        self.learning_rate = learning_rate

    def step(self, params: Params, grads: Params) -> None:
        for name, layer_params in params.items():
            for key in layer_params:
                layer_params[key] -= self.learning_rate * grads[name][key]


class Adam:
    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: Params = {}
        self._v: Params = {}

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, layer_params in params.items():
            m_layer = self._m.setdefault(name, {})
            v_layer = self._v.setdefault(name, {})
            for key, value in layer_params.items():
                g = grads[name][key]
                m = m_layer.setdefault(key, np.zeros_like(value))
                v = v_layer.setdefault(key, np.zeros_like(value))
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                m_hat = m / (1 - b1 ** self.t)
                v_hat = v / (1 - b2 ** self.t)
                value -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(tag: str, learning_rate: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8):
    if tag == "sgd":
        return SGD(learning_rate)
    if tag == "adam":
        return Adam(learning_rate, beta1, beta2, eps)
    raise ValueError(f"unknown optimizer {tag!r}")
