"""Network assembly from declarative layer specs, plus loss functions.

A NetworkSpec is a serializable description (layer list + loss tag + seed)
whose seed fully determines initialization; a Network binds the spec to
concrete layer objects and walks forward/backward through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .layers import BiLSTMLayer, DenseLayer, GRULayer, LSTMLayer, PoolLastLayer

LOSSES = ("mse", "softmax_cross_entropy", "q_mse")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    activation: str = "linear"
    bidirectional: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "activation": self.activation,
            "bidirectional": self.bidirectional,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LayerSpec":
        return cls(
            kind=d["kind"],
            in_dim=int(d["in_dim"]),
            out_dim=int(d["out_dim"]),
            activation=d.get("activation", "linear"),
            bidirectional=bool(d.get("bidirectional", False)),
        )


def dense(in_dim: int, out_dim: int, activation: str = "linear") -> LayerSpec:
    return LayerSpec("dense", in_dim, out_dim, activation=activation)


def lstm(in_dim: int, hidden: int) -> LayerSpec:
    return LayerSpec("lstm", in_dim, hidden)


def gru(in_dim: int, hidden: int) -> LayerSpec:
    return LayerSpec("gru", in_dim, hidden)


def bilstm(in_dim: int, hidden: int) -> LayerSpec:
    # out_dim is the per-step output width, i.e. both directions.
    return LayerSpec("bilstm", in_dim, 2 * hidden)


def pool_last(in_dim: int, bidirectional: bool = False) -> LayerSpec:
    return LayerSpec("pool_last", in_dim, in_dim, bidirectional=bidirectional)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    loss: str = "mse"
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("network needs at least one layer")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; valid: {LOSSES}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"layer dims disagree: {prev.kind}({prev.out_dim}) -> {nxt.kind}({nxt.in_dim})"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def to_dict(self) -> dict[str, Any]:
        return {
            "layers": [l.to_dict() for l in self.layers],
            "loss": self.loss,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NetworkSpec":
        return cls(
            layers=tuple(LayerSpec.from_dict(l) for l in d["layers"]),
            loss=d["loss"],
            seed=int(d["seed"]),
        )


def _build_layer(index: int, spec: LayerSpec):
    name = f"{spec.kind}{index}"
    if spec.kind == "dense":
        return DenseLayer(name, spec.in_dim, spec.out_dim, spec.activation)
    if spec.kind == "lstm":
        return LSTMLayer(name, spec.in_dim, spec.out_dim)
    if spec.kind == "gru":
        return GRULayer(name, spec.in_dim, spec.out_dim)
    if spec.kind == "bilstm":
        if spec.out_dim % 2 != 0:
            raise ValueError("bilstm out_dim must be even (2 x hidden)")
        return BiLSTMLayer(name, spec.in_dim, spec.out_dim // 2)
    if spec.kind == "pool_last":
        return PoolLastLayer(name, spec.in_dim, bidirectional=spec.bidirectional)
    raise ValueError(f"unknown layer kind {spec.kind!r}")


class Network:
    """Concrete layer stack built from a NetworkSpec."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.layers = [_build_layer(i, s) for i, s in enumerate(spec.layers)]

    def init_params(self, seed: int | None = None) -> dict[str, dict[str, np.ndarray]]:
        rng = np.random.default_rng(self.spec.seed if seed is None else seed)
        return {layer.name: layer.init(rng) for layer in self.layers}

    def forward(self, params: dict[str, dict[str, np.ndarray]], x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_with_caches(params, x)
        return y

    def forward_with_caches(self, params, x: np.ndarray):
        caches = []
        out = x
        for layer in self.layers:
            out, cache = layer.forward(params[layer.name], out)
            caches.append(cache)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite values in forward pass output")
        return out, caches

    def backward(self, params, caches, d_out: np.ndarray) -> dict[str, dict[str, np.ndarray]]:
        grads: dict[str, dict[str, np.ndarray]] = {}
        grad = d_out
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad, layer_grads = layer.backward(params[layer.name], cache, grad)
            grads[layer.name] = layer_grads
        return grads

    @staticmethod
    def clone_params(params) -> dict[str, dict[str, np.ndarray]]:
        return {name: {k: v.copy() for k, v in p.items()} for name, p in params.items()}


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all elements; returns (loss, d_pred)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Cross-entropy over integer labels, averaged over the batch."""
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"labels must be ({n},), got {labels.shape}")
    probs = softmax_probs(logits)
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    d_logits = probs.copy()
    d_logits[np.arange(n), labels] -= 1.0
    return loss, d_logits / n


def q_mse_loss(pred: np.ndarray, actions: np.ndarray, targets: np.ndarray):
    """Squared TD error on the taken action only, averaged over the batch."""
    n = pred.shape[0]
    idx = np.arange(n)
    diff = pred[idx, actions] - targets
    loss = float(np.mean(diff * diff))
    d_pred = np.zeros_like(pred)
    d_pred[idx, actions] = 2.0 * diff / n
    return loss, d_pred
