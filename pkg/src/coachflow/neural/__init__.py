"""Minimal neural substrate shared by the Q-network and rupture classifiers.

Dense, LSTM, GRU and bidirectional-LSTM layers with hand-written
backpropagation, Adam/SGD optimizers, and finite-difference gradient
verification. No autograd framework; every gradient is checkable.
"""

from .layers import (
    BiLSTMLayer,
    DenseLayer,
    GRULayer,
    LSTMLayer,
    PoolLastLayer,
)
from .network import (
    LayerSpec,
    Network,
    NetworkSpec,
    bilstm,
    dense,
    gru,
    lstm,
    mse_loss,
    pool_last,
    q_mse_loss,
    softmax_cross_entropy,
    softmax_probs,
)
from .optim import Adam, SGD, clip_gradients, global_norm
from .train import TrainConfig, TrainingDiverged, train
from .gradcheck import numeric_gradients, relative_error

__all__ = [
    "Adam",
    "BiLSTMLayer",
    "DenseLayer",
    "GRULayer",
    "LSTMLayer",
    "LayerSpec",
    "Network",
    "NetworkSpec",
    "PoolLastLayer",
    "SGD",
    "TrainConfig",
    "TrainingDiverged",
    "bilstm",
    "clip_gradients",
    "dense",
    "global_norm",
    "gru",
    "lstm",
    "mse_loss",
    "numeric_gradients",
    "pool_last",
    "q_mse_loss",
    "relative_error",
    "softmax_cross_entropy",
    "softmax_probs",
    "train",
]
