"""Layer implementations: forward passes and hand-written backward passes.

Conventions:
  - Tensor2 is (batch, features), Tensor3 is (batch, time, features).
  - Recurrent layers return the full hidden trajectory (batch, time, hidden).
  - LSTM gate order in the fused weight matrices is i, f, g, o; GRU is r, z, n.
  - backward() takes the upstream gradient with the same shape as the layer
    output and returns (d_input, {param: gradient}).
"""

from __future__ import annotations

import numpy as np


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Clipped for overflow safety; saturates identically either way.
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


class DenseLayer:
    """Fully connected layer with an optional pointwise activation."""

    ACTIVATIONS = ("linear", "relu", "tanh")

    def __init__(self, name: str, in_dim: int, out_dim: int, activation: str = "linear"):
        if activation not in self.ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        limit = np.sqrt(6.0 / (self.in_dim + self.out_dim))
        return {
            "W": rng.uniform(-limit, limit, size=(self.in_dim, self.out_dim)),
            "b": np.zeros(self.out_dim),
        }

    def forward(self, params: dict[str, np.ndarray], x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"{self.name}: expected (batch, {self.in_dim}), got {x.shape}")
        z = x @ params["W"] + params["b"]
        if self.activation == "relu":
            y = np.maximum(z, 0.0)
        elif self.activation == "tanh":
            y = np.tanh(z)
        else:
            y = z
        return y, (x, z, y)

    def backward(self, params: dict[str, np.ndarray], cache, dy: np.ndarray):
        x, z, y = cache
        if self.activation == "relu":
            dz = dy * (z > 0.0)
        elif self.activation == "tanh":
            dz = dy * (1.0 - y * y)
        else:
            dz = dy
        grads = {"W": x.T @ dz, "b": dz.sum(axis=0)}
        return dz @ params["W"].T, grads


def _recurrent_init(rng: np.random.Generator, in_dim: int, hidden: int, gates: int,
                    forget_slice: slice | None = None) -> dict[str, np.ndarray]:
    limit = 1.0 / np.sqrt(hidden)
    b = np.zeros(gates * hidden)
    if forget_slice is not None:
        b[forget_slice] = 1.0
    return {
        "Wx": rng.uniform(-limit, limit, size=(in_dim, gates * hidden)),
        "Wh": rng.uniform(-limit, limit, size=(hidden, gates * hidden)),
        "b": b,
    }


def lstm_forward(params: dict[str, np.ndarray], x: np.ndarray, hidden: int):
    """Run an LSTM over (B, T, I); returns the hidden trajectory (B, T, H)."""
    B, T, _ = x.shape
    h = np.zeros((B, hidden))
    c = np.zeros((B, hidden))
    outputs = np.empty((B, T, hidden))
    steps = []
    for t in range(T):
        xt = x[:, t, :]
        a = xt @ params["Wx"] + h @ params["Wh"] + params["b"]
        i = _sigmoid(a[:, :hidden])
        f = _sigmoid(a[:, hidden:2 * hidden])
        g = np.tanh(a[:, 2 * hidden:3 * hidden])
        o = _sigmoid(a[:, 3 * hidden:])
        c_new = f * c + i * g
        tanh_c = np.tanh(c_new)
        h_new = o * tanh_c
        steps.append((xt, h, c, i, f, g, o, tanh_c))
        h, c = h_new, c_new
        outputs[:, t, :] = h
    return outputs, steps


def lstm_backward(params: dict[str, np.ndarray], x: np.ndarray, steps, d_out: np.ndarray,
                  hidden: int):
    """BPTT through lstm_forward; d_out is the gradient of the trajectory."""
    B, T, _ = x.shape
    dWx = np.zeros_like(params["Wx"])
    dWh = np.zeros_like(params["Wh"])
    db = np.zeros_like(params["b"])
    dx = np.zeros_like(x)
    dh_next = np.zeros((B, hidden))
    dc_next = np.zeros((B, hidden))
    for t in reversed(range(T)):
        xt, h_prev, c_prev, i, f, g, o, tanh_c = steps[t]
        dh = d_out[:, t, :] + dh_next
        dc = dc_next + dh * o * (1.0 - tanh_c * tanh_c)
        do = dh * tanh_c
        df = dc * c_prev
        di = dc * g
        dg = dc * i
        da = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        dWx += xt.T @ da
        dWh += h_prev.T @ da
        db += da.sum(axis=0)
        dx[:, t, :] = da @ params["Wx"].T
        dh_next = da @ params["Wh"].T
        dc_next = dc * f
    return dx, {"Wx": dWx, "Wh": dWh, "b": db}


class LSTMLayer:
    """Long short-term memory layer; forget-gate bias initialized to 1."""

    def __init__(self, name: str, in_dim: int, hidden: int):
        self.name = name
        self.in_dim = in_dim
        self.hidden = hidden

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return _recurrent_init(rng, self.in_dim, self.hidden, gates=4,
                               forget_slice=slice(self.hidden, 2 * self.hidden))

    def forward(self, params, x: np.ndarray):
        if x.ndim != 3 or x.shape[2] != self.in_dim:
            raise ValueError(f"{self.name}: expected (B, T, {self.in_dim}), got {x.shape}")
        outputs, steps = lstm_forward(params, x, self.hidden)
        return outputs, (x, steps)

    def backward(self, params, cache, dy: np.ndarray):
        x, steps = cache
        return lstm_backward(params, x, steps, dy, self.hidden)


class GRULayer:
    """Gated recurrent unit layer.

    Candidate uses the gated form n = tanh(x Wx_n + b_n + r * (h Wh_n)).
    """

    def __init__(self, name: str, in_dim: int, hidden: int):
        self.name = name
        self.in_dim = in_dim
        self.hidden = hidden

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return _recurrent_init(rng, self.in_dim, self.hidden, gates=3)

    def forward(self, params, x: np.ndarray):
        if x.ndim != 3 or x.shape[2] != self.in_dim:
            raise ValueError(f"{self.name}: expected (B, T, {self.in_dim}), got {x.shape}")
        B, T, _ = x.shape
        H = self.hidden
        h = np.zeros((B, H))
        outputs = np.empty((B, T, H))
        steps = []
        for t in range(T):
            xt = x[:, t, :]
            ax = xt @ params["Wx"] + params["b"]
            ah = h @ params["Wh"]
            r = _sigmoid(ax[:, :H] + ah[:, :H])
            u = _sigmoid(ax[:, H:2 * H] + ah[:, H:2 * H])
            nh = ah[:, 2 * H:]
            n = np.tanh(ax[:, 2 * H:] + r * nh)
            h_new = (1.0 - u) * n + u * h
            steps.append((xt, h, r, u, n, nh))
            h = h_new
            outputs[:, t, :] = h
        return outputs, (x, steps)

    def backward(self, params, cache, dy: np.ndarray):
        x, steps = cache
        B, T, _ = x.shape
        H = self.hidden
        dWx = np.zeros_like(params["Wx"])
        dWh = np.zeros_like(params["Wh"])
        db = np.zeros_like(params["b"])
        dx = np.zeros_like(x)
        dh_next = np.zeros((B, H))
        for t in reversed(range(T)):
            xt, h_prev, r, u, n, nh = steps[t]
            dh = dy[:, t, :] + dh_next
            du = dh * (h_prev - n)
            dn = dh * (1.0 - u)
            dh_prev = dh * u
            dn_pre = dn * (1.0 - n * n)
            dr = dn_pre * nh
            dnh = dn_pre * r
            dr_pre = dr * r * (1.0 - r)
            du_pre = du * u * (1.0 - u)
            dax = np.concatenate([dr_pre, du_pre, dn_pre], axis=1)
            dah = np.concatenate([dr_pre, du_pre, dnh], axis=1)
            dWx += xt.T @ dax
            db += dax.sum(axis=0)
            dWh += h_prev.T @ dah
            dx[:, t, :] = dax @ params["Wx"].T
            dh_next = dh_prev + dah @ params["Wh"].T
        return dx, {"Wx": dWx, "Wh": dWh, "b": db}


class BiLSTMLayer:
    """Bidirectional LSTM; output at each step concatenates both directions."""

    def __init__(self, name: str, in_dim: int, hidden: int):
        self.name = name
        self.in_dim = in_dim
        self.hidden = hidden
        self.out_dim = 2 * hidden

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        fs = slice(self.hidden, 2 * self.hidden)
        fwd = _recurrent_init(rng, self.in_dim, self.hidden, gates=4, forget_slice=fs)
        bwd = _recurrent_init(rng, self.in_dim, self.hidden, gates=4, forget_slice=fs)
        return {
            "Wx_f": fwd["Wx"], "Wh_f": fwd["Wh"], "b_f": fwd["b"],
            "Wx_b": bwd["Wx"], "Wh_b": bwd["Wh"], "b_b": bwd["b"],
        }

    @staticmethod
    def _split(params, suffix):
        return {"Wx": params[f"Wx_{suffix}"], "Wh": params[f"Wh_{suffix}"], "b": params[f"b_{suffix}"]}

    def forward(self, params, x: np.ndarray):
        if x.ndim != 3 or x.shape[2] != self.in_dim:
            raise ValueError(f"{self.name}: expected (B, T, {self.in_dim}), got {x.shape}")
        x_rev = x[:, ::-1, :]
        out_f, steps_f = lstm_forward(self._split(params, "f"), x, self.hidden)
        out_b_rev, steps_b = lstm_forward(self._split(params, "b"), x_rev, self.hidden)
        out_b = out_b_rev[:, ::-1, :]
        y = np.concatenate([out_f, out_b], axis=2)
        return y, (x, x_rev, steps_f, steps_b)

    def backward(self, params, cache, dy: np.ndarray):
        x, x_rev, steps_f, steps_b = cache
        H = self.hidden
        dy_f = dy[:, :, :H]
        dy_b_rev = dy[:, ::-1, H:]
        dx_f, grads_f = lstm_backward(self._split(params, "f"), x, steps_f, dy_f, H)
        dx_b_rev, grads_b = lstm_backward(self._split(params, "b"), x_rev, steps_b, dy_b_rev, H)
        dx = dx_f + dx_b_rev[:, ::-1, :]
        grads = {
            "Wx_f": grads_f["Wx"], "Wh_f": grads_f["Wh"], "b_f": grads_f["b"],
            "Wx_b": grads_b["Wx"], "Wh_b": grads_b["Wh"], "b_b": grads_b["b"],
        }
        return dx, grads


class PoolLastLayer:
    """Collapse a sequence to the final step of each direction.

    For unidirectional input this is the last time step. For bidirectional
    input the forward half is taken at the last step and the backward half
    at the first step, where each direction has consumed the full sequence.
    """

    def __init__(self, name: str, in_dim: int, bidirectional: bool = False):
        if bidirectional and in_dim % 2 != 0:
            raise ValueError("bidirectional pooling needs an even feature width")
        self.name = name
        self.in_dim = in_dim
        self.bidirectional = bidirectional

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {}

    def forward(self, params, x: np.ndarray):
        if x.ndim != 3 or x.shape[2] != self.in_dim:
            raise ValueError(f"{self.name}: expected (B, T, {self.in_dim}), got {x.shape}")
        if self.bidirectional:
            half = self.in_dim // 2
            y = np.concatenate([x[:, -1, :half], x[:, 0, half:]], axis=1)
        else:
            y = x[:, -1, :]
        return y, x.shape

    def backward(self, params, cache, dy: np.ndarray):
        shape = cache
        dx = np.zeros(shape)
        if self.bidirectional:
            half = self.in_dim // 2
            dx[:, -1, :half] = dy[:, :half]
            dx[:, 0, half:] = dy[:, half:]
        else:
            dx[:, -1, :] = dy
        return dx, {}
