"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

Params = dict[str, dict[str, np.ndarray]]


def numeric_gradients(loss_fn: Callable[[Params], float], params: Params,
                      h: float = 1e-5) -> Params:
    """Central differences of loss_fn with respect to every parameter element."""
    grads: Params = {}
    for name, layer_params in params.items():
        grads[name] = {}
        for key, value in layer_params.items():
            g = np.zeros_like(value)
            flat = value.reshape(-1)
            g_flat = g.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                up = loss_fn(params)
                flat[i] = original - h
                down = loss_fn(params)
                flat[i] = original
                g_flat[i] = (up - down) / (2.0 * h)
            grads[name][key] = g
    return grads


def relative_error(analytic: Params, numeric: Params) -> float:
    """Norm-based relative error between two gradient sets."""
    diff_sq = 0.0
    norm_sq = 0.0
    for name, layer_grads in analytic.items():
        for key, a in layer_grads.items():
            n = numeric[name][key]
            diff_sq += float(np.sum((a - n) ** 2))
            norm_sq += float(np.sum(a * a) + np.sum(n * n))
    denom = np.sqrt(norm_sq)
    if denom < 1e-12:
        return np.sqrt(diff_sq)
    return float(np.sqrt(diff_sq) / denom)
