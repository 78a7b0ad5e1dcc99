"""Central finite-difference gradient checks at float64 precision."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, backward


def relative_error(analytic, numeric, floor=1e-10):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def gradcheck(fn, inputs, wrt=None, eps=1e-6, max_entries=None, n_directions=0, rng=None):
    """Compare analytic gradients of a scalar ``fn(*tensors)`` with central differences.

    ``inputs`` are arrays (promoted to float64). Gradients are checked for
    the indices in ``wrt`` (default: all). ``max_entries`` limits each
    input to a random subset of coordinates; ``n_directions`` adds random
    directional-derivative probes. Returns the worst relative error.
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a, requires_grad=(k in wrt)) for k, a in enumerate(arrays)]
    loss = fn(*tensors)
    if loss.data.dtype != np.float64:
        raise TypeError("gradcheck needs the function to stay in float64")
    backward(loss)

    def f_at(k, arr):
        args = [Tensor(arr if i == k else a) for i, a in enumerate(arrays)]
        return float(fn(*args).data)

    worst = 0.0
    for k in wrt:
        analytic = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(arrays[k])
        flat_idx = np.arange(arrays[k].size)
        if max_entries is not None and arrays[k].size > max_entries:
            flat_idx = rng.choice(arrays[k].size, max_entries, replace=False)
        numeric = np.empty(len(flat_idx))
        for n, idx in enumerate(flat_idx):
            plus, minus = arrays[k].copy(), arrays[k].copy()
            plus.ravel()[idx] += eps
            minus.ravel()[idx] -= eps
            numeric[n] = (f_at(k, plus) - f_at(k, minus)) / (2 * eps)
        worst = max(worst, relative_error(analytic.ravel()[flat_idx], numeric))
        for _ in range(n_directions):
            v = rng.standard_normal(arrays[k].shape)
            num = (f_at(k, arrays[k] + eps * v) - f_at(k, arrays[k] - eps * v)) / (2 * eps)
            worst = max(worst, relative_error(np.sum(analytic * v), num))
    return worst
