"""Central finite-difference gradient checking.

Checked leaves are temporarily promoted to float64 so the comparison
measures the backward formulas, not float32 rounding in the forward pass.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|); 0 when both are identically zero."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-3,
    max_entries: Optional[int] = 24,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Worst relative error between backprop and central differences.

    ``fn`` re-runs the forward pass from the current leaf values and returns
    a scalar. For large tensors only ``max_entries`` random coordinates are
    probed.
    """
    rng = rng or np.random.default_rng(0)
    saved = [t.data for t in tensors]
    try:
        for t in tensors:
            t.data = t.data.astype(np.float64)
            t.grad = None
        loss = fn()
        loss.backward()
        worst = 0.0
        for t in tensors:
            analytic_full = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            n = flat.size
            idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
            analytic = analytic_full.reshape(-1)[idx]
            numeric = np.empty(len(idx))
            for j, k in enumerate(idx):
                orig = flat[k]
                flat[k] = orig + h
                up = float(fn().data)
                flat[k] = orig - h
                down = float(fn().data)
                flat[k] = orig
                numeric[j] = (up - down) / (2.0 * h)
            worst = max(worst, relative_error(analytic, numeric))
        return worst
    finally:
        for t, d in zip(tensors, saved):
            t.data = d
            t.grad = None
