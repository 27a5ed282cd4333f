"""Finite-difference verification of analytic gradients.

Checks replay the computation in float64 with central differences; training
itself stays in float32.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def grad_check(fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-3) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    fn must map one tensor to a scalar tensor; any other tensors it closes
    over should already be float64 so the whole graph replays in 64-bit.
    """
    base = np.asarray(point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = fn(x)
    out.backward()
    analytic = x.grad.copy()

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(Tensor(base.copy())).item()
        flat[i] = orig - step
        lo = fn(Tensor(base.copy())).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * step)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(rel.max())
