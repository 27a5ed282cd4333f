"""Named parameters and deterministic SGD with momentum and weight decay."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class Parameter:
    """A named trainable tensor; frozen parameters are never updated."""

    name: str
    tensor: Tensor
    frozen: bool = False


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


class SgdOptimizer:
    """SGD with momentum; velocity buffers start at zero, one per parameter."""

    def __init__(self, params: Sequence[Parameter], config: OptimizerConfig | None = None):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.config = config or OptimizerConfig()
        self.velocity = {
            p.name: np.zeros_like(p.tensor.data) for p in self.params
        }

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def step(self) -> None:
        """g <- grad + wd*w; v <- mu*v + g; w <- w - lr*v. Frozen params untouched."""
        cfg = self.config
        for p in self.params:
            if p.frozen:
                continue
            g = p.tensor.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient for parameter {p.name!r}")
            w = p.tensor.data
            g = g + w * np.asarray(cfg.weight_decay, dtype=w.dtype)
            v = self.velocity[p.name]
            v *= np.asarray(cfg.momentum, dtype=w.dtype)
            v += g
            if cfg.learning_rate:  # lr=0 must be a bitwise no-op (signed zeros)
                w -= v * np.asarray(cfg.learning_rate, dtype=w.dtype)
