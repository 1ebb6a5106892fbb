"""SGD with momentum over a named parameter dict."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class NonFiniteError(FloatingPointError):
    pass


class SGD:
    def __init__(self, lr: float, momentum: float = 0.9, clip_norm: float | None = 1.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> float:
        """Apply one update from ``.grad`` and clear the gradients; returns the pre-clip norm."""
        names = [k for k in sorted(params) if params[k].grad is not None]
        norm = float(np.sqrt(sum(float(np.sum(params[k].grad ** 2)) for k in names)))
        if not np.isfinite(norm):
            raise NonFiniteError("non-finite gradient norm")
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for k in names:
            t = params[k]
            g = t.grad * scale if scale != 1.0 else t.grad
            v = self.velocity.get(k)
            v = g if v is None else self.momentum * v + g
            self.velocity[k] = v
            t.data = t.data - self.lr * v
            t.grad = None
        for k in names:
            if not np.all(np.isfinite(params[k].data)):
                raise NonFiniteError(f"parameter {k} became non-finite")
        return norm
