"""AdamW with decoupled weight decay, plus the warmup/cosine schedule.

Moment state is keyed by parameter name, so optimizer behaviour does not
depend on dict iteration order or object identity.
"""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .errors import ConfigError
from .tensor import Parameter


class AdamW:
    """Decoupled-weight-decay Adam over a fixed set of Parameters."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names handed to AdamW")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        """Apply one update from current gradients; `lr` overrides the stored rate."""
        rate = self.lr if lr is None else float(lr)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            # Decay is decoupled: applied to the pre-step value, not the gradient.
            p.data -= rate * self.weight_decay * p.data + rate * update


def warmup_cosine_lr(step_index: int, total_steps: int, base_lr: float,
                     warmup_frac: float = 0.05) -> float:
    """Learning rate for step_index in [0, total_steps): linear warmup then cosine decay."""
    if total_steps <= 0:
        raise ConfigError("schedule needs total_steps > 0")
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step_index < warmup:
        return base_lr * (step_index + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = (step_index - warmup) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
