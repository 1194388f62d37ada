"""AdamW with decoupled weight decay, operating on ModelParams grad slots."""
from __future__ import annotations

import numpy as np

from ..numerics import ModelParams


class AdamW:
    def __init__(self, params: ModelParams, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(s.value) for k, s in params.slots.items()}
        self.v = {k: np.zeros_like(s.value) for k, s in params.slots.items()}

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, slot in self.params.slots.items():
            g = slot.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            slot.value *= 1.0 - self.lr * self.weight_decay
            slot.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
