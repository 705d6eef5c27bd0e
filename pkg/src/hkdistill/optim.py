"""Optimizers over ModelParams: SGD with momentum for the student stack,
Adam for the meta-net. Updates are plain numpy; differentiability is only
needed inside the one-step pseudo update, which lives on the tape instead.
"""

from __future__ import annotations

import numpy as np

from .models import ModelParams


class SGD:
    def __init__(self, params: ModelParams, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0) -> None:
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {name: np.zeros_like(arr) for name, arr in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, arr in self.params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * arr
            v = self._velocity[name]
            v *= self.momentum
            v += g
            arr -= self.lr * v


class Adam:
    def __init__(self, params: ModelParams, lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(arr) for name, arr in params.items()}
        self._v = {name: np.zeros_like(arr) for name, arr in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        b1, b2 = self.betas
        self.t += 1
        for name, arr in self.params.items():
            g = grads[name]
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            arr -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
