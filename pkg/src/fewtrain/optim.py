"""Plain SGD and decoupled-weight-decay Adam over diffcore leaf tensors.

Optimizers are bound to a fixed parameter list at construction and read
gradients from each tensor's .grad slot. Updates replace .data with fresh
arrays so previously recorded graphs are never mutated.
"""

from __future__ import annotations

import numpy as np

from .diffcore import Tensor
from .errors import UsageError


class SGD:
    def __init__(self, params: list[Tensor], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise UsageError("SGD.step: parameter has no gradient")
            update = self.lr * p.grad
            if self.weight_decay:
                update = update + self.lr * self.weight_decay * p.data
            p.data = p.data - update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class AdamW:
    """Adam with decoupled weight decay; defaults match common practice."""

    def __init__(self, params: list[Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise UsageError("AdamW.step: parameter has no gradient")
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / bias1
            v_hat = self.v[i] / bias2
            step = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                step = step + self.lr * self.weight_decay * p.data
            p.data = p.data - step

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
