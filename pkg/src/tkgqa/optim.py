"""Gradient-descent update rules for named parameter collections."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError


def update_step(params: dict[str, Tensor], learning_rate: float) -> None:
    """Plain gradient descent: p <- p - lr * grad, skipping grad-less tensors."""
    if learning_rate <= 0:
        raise ConfigError("learning rate must be positive")
    for p in params.values():
        if p.grad is not None:
            p.data -= learning_rate * p.grad


class Adam:
    """Adam with bias correction over a fixed set of named tensors."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, learning_rate: float) -> None:
        if learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (p.grad * p.grad)
            m_hat = m / correction1
            v_hat = v / correction2
            p.data -= learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


def make_optimizer(kind: str, params: dict[str, Tensor]):
    """Return a ``step(lr)`` callable for the configured optimizer kind."""
    if kind == "adam":
        return Adam(params).step
    if kind == "sgd":
        return lambda lr: update_step(params, lr)
    raise ConfigError(f"unknown optimizer {kind!r}")
