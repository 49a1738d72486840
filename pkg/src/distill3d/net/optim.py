"""SGD with momentum, Adam and the polynomial learning-rate schedule."""
from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from ..errors import ShapeError
from .autodiff import Tensor


def _check(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
    for name, p in params.items():
        g = grads.get(name)
        if g is None or np.shape(g) != p.value.shape:
            raise ShapeError(f"gradient for {name} has shape {np.shape(g)}, expected {p.value.shape}")


class SGD:
    """``v <- momentum * v + g``; ``p <- p - lr * v``."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float) -> None:
        _check(params, grads)
        for name, p in params.items():
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p.value)
            v *= self.momentum
            v += grads[name]
            p.value -= lr * v


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float) -> None:
        _check(params, grads)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p.value))
            v = self.v.setdefault(name, np.zeros_like(p.value))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def sgd_momentum_step(optimizer: SGD, params, grads, lr: float) -> None:
    optimizer.step(params, grads, lr)


def adam_step(optimizer: Adam, params, grads, lr: float) -> None:
    optimizer.step(params, grads, lr)


def make_optimizer(kind: str, momentum: float = 0.9):
    if kind == "sgd":
        return SGD(momentum)
    if kind == "adam":
        return Adam()
    raise ValueError(f"unknown optimizer {kind!r}")


def poly_lr(step: int, total: int, lr0: float, power: float = 0.9) -> float:
    """``lr0 * (1 - step/total) ** power``, reaching 0 at and after ``total``."""
    if total <= 0 or step >= total:
        return 0.0
    return lr0 * math.pow(1.0 - step / total, power)
