"""SGD with momentum and coupled weight decay; cosine learning-rate schedule."""
from __future__ import annotations

import math

import numpy as np

from ..tensor import Parameter


def cosine_lr(epoch: float, lr0: float, lr_min: float, total: int) -> float:
    """lr_min + (lr0 - lr_min) * (1 + cos(pi * epoch / total)) / 2."""
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * epoch / total))


class SGD:
    """velocity = momentum * velocity + grad + weight_decay * param; param -= lr * velocity."""

    def __init__(self, params: list[Parameter], momentum: float = 0.937, weight_decay: float = 5e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        for p in self.params:
            v = self.velocity[id(p)]
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0

    def state(self) -> list[tuple[str, np.ndarray]]:
        return [(f"velocity/{p.name}", self.velocity[id(p)]) for p in self.params]

    def load_state(self, tensors) -> None:
        by_name = {p.name: p for p in self.params}
        for name, arr in tensors:
            if not name.startswith("velocity/"):
                continue
            p = by_name[name[len("velocity/"):]]
            self.velocity[id(p)] = np.array(arr, dtype=p.dtype)


def sgd_step(params: list[Parameter], lr: float, velocity: dict | None = None, momentum: float = 0.937,
             weight_decay: float = 5e-4) -> dict:
    """Functional single step; returns the (updated) velocity dict keyed by parameter id."""
    velocity = {} if velocity is None else velocity
    for p in params:
        v = velocity.setdefault(id(p), np.zeros_like(p.data))
        v *= momentum
        v += p.grad + weight_decay * p.data
        p.data -= lr * v
    return velocity
