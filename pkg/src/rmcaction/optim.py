"""Stochastic gradient descent with momentum and weight decay."""

from __future__ import annotations

from typing import Dict, List

import numpy as np

from .tensor import Parameter


class SGD:
    """Heavy-ball SGD: v <- mu*v + g + wd*p, then p <- p - lr*v.

    Parameters whose gradient buffer is unset are skipped entirely, so a
    parameter that never receives a gradient is never touched (not even
    by weight decay).
    """

    def __init__(self, params: List[Parameter], lr: float,
                 momentum: float = 0.0, weight_decay: float = 0.0):
        if len({id(p) for p in params}) != len(params):
            raise ValueError("SGD: a parameter appears more than once in the parameter list")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity: Dict[int, np.ndarray] = {}

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + p.data * p.dtype.type(self.weight_decay)
            if self.momentum:
                v = self._velocity.get(id(p))
                if v is None:
                    v = np.zeros_like(p.data)
                    self._velocity[id(p)] = v
                v *= p.dtype.type(self.momentum)
                v += g
            else:
                v = g
            p.data -= p.dtype.type(self.lr) * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
