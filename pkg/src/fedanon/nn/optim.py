"""In-place optimizers over a ParameterSet."""

from __future__ import annotations

import numpy as np

from .params import GradientUpdate, ParameterSet, check_aligned


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParameterSet, grads: GradientUpdate) -> None:
        check_aligned(params, grads)
        for name, arr in params.items():
            arr -= arr.dtype.type(self.lr) * grads[name].astype(arr.dtype, copy=False)
        params.version += 1


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParameterSet, grads: GradientUpdate) -> None:
        check_aligned(params, grads)
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, arr in params.items():
            g = grads[name].astype(arr.dtype, copy=False)
            if name not in self.m:
                self.m[name] = np.zeros_like(arr)
                self.v[name] = np.zeros_like(arr)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            arr -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(arr.dtype, copy=False)
        params.version += 1


def optimizer_step(params: ParameterSet, grads: GradientUpdate, optimizer: SGD | Adam) -> None:
    optimizer.step(params, grads)
