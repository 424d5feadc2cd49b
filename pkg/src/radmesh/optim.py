"""Adam over named numpy parameters, updated in place."""
from __future__ import annotations

import math

import numpy as np

from . import _kernels


class Adam:
    """Adam with per-parameter epsilon.

    ``params`` maps names to arrays that are modified in place by :meth:`step`.
    ``eps`` may be a float or a callable ``name -> float``.
    """

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.99), eps=1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self._eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def eps_for(self, name: str) -> float:
        return self._eps(name) if callable(self._eps) else self._eps

    def step(self, grads: dict, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        step_size = lr * math.sqrt(corr2) / corr1
        for name, g in grads.items():
            if name not in self.params:
                continue
            _kernels.adam_update(self.params[name], np.ascontiguousarray(g, dtype=np.float64),
                                 self.m[name], self.v[name], b1, b2, step_size,
                                 self.eps_for(name) * math.sqrt(corr2))


def grid_nerf_eps(name: str) -> float:
    """Grid tables use a tiny epsilon, network weights the usual one."""
    return 1e-15 if name.endswith(".grid") else 1e-8


def exp_decay(step: int, total: int, lr_start: float, lr_end: float) -> float:
    if total <= 1:
        return lr_start
    return lr_start * (lr_end / lr_start) ** (min(step, total) / total)
