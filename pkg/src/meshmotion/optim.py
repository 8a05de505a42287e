"""Adaptive moment estimation over named parameter tensors.

Moments live in plain dicts keyed by parameter name so checkpoints can carry
them; updates rebind ``.data`` (tensors themselves are treated as immutable
values inside any one graph).
"""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        for p in self.params:
            if p.name is None:
                raise ValueError("Adam needs named parameters for checkpointing")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[p.name] = b1 * self.m[p.name] + (1 - b1) * g
            v = self.v[p.name] = b2 * self.v[p.name] + (1 - b2) * (g * g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def load_state(self, m, v, t):
        for p in self.params:
            if p.name in m:
                self.m[p.name] = m[p.name].copy()
                self.v[p.name] = v[p.name].copy()
        self.t = int(t)
