"""Adam with named parameter groups."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8):
        """``groups`` maps a group name to ``(learning_rate, [parameters])``."""
        self.groups = {name: {"lr": float(lr), "params": list(params)} for name, (lr, params) in groups.items()}
        self.betas = betas
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def set_lr(self, name, lr):
        self.groups[name]["lr"] = float(lr)

    def lr(self, name):
        return self.groups[name]["lr"]

    def zero_grad(self):
        for g in self.groups.values():
            for p in g["params"]:
                p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for g in self.groups.values():
            lr = g["lr"]
            for p in g["params"]:
                if p.grad is None:
                    continue
                key = id(p)
                m = self._m.get(key)
                if m is None:
                    m = self._m[key] = np.zeros_like(p.data)
                    self._v[key] = np.zeros_like(p.data)
                v = self._v[key]
                m *= b1
                m += (1 - b1) * p.grad
                v *= b2
                v += (1 - b2) * p.grad * p.grad
                if lr == 0.0:
                    continue
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
