"""Adaptive moment estimation over named numpy parameter arrays."""
from __future__ import annotations

import numpy as np


class Adam:
    """Adam with one learning rate per parameter name.

    A learning rate may be a scalar or an array broadcastable to the
    parameter (the pose optimizer uses separate translation/rotation rates).
    `step` updates the arrays in `params` in place.
    """

    def __init__(self, lr: dict, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-15):
        self.lr = dict(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = {}
        self.v = {}
        self.t = 0

    def reset(self):
        self.m.clear()
        self.v.clear()
        self.t = 0

    def direction(self, grads: dict) -> dict:
        """Advance the moment estimates and return the update for each parameter."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        updates = {}
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(self.v[k] / bc2) + self.epsilon
            updates[k] = -np.asarray(self.lr[k]) / bc1 * self.m[k] / denom
        return updates

    def step(self, params: dict, grads: dict):
        for k, delta in self.direction(grads).items():
            params[k] += delta
