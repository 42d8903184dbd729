"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np


class TrainingError(RuntimeError):
    """Training step cannot proceed (non-finite gradient or loss)."""


class Adam:
    """Adam with bias-corrected moments.

    ``params`` is a list of (name, Tensor) pairs; names are used in error
    reports and must be unique. The update is
    ``theta -= lr * m_hat / sqrt(v_hat + eps)``.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        names = [n for n, _ in params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.values) for _, p in self.params]
        self.v = [np.zeros_like(p.values) for _, p in self.params]

    def step(self):
        self.t += 1
        for i, (name, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.values)
            elif not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for parameter '{name}' at step {self.t}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1**self.t)
            v_hat = self.v[i] / (1.0 - self.beta2**self.t)
            p.values -= self.lr * m_hat / np.sqrt(v_hat + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None
