"""Adam optimizer with per-parameter moment state keyed by name."""

from __future__ import annotations

import numpy as np

__all__ = ["Adam"]


class Adam:
    """Adam with bias-corrected first and second moment estimates.

    Update per parameter: ``p -= lr * m_hat / (sqrt(v_hat) + epsilon)``
    where ``m_hat = m / (1 - beta1^t)`` and ``v_hat = v / (1 - beta2^t)``.
    Moments are stored per parameter name so optimizer state can be
    checkpointed and restored bit-exactly.
    """

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {lr}")
        if not (0.0 <= beta1 < 1.0) or not (0.0 <= beta2 < 1.0):
            raise ValueError(f"betas must be in [0, 1), got {beta1}, {beta2}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.params = list(named_params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)

    def state_arrays(self):
        """Moment arrays in parameter order, for checkpointing."""
        out = []
        for name, _ in self.params:
            out.append((name + ".m", self.m[name]))
        for name, _ in self.params:
            out.append((name + ".v", self.v[name]))
        return out

    def load_state_array(self, key, array):
        name, kind = key.rsplit(".", 1)
        store = {"m": self.m, "v": self.v}[kind]
        if name not in store:
            raise KeyError(key)
        if store[name].shape != array.shape:
            raise ValueError(
                f"optimizer state {key}: shape {array.shape} != {store[name].shape}")
        store[name] = array.astype(store[name].dtype, copy=True)
