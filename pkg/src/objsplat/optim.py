"""Adam-style first-order optimizer over named parameter arrays."""

from __future__ import annotations

import numpy as np


class Adam:
    """Standard Adam with per-parameter learning rates.

    Parameters are registered as (name, array, lr); step() applies in-place
    updates given a {name: gradient} mapping. Arrays keep their dtype.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._params: dict[str, np.ndarray] = {}
        self._lr: dict[str, float] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def register(self, name: str, array: np.ndarray, lr: float) -> None:
        self._params[name] = array
        self._lr[name] = lr
        self._m[name] = np.zeros_like(array, dtype=np.float32)
        self._v[name] = np.zeros_like(array, dtype=np.float32)

    def set_lr(self, name: str, lr: float) -> None:
        self._lr[name] = lr

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, g in grads.items():
            if name not in self._params:
                raise KeyError(f"unregistered parameter {name!r}")
            g = np.asarray(g, dtype=np.float32)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (self._lr[name] * (m / bias1) / (np.sqrt(v / bias2) + self.eps)).astype(
                self._params[name].dtype
            )
            self._params[name] -= update
