"""Adam with per-parameter learning rates and row remapping for densification."""
from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lrs: dict[str, float], betas=(0.9, 0.999), eps: float = 1e-15):
        self.lrs = dict(lrs)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def delta(self, name: str, grad: np.ndarray) -> np.ndarray:
        """Advance the moments for ``name`` and return the step to add to the parameter."""
        grad = np.asarray(grad, dtype=np.float64)
        if name not in self.m or self.m[name].shape != grad.shape:
            self.m[name] = np.zeros_like(grad)
            self.v[name] = np.zeros_like(grad)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name]
        v = self.v[name]
        m *= self.b1
        m += (1 - self.b1) * grad
        v *= self.b2
        v += (1 - self.b2) * grad * grad
        m_hat = m / (1 - self.b1**t)
        v_hat = v / (1 - self.b2**t)
        return -self.lrs[name] * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if self.lrs.get(name, 0.0) == 0.0:
                continue
            params[name] += self.delta(name, g)

    def remap_rows(self, names, index: np.ndarray, n_new: int = 0) -> None:
        """Keep state rows ``index`` (in order) and append ``n_new`` zero rows."""
        for name in names:
            if name not in self.m:
                continue
            for store in (self.m, self.v):
                kept = store[name][index]
                pad = np.zeros((n_new,) + kept.shape[1:])
                store[name] = np.concatenate([kept, pad])
