"""AdamW with decoupled weight decay, and the step-halving learning-rate law."""
from __future__ import annotations

import numpy as np

from .params import ParamStore


def halving_lr(lr0: float, epoch: int, every: int = 100) -> float:
    """``lr0 * 0.5 ** floor(epoch / every)``."""
    if every <= 0:
        raise ValueError("halving interval must be positive")
    return lr0 * 0.5 ** (epoch // every)


class AdamW:
    def __init__(self, store: ParamStore, lr: float = 1e-4, betas=(0.5, 0.55),
                 eps: float = 1e-8, weight_decay: float = 1e-2):
        if lr <= 0 or eps <= 0 or weight_decay < 0:
            raise ValueError("lr and eps must be positive, weight_decay non-negative")
        if not all(0.0 <= b < 1.0 for b in betas):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        missing = [k for k, t in self.store.items() if t.grad is None]
        if missing:
            raise ValueError(f"no gradient for parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.store.items():
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        self.store.zero_grad()
