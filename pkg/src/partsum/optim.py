"""First-order parameter updates."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


class SGD:
    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[k]
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v

    def state(self) -> dict[str, np.ndarray]:
        out = {f"velocity/{k}": v.copy() for k, v in self.velocity.items()}
        out["t"] = np.array([float(self.t)])
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k in self.velocity:
            self.velocity[k] = state[f"velocity/{k}"].copy()
        self.t = int(state["t"][0])


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": a.copy() for k, a in self.m.items()}
        out.update({f"v/{k}": a.copy() for k, a in self.v.items()})
        out["t"] = np.array([float(self.t)])
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = state[f"m/{k}"].copy()
            self.v[k] = state[f"v/{k}"].copy()
        self.t = int(state["t"][0])
