"""Adam, cosine learning-rate annealing and gradient clipping."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam with optional decoupled weight decay.

    The decay is applied as ``p -= lr * weight_decay * p`` independently of
    the moment estimates, so a zero gradient moves parameters only through
    the decay term.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if lr <= 0:
            raise ValueError(f"Adam: learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros_like(m) if p.grad is None else p.grad.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            new = p.data.astype(np.float64)
            if self.weight_decay:
                new = new - lr * self.weight_decay * new
            p.data = (new - update).astype(p.dtype)

    def state_dict(self) -> dict:
        state = {"step_count": np.asarray(self.step_count)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m/{i}"] = m.copy()
            state[f"v/{i}"] = v.copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for i in range(len(self.params)):
            if state[f"m/{i}"].shape != self.m[i].shape:
                raise ValueError(f"optimizer slot {i}: shape {state[f'm/{i}'].shape} != {self.m[i].shape}")
            self.m[i] = np.array(state[f"m/{i}"], dtype=np.float64)
            self.v[i] = np.array(state[f"v/{i}"], dtype=np.float64)


def cosine_lr(t: float, total: float, lr_max: float, lr_min: float) -> float:
    """Cosine annealing from ``lr_max`` at t=0 to ``lr_min`` at t=total."""
    if total <= 0:
        return lr_max
    w = 0.5 * (1.0 + math.cos(math.pi * t / total))
    return w * lr_max + (1.0 - w) * lr_min


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.vdot(p.grad.astype(np.float64), p.grad.astype(np.float64)))
    norm = math.sqrt(sq)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.grad.dtype)
    return norm
