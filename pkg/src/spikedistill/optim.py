"""SGD with momentum or Adam, L2 weight decay folded into the gradient, cosine learning-rate decay
and optional clipping of the global gradient norm."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import Parameter


@dataclass
class OptimizerState:
    step: int = 0
    buffers: list[dict[str, np.ndarray]] = field(default_factory=list)


class Optimizer:
    def __init__(self, params: list[Parameter], kind: str = "sgd-momentum", lr: float = 0.05,
                 momentum: float = 0.9, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 5e-4, total_steps: int | None = None, schedule: str = "cosine",
                 clip_norm: float = 0.0):
        if kind not in ("sgd-momentum", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        if schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {schedule!r}")
        self.params = list(params)
        self.kind, self.base_lr, self.momentum = kind, lr, momentum
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.total_steps, self.schedule = total_steps, schedule
        self.clip_norm = clip_norm
        self.state = OptimizerState(0, [{} for _ in self.params])

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant" or not self.total_steps:
            return self.base_lr
        frac = min(step, self.total_steps) / self.total_steps
        return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * frac))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params if p.grad is not None))

    def step(self) -> None:
        lr = self.lr_at(self.state.step)
        self.state.step += 1
        t = self.state.step
        scale = 1.0
        if self.clip_norm > 0:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for p, buf in zip(self.params, self.state.buffers):
            if p.grad is None:
                continue
            g = p.grad * scale if scale != 1.0 else p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.kind == "sgd-momentum":
                v = buf.get("momentum")
                v = g.copy() if v is None else self.momentum * v + g
                buf["momentum"] = v
                p.data = p.data - lr * v
            else:
                b1, b2 = self.betas
                m = buf.get("m", np.zeros_like(p.data))
                s = buf.get("v", np.zeros_like(p.data))
                m = b1 * m + (1 - b1) * g
                s = b2 * s + (1 - b2) * g * g
                buf["m"], buf["v"] = m, s
                m_hat = m / (1 - b1 ** t)
                s_hat = s / (1 - b2 ** t)
                p.data = p.data - lr * m_hat / (np.sqrt(s_hat) + self.eps)
