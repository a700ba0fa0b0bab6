"""Discrete-time leaky integrate-and-fire dynamics with a triangular surrogate gradient.

    u_t = lam * u_{t-1} + I_t
    o_t = H(u_t - v_th)
    u_t <- u_t * (1 - o_t)          (hard reset)

H is the Heaviside step (H(0) = 1). Its derivative is replaced during
backpropagation by ``max(0, gamma - |u - v_th|) / gamma**2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .nn import Module
from .tensor import DimensionError, DomainError, Tensor


@dataclass(frozen=True)
class LifParams:
    lam: float = 0.5
    v_th: float = 1.0
    gamma: float = 0.3
    u0: float = 0.0
    detach_reset: bool = False

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"leak factor must satisfy 0 < lam < 1, got {self.lam}")
        if self.v_th <= 0:
            raise ValueError(f"threshold must be positive, got {self.v_th}")
        if self.gamma <= 0:
            raise ValueError(f"surrogate width gamma must be positive, got {self.gamma}")


@dataclass
class LifState:
    u: Tensor
    t: int = 0

    @classmethod
    def initial(cls, shape: tuple[int, ...], params: LifParams) -> "LifState":
        return cls(Tensor(np.full(shape, params.u0, dtype=tn.get_default_dtype())), 0)


def surrogate_grad_value(u, params: LifParams) -> np.ndarray:
    """Triangular pseudo-derivative of the spike function, evaluated elementwise."""
    ud = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64)
    g = params.gamma
    return (1.0 / (g * g)) * np.maximum(0.0, g - np.abs(ud - params.v_th))


def spike(u: Tensor, params: LifParams) -> Tensor:
    """Heaviside forward, triangular surrogate backward."""
    v_th = params.v_th
    return tn.custom_grad(
        u,
        lambda x: (x >= v_th).astype(x.dtype),
        lambda x: surrogate_grad_value(x, params),
        name="spike",
    )


def lif_step(state: LifState, current: Tensor, params: LifParams) -> tuple[LifState, Tensor]:
    if state.u.shape != current.shape:
        raise DimensionError(f"lif_step: input {current.shape} does not match membrane {state.u.shape}")
    if state.t < 0:
        raise DomainError(f"negative time step {state.t}")
    u = tn.add(tn.scale(state.u, params.lam), current)
    o = spike(u, params)
    keep = 1.0 - (o.detach() if params.detach_reset else o)
    return LifState(tn.mul(u, keep), state.t + 1), o


def lif_unroll(inputs: Sequence[Tensor], params: LifParams) -> list[Tensor]:
    if len(inputs) == 0:
        raise DomainError("lif_unroll needs at least one time step")
    state = LifState.initial(inputs[0].shape, params)
    spikes = []
    for current in inputs:
        state, o = lif_step(state, current, params)
        spikes.append(o)
    return spikes


class LIF(Module):
    """Spiking activation layer; membrane state lives only for one forward pass."""

    def __init__(self, params: LifParams):
        self.params = params
        self.state: LifState | None = None

    def reset(self) -> None:
        self.state = None

    def forward(self, current: Tensor) -> Tensor:
        if self.state is None:
            self.state = LifState.initial(current.shape, self.params)
        self.state, o = lif_step(self.state, current, self.params)
        return o
