"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Parameter
from .errors import UsageError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Parameter, **hyper) -> "AdamState":
        return cls(np.zeros(param.shape), np.zeros(param.shape), **hyper)


def adam_step(param: Parameter, state: AdamState) -> None:
    """One Adam update of ``param`` in place; clears ``param.grad``.

    Recurrence (t counted from 1)::

        m_t = b1 m + (1 - b1) g
        v_t = b2 v + (1 - b2) g^2
        p  -= lr * (m_t / (1 - b1^t)) / (sqrt(v_t / (1 - b2^t)) + eps)
    """
    if not param.trainable:
        raise UsageError(f"adam_step on non-trainable parameter {param.name!r}")
    if param.grad is None:
        raise UsageError(f"adam_step on {param.name!r} without a gradient")
    if state.m.shape != param.shape:
        raise UsageError(f"optimizer state shape {state.m.shape} != parameter {param.shape}")
    g = param.grad
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    param.data = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    param.grad = None


@dataclass
class Adam:
    """Adam over a fixed list of trainable parameters.

    A parameter that received no gradient in a step is updated with a zero
    gradient, which keeps all step counters in lock-step.
    """

    params: Sequence[Parameter]
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    states: list[AdamState] = field(init=False)

    def __post_init__(self):
        self.params = list(self.params)
        for p in self.params:
            if not p.trainable:
                raise UsageError(f"Adam given frozen parameter {p.name!r}")
        b1, b2 = self.betas
        self.states = [
            AdamState.for_param(p, lr=self.lr, beta1=b1, beta2=b2, eps=self.eps) for p in self.params
        ]

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            if p.grad is None:
                p.grad = np.zeros(p.shape)
            adam_step(p, s)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
