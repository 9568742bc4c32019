"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(m=np.zeros(param.shape, np.float64), v=np.zeros(param.shape, np.float64), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One Adam update. Returns the new parameter array and advances ``state`` in place."""
    if state.t < 0:
        raise ValueError("Adam step counter must be >= 0")
    grad = np.asarray(grad)
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    if not np.isfinite(grad).all():
        raise FloatingPointError("non-finite gradient passed to adam_step")
    g = grad.astype(np.float64)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return (param - update).astype(param.dtype), state


@dataclass
class Adam:
    params: list
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = [p for p in self.params if p.requires_grad]

    def set_lr(self, lr: float) -> None:
        self.lr = lr
        for st in self.states.values():
            st.lr = lr

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            st = self.states.get(i)
            if st is None:
                st = AdamState.zeros_like(p.data, lr=self.lr, beta1=self.betas[0],
                                          beta2=self.betas[1], eps=self.eps)
                self.states[i] = st
            p.data, _ = adam_step(p.data, p.grad, st)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def total_grad_norm(params: Iterable[Tensor]) -> Optional[float]:
    sq = [float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None]
    return float(np.sqrt(sum(sq))) if sq else None
