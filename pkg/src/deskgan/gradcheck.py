"""Central finite-difference gradient checking.

Checks run in float64: with h=1e-3 the float32 rounding error of a central
difference is of the same order as the 1e-4 relative tolerance.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def _leaves(arrays):
    # requires_grad so that functions which differentiate internally still see a graph
    return [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]


def numerical_grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], index: int,
                   h: float = 1e-3) -> np.ndarray:
    base = [np.array(a, dtype=np.float64) for a in inputs]
    target = base[index]
    out = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = target[i]
        target[i] = orig + h
        fp = fn(*_leaves(base)).item()
        target[i] = orig - h
        fm = fn(*_leaves(base)).item()
        target[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out


def analytic_grads(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray]) -> list:
    ts = _leaves(inputs)
    out = fn(*ts)
    out.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3,
              rtol: float = 1e-4, atol: float = 1e-6) -> tuple[bool, float]:
    """Compare analytic and numerical gradients of scalar ``fn`` for every input.

    Passes when each element satisfies |a - n| <= max(rtol * max(|a|, |n|), atol).
    Returns (passed, worst excess ratio) where a ratio <= 1 means within tolerance.
    """
    analytic = analytic_grads(fn, inputs)
    worst = 0.0
    for k in range(len(inputs)):
        num = numerical_grad(fn, inputs, k, h)
        a = analytic[k]
        bound = np.maximum(rtol * np.maximum(np.abs(a), np.abs(num)), atol)
        ratio = float(np.max(np.abs(a - num) / bound)) if a.size else 0.0
        worst = max(worst, ratio)
    return worst <= 1.0, worst
