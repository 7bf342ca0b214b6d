"""Adam optimizer and the step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ShapeMismatch


@dataclass
class AdamState:
    """Per-parameter first/second moments and the step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float) -> "AdamState":
        state = cls(lr=lr)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        return state


def adam_step(
    state: AdamState,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray] | None = None,
) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter values.

    ``grads`` defaults to each parameter's accumulated ``.grad`` (which
    must then be present); parameters whose gradient is identically zero
    stay put.
    """
    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.value)
        if g.shape != p.value.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.value.shape}")
        m = state.m[name]
        v = state.v[name]
        if m.shape != p.value.shape:
            raise ShapeMismatch(f"{name}: moment {m.shape} vs param {p.value.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.value -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def lr_schedule(epoch: int, lr0: float) -> float:
    """Halve the base rate every 5 epochs: lr0 * 0.5 ** (epoch // 5)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * 0.5 ** (epoch // 5)
