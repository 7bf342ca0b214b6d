"""Finite-difference verification of analytic gradients.

The numeric side recomputes the scalar objective with one parameter entry
nudged by +/- step (central differences); the analytic side is one
backward pass.  Relative error uses max(|analytic|, |numeric|, 1e-3) as
the denominator: gradients below 1e-3 in magnitude are then effectively
compared with absolute tolerance rel_tol * 1e-3, which sits far above the
central-difference noise floor (~1e-10 for unit-scale objectives) while
still flagging any real backward-rule mistake, whose error scales with
the gradient itself.  Structurally-zero gradients (e.g. a bias that a
softmax cancels out) pass instead of tripping on FD roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .autodiff import Tensor, backward, zero_grads


@dataclass
class GradCheckResult:
    n_checked: int = 0
    max_rel_error: float = 0.0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def check_gradients(
    build: Callable[[], Tensor],
    params: dict[str, Tensor],
    rel_tol: float = 1e-4,
    step: float = 1e-5,
    max_entries_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare backward-pass gradients of ``build()`` against central
    finite differences.

    ``build`` must construct a fresh scalar graph from the current
    parameter values on every call.  Checks every entry of every tensor,
    or ``max_entries_per_tensor`` sampled entries when set (sampling needs
    ``rng``).
    """
    zero_grads(params.values())
    root = build()
    backward(root)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
                for name, p in params.items()}

    result = GradCheckResult()
    for name, p in params.items():
        flat = p.value.reshape(-1)
        size = flat.shape[0]
        if max_entries_per_tensor is not None and size > max_entries_per_tensor:
            if rng is None:
                raise ValueError("sampled checking requires an rng")
            indices = rng.choice(size, size=max_entries_per_tensor, replace=False)
        else:
            indices = range(size)
        a_flat = analytic[name].reshape(-1)
        for i in indices:
            original = flat[i]
            flat[i] = original + step
            up = float(build().value)
            flat[i] = original - step
            down = float(build().value)
            flat[i] = original
            numeric = (up - down) / (2.0 * step)
            a = float(a_flat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            result.n_checked += 1
            result.max_rel_error = max(result.max_rel_error, rel)
            if rel >= rel_tol:
                result.failures.append(
                    f"{name}[{i}]: analytic {a:.6e} vs numeric {numeric:.6e} (rel {rel:.2e})"
                )
    return result
