"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def gradient_check(
    build_loss: Callable[[], Tensor],
    params: dict[str, Tensor],
    probes: int = 100,
    step: float = 1e-3,
    rng: np.random.Generator | None = None,
    scale_floor: float = 1e-2,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build_loss`` must recompute the forward pass from the current parameter
    values on every call. The relative error at a probed coordinate is
    ``|a - n| / max(scale_floor, |a|, |n|)``; the floor turns the comparison
    into an absolute bound for near-zero gradients, where central-difference
    truncation noise would otherwise dominate.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    names = sorted(params)
    worst = 0.0
    for _ in range(probes):
        name = names[rng.integers(len(names))]
        p = params[name]
        flat = rng.integers(p.data.size)
        original = p.data.flat[flat]
        p.data.flat[flat] = original + step
        f_plus = build_loss().item()
        p.data.flat[flat] = original - step
        f_minus = build_loss().item()
        p.data.flat[flat] = original
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = analytic[name].flat[flat]
        rel = abs(a - numeric) / max(scale_floor, abs(a), abs(numeric))
        worst = max(worst, rel)
    return worst
