"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = 16,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` is re-evaluated from scratch for every perturbation, so it must be a
    deterministic closure over ``params``. For each parameter at most
    ``max_coords`` coordinates are probed (all of them when ``None``). The
    error per coordinate is ``|a - fd| / (|a| + |fd| + 1e-12)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise ArithmeticError("non-finite loss in grad_check")
    if loss.requires_grad:
        backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            up = f().item()
            flat[idx] = orig - eps
            down = f().item()
            flat[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ArithmeticError("non-finite loss in grad_check")
            fd = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[idx])
            err = abs(a - fd) / (abs(a) + abs(fd) + 1e-12)
            worst = max(worst, err)
    return worst
