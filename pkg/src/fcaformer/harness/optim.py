"""AdamW with linear warmup and cosine decay."""

from __future__ import annotations

import math

import numpy as np

from ..core import Tensor

_NO_DECAY = ("pos_table", "depth_bias", "alpha")


def cosine_lr(step: int, total: int, base_lr: float, warmup: int, min_ratio: float = 0.0) -> float:
    if total <= 0:
        return base_lr
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    progress = min(max(progress, 0.0), 1.0)
    return base_lr * (min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * progress)))


class AdamW:
    """Decoupled weight decay; vectors (norms, biases, scales, bias tables) are not decayed."""

    def __init__(self, named_params, lr: float = 1e-3, weight_decay: float = 0.05,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        named = [item if isinstance(item, tuple) else ("", item) for item in named_params]
        self.params: list[Tensor] = [p for _, p in named]
        self.decay = [p.ndim >= 2 and not name.endswith(_NO_DECAY) for name, p in named]
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v, decay in zip(self.params, self.m, self.v, self.decay):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if lr == 0.0:
                continue
            if self.weight_decay and decay:
                p.data *= 1 - lr * self.weight_decay
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
