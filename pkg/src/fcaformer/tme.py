"""Token merge and enhancement.

Two parallel depthwise convolutions over the post-attention token grid: a
large-kernel strided one that summarises the grid into a few cross tokens for
later blocks, and a small stride-1 one that mixes neighbouring tokens before
the FFN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import CrossTokenSet, TokenGrid
from .core import Module, Tensor, buffer, param
from .core import functional as F


@dataclass(frozen=True)
class TmeConfig:
    merge_kernel: int = 7
    merge_stride: int = 4
    enhance_kernel: int = 3
    residual: bool = True

    def __post_init__(self):
        if self.merge_stride < 1:
            raise ValueError("merge stride must be >= 1")
        if self.merge_kernel % 2 == 0 or self.enhance_kernel % 2 == 0:
            raise ValueError("TME kernels must be odd")

    def merged_side(self, side: int) -> int:
        pad = self.merge_kernel // 2
        return (side + 2 * pad - self.merge_kernel) // self.merge_stride + 1


class TmeParams(Module):
    """Merge weights start as a uniform average, enhance weights at zero.

    ``learnable_merge=False`` keeps the averaging kernel as a frozen buffer and
    ``enhance=False`` drops the enhancement branch; together they give the
    plain pooled cross tokens of the ablation's pre-TME rows.
    """

    def __init__(self, d: int, cfg: TmeConfig = TmeConfig(), merge: bool = True,
                 learnable_merge: bool = True, enhance: bool = True, dtype=np.float32):
        k, e = cfg.merge_kernel, cfg.enhance_kernel
        if merge:
            avg = np.full((d, k, k), 1.0 / (k * k), dtype=dtype)
            self.merge_weights = param(avg) if learnable_merge else buffer(avg)
        else:
            self.merge_weights = None
        if enhance:
            w = np.zeros((d, e, e), dtype=dtype)
            if not cfg.residual:
                w[:, e // 2, e // 2] = 1.0  # literal form starts as identity
            self.enhance_weights = param(w)
        else:
            self.enhance_weights = None


def _to_map(y: TokenGrid) -> tuple[Tensor, bool]:
    t = y.tokens
    batched = t.ndim == 3
    if not batched:
        t = t.reshape(1, *t.shape)
    b = t.shape[0]
    return t.transpose(0, 2, 1).reshape(b, y.d, y.grid_h, y.grid_w), batched


def _to_tokens(fmap: Tensor, batched: bool) -> Tensor:
    b, c, h, w = fmap.shape
    t = fmap.reshape(b, c, h * w).transpose(0, 2, 1)
    return t if batched else t.reshape(h * w, c)


def token_merge(y: TokenGrid, params: TmeParams, cfg: TmeConfig, current_depth: int) -> CrossTokenSet:
    if params.merge_weights is None:
        raise ValueError("this TME has no merge branch")
    fmap, batched = _to_map(y)
    merged = F.conv2d_depthwise(fmap, params.merge_weights, stride=cfg.merge_stride,
                                padding=cfg.merge_kernel // 2)
    _, _, h, w = merged.shape
    return CrossTokenSet(_to_tokens(merged, batched), current_depth, h, w)


def token_enhance(y: TokenGrid, params: TmeParams, cfg: TmeConfig) -> TokenGrid:
    if params.enhance_weights is None:
        return y
    fmap, batched = _to_map(y)
    mixed = _to_tokens(F.conv2d_depthwise(fmap, params.enhance_weights, stride=1,
                                          padding=cfg.enhance_kernel // 2), batched)
    z = y.tokens + mixed if cfg.residual else mixed
    return TokenGrid(z, y.grid_h, y.grid_w)
