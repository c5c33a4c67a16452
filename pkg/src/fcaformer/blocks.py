"""FcaFormer blocks and stages, plus the ConvNet pieces of the hybrid models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import (
    AttentionBias,
    CmhaParams,
    CrossTokenSet,
    LsfVector,
    TokenGrid,
    cmha_forward,
)
from .core import Module, Tensor, param, trunc_normal
from .core import functional as F
from .tme import TmeConfig, TmeParams, token_enhance, token_merge

POLICIES = ("all_previous", "skip_last")
LN_EPS = 1e-6


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32):
        self.gamma = param(np.ones(d, dtype=dtype))
        self.beta = param(np.zeros(d, dtype=dtype))

    def __call__(self, t: Tensor) -> Tensor:
        return F.layernorm(t, self.gamma, self.beta, LN_EPS)


def _ln_channels(x: Tensor, norm: LayerNorm) -> Tensor:
    return norm(x.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)


def _channel_bias(b: Tensor) -> Tensor:
    return b.reshape(1, b.shape[0], 1, 1)


class FfnParams(Module):
    def __init__(self, d: int, ratio: int, rng: np.random.Generator, dtype=np.float32):
        hidden = ratio * d
        self.w1 = param(trunc_normal(rng, (hidden, d), dtype=dtype))
        self.b1 = param(np.zeros(hidden, dtype=dtype))
        self.w2 = param(trunc_normal(rng, (d, hidden), dtype=dtype))
        self.b2 = param(np.zeros(d, dtype=dtype))
        self.ratio = ratio

    def __call__(self, t: Tensor) -> Tensor:
        return F.linear(F.gelu(F.linear(t, self.w1, self.b1)), self.w2, self.b2)


@dataclass(frozen=True)
class FcaOptions:
    """Switches for the forward-cross-attention mechanisms of a block.

    ``use_cross`` enables cross tokens at all; without ``use_tme`` they come
    from a frozen 7x7 average pool and there is no enhancement branch;
    ``use_lsf`` adds the learnable channel scale applied to them.
    """

    use_cross: bool = True
    use_lsf: bool = True
    use_tme: bool = True
    lsf_per_source: bool = False
    qkv_bias: bool = False
    cross_history: str = "all_previous"
    tme: TmeConfig = field(default_factory=TmeConfig)

    def __post_init__(self):
        if self.use_lsf and not self.use_cross:
            raise ValueError("learnable scale factors need cross tokens")
        if self.cross_history not in POLICIES:
            raise ValueError(f"unknown cross history policy {self.cross_history!r}")


class FcaBlock(Module):
    def __init__(self, d: int, heads: int, grid: tuple[int, int], depth: int, max_depth_offset: int,
                 rng: np.random.Generator, opts: FcaOptions = FcaOptions(), ffn_ratio: int = 4,
                 dtype=np.float32):
        self.depth = depth
        self.grid = tuple(grid)
        self.opts = opts
        self.norm1 = LayerNorm(d, dtype)
        self.cmha = CmhaParams(d, heads, rng, qkv_bias=opts.qkv_bias, dtype=dtype)
        self.lsf = (
            LsfVector(d, per_source=opts.lsf_per_source, max_depth_offset=max_depth_offset, dtype=dtype)
            if opts.use_lsf else None
        )
        self.bias = AttentionBias(heads, grid[0], grid[1], max_depth_offset, rng,
                                  with_depth=opts.use_cross, dtype=dtype)
        self.tme = TmeParams(d, opts.tme, merge=opts.use_cross, learnable_merge=opts.use_tme,
                             enhance=opts.use_tme, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.ffn = FfnParams(d, ffn_ratio, rng, dtype)

    @property
    def d(self) -> int:
        return self.cmha.d


@dataclass(frozen=True)
class CrossTokenCache:
    """Cross-token sets produced so far within one stage, oldest first."""

    sets: tuple = ()
    policy: str = "all_previous"

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown cross history policy {self.policy!r}")

    def visible(self, depth: int) -> list[CrossTokenSet]:
        """Sets block ``depth`` attends to, newest source first."""
        limit = depth - 1 if self.policy == "all_previous" else depth - 2
        return [cs for cs in reversed(self.sets) if cs.source_depth <= limit]

    def extended(self, cs: CrossTokenSet) -> "CrossTokenCache":
        if self.sets and cs.source_depth <= self.sets[-1].source_depth:
            raise ValueError("cross-token sources must increase within a stage")
        return CrossTokenCache(self.sets + (cs,), self.policy)

    @property
    def total_tokens(self) -> int:
        return sum(cs.m for cs in self.sets)


def fca_block_forward(x: TokenGrid, cache: CrossTokenCache, block: FcaBlock
                      ) -> tuple[TokenGrid, CrossTokenCache, Tensor]:
    """One FcaFormer block; returns new regular tokens, the grown cache, and attention weights."""
    if x.d != block.d:
        raise ValueError(f"block width {block.d} got tokens of width {x.d}")
    if (x.grid_h, x.grid_w) != block.grid:
        raise ValueError(f"block built for grid {block.grid}, got {x.grid_h}x{x.grid_w}")
    opts = block.opts
    if cache.policy != opts.cross_history:
        raise ValueError(f"cache policy {cache.policy} differs from block policy {opts.cross_history}")
    cross = []
    if opts.use_cross:
        for cs in cache.visible(block.depth):
            cross.append(CrossTokenSet(block.norm1(cs.tokens), cs.source_depth, cs.coarse_h, cs.coarse_w))
    xn = TokenGrid(block.norm1(x.tokens), x.grid_h, x.grid_w)
    y, attn = cmha_forward(xn, cross, block.lsf, block.cmha, block.bias, block.depth, residual=x.tokens)
    y = TokenGrid(y, x.grid_h, x.grid_w)
    if opts.use_cross:
        cache = cache.extended(token_merge(y, block.tme, opts.tme, block.depth))
    z = token_enhance(y, block.tme, opts.tme)
    out = z.tokens + block.ffn(block.norm2(z.tokens))
    return TokenGrid(out, x.grid_h, x.grid_w), cache, attn


def stage_forward(x: TokenGrid, blocks: list[FcaBlock], policy: str = "all_previous",
                  trace: Optional[list] = None) -> TokenGrid:
    """Run blocks in order with a fresh cross-token cache.

    If ``trace`` is a list, one ``(attn, key_length)`` pair per block is appended.
    """
    cache = CrossTokenCache(policy=policy)
    for block in blocks:
        x, cache, attn = fca_block_forward(x, cache, block)
        if trace is not None:
            trace.append((attn, attn.shape[-1]))
    return x


class ConvNextBlock(Module):
    def __init__(self, c: int, rng: np.random.Generator, layer_scale: float = 1e-6, dtype=np.float32):
        self.dw = param(trunc_normal(rng, (c, 7, 7), dtype=dtype))
        self.dw_b = param(np.zeros(c, dtype=dtype))
        self.norm = LayerNorm(c, dtype)
        self.w1 = param(trunc_normal(rng, (4 * c, c), dtype=dtype))
        self.b1 = param(np.zeros(4 * c, dtype=dtype))
        self.w2 = param(trunc_normal(rng, (c, 4 * c), dtype=dtype))
        self.b2 = param(np.zeros(c, dtype=dtype))
        self.gamma = param(np.full(c, layer_scale, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return convnext_block_forward(x, self)


def convnext_block_forward(x: Tensor, blk: ConvNextBlock) -> Tensor:
    h = F.conv2d_depthwise(x, blk.dw, stride=1, padding=3) + _channel_bias(blk.dw_b)
    h = blk.norm(h.transpose(0, 2, 3, 1))
    h = F.linear(F.gelu(F.linear(h, blk.w1, blk.b1)), blk.w2, blk.b2)
    h = F.channel_scale(h, blk.gamma)
    return x + h.transpose(0, 3, 1, 2)


class Stem(Module):
    """4x4 stride-4 patchify convolution followed by channel layernorm."""

    def __init__(self, c_out: int, rng: np.random.Generator, c_in: int = 3, patch: int = 4, dtype=np.float32):
        self.w = param(trunc_normal(rng, (c_out, c_in, patch, patch), dtype=dtype))
        self.b = param(np.zeros(c_out, dtype=dtype))
        self.norm = LayerNorm(c_out, dtype)
        self.patch = patch

    def __call__(self, x: Tensor) -> Tensor:
        return stem_forward(x, self)


def stem_forward(image: Tensor, stem: Stem) -> Tensor:
    p = stem.patch
    if image.shape[2] % p or image.shape[3] % p:
        raise ValueError(f"stem needs spatial size divisible by {p}, got {image.shape[2:]}")
    x = F.conv2d(image, stem.w, stride=p) + _channel_bias(stem.b)
    return _ln_channels(x, stem.norm)


class Downsample(Module):
    """Layernorm, pointwise channel change, then 3x3 stride-2 depthwise."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        self.norm = LayerNorm(c_in, dtype)
        self.pw = param(trunc_normal(rng, (c_out, c_in), dtype=dtype))
        self.pw_b = param(np.zeros(c_out, dtype=dtype))
        self.dw = param(trunc_normal(rng, (c_out, 3, 3), dtype=dtype))
        self.dw_b = param(np.zeros(c_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return downsample_forward(x, self)


def downsample_forward(x: Tensor, ds: Downsample) -> Tensor:
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"downsample needs even spatial size, got {x.shape[2:]}")
    h = F.conv2d_pointwise(_ln_channels(x, ds.norm), ds.pw) + _channel_bias(ds.pw_b)
    return F.conv2d_depthwise(h, ds.dw, stride=2, padding=1) + _channel_bias(ds.dw_b)


class PatchEmbed(Module):
    """Non-overlapping patch projection of the plain model (no norm)."""

    def __init__(self, c_out: int, patch: int, rng: np.random.Generator, c_in: int = 3, dtype=np.float32):
        self.w = param(trunc_normal(rng, (c_out, c_in, patch, patch), dtype=dtype))
        self.b = param(np.zeros(c_out, dtype=dtype))
        self.patch = patch

    def __call__(self, image: Tensor) -> Tensor:
        p = self.patch
        if image.shape[2] % p or image.shape[3] % p:
            raise ValueError(f"patch embedding needs spatial size divisible by {p}")
        return F.conv2d(image, self.w, stride=p) + _channel_bias(self.b)


def map_to_tokens(x: Tensor) -> TokenGrid:
    b, c, h, w = x.shape
    return TokenGrid(x.reshape(b, c, h * w).transpose(0, 2, 1), h, w)


def tokens_to_map(t: TokenGrid) -> Tensor:
    b, n, c = t.tokens.shape
    return t.tokens.transpose(0, 2, 1).reshape(b, c, t.grid_h, t.grid_w)
