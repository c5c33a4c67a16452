"""Cross multi-head attention (CMHA).

Queries come from the regular tokens of the previous block only. Keys and
values are computed from those same tokens concatenated with cross tokens
cached from earlier blocks of the stage, each cross set multiplied channelwise
by the consuming block's learnable scale factors. The attention logits carry a
learned bias: a relative-position table for regular columns and one scalar per
head and depth offset for cross columns. Output length always equals the
number of regular tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Module, Tensor, buffer, param, trunc_normal
from .core import functional as F


@dataclass
class TokenGrid:
    """Regular tokens ``[..., n, d]`` laid out row-major on a ``grid_h x grid_w`` grid."""

    tokens: Tensor
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError("grid must be at least 1x1")
        if self.tokens.ndim < 2 or self.tokens.shape[-2] != self.grid_h * self.grid_w:
            raise ValueError(
                f"token tensor {self.tokens.shape} does not hold a {self.grid_h}x{self.grid_w} grid"
            )

    @property
    def n(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def d(self) -> int:
        return self.tokens.shape[-1]


@dataclass
class CrossTokenSet:
    """Merged tokens produced by block ``source_depth`` on a coarse grid."""

    tokens: Tensor
    source_depth: int
    coarse_h: int
    coarse_w: int

    def __post_init__(self):
        if self.tokens.shape[-2] != self.coarse_h * self.coarse_w:
            raise ValueError(
                f"cross tokens {self.tokens.shape} do not hold a {self.coarse_h}x{self.coarse_w} grid"
            )

    @property
    def m(self) -> int:
        return self.coarse_h * self.coarse_w


class LsfVector(Module):
    """Learnable per-channel scale factors for cross tokens.

    With ``per_source`` the table holds one vector per depth offset instead of a
    single vector shared by every source block. A non-learnable instance (used
    when scale factors are ablated) is a fixed all-ones buffer.
    """

    def __init__(self, d: int, learnable: bool = True, per_source: bool = False,
                 max_depth_offset: int = 1, dtype=np.float32):
        shape = (max_depth_offset, d) if per_source else (d,)
        ones = np.ones(shape, dtype=dtype)
        self.alpha = param(ones) if learnable else buffer(ones)
        self.per_source = per_source

    def for_offset(self, offset: int) -> Tensor:
        if not self.per_source:
            return self.alpha
        if offset >= self.alpha.shape[0]:
            raise ValueError(f"depth offset {offset} outside scale table of {self.alpha.shape[0]}")
        return self.alpha[offset]


class CmhaParams(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, qkv_bias: bool = False,
                 dtype=np.float32):
        if heads < 1 or d % heads:
            raise ValueError(f"{heads} heads do not divide width {d}")
        self.heads = heads
        self.w_q = param(trunc_normal(rng, (d, d), dtype=dtype))
        self.w_k = param(trunc_normal(rng, (d, d), dtype=dtype))
        self.w_v = param(trunc_normal(rng, (d, d), dtype=dtype))
        self.w_p = param(trunc_normal(rng, (d, d), dtype=dtype))
        if qkv_bias:
            self.b_q, self.b_k, self.b_v, self.b_p = (param(np.zeros(d, dtype=dtype)) for _ in range(4))
        else:
            self.b_q = self.b_k = self.b_v = self.b_p = None

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


def relative_position_index(grid_h: int, grid_w: int) -> np.ndarray:
    """``[n, n]`` table slots: entry (q, k) encodes the offset of key k from query q."""
    ys, xs = np.divmod(np.arange(grid_h * grid_w), grid_w)
    dy = ys[None, :] - ys[:, None] + grid_h - 1
    dx = xs[None, :] - xs[:, None] + grid_w - 1
    return dy * (2 * grid_w - 1) + dx


class AttentionBias(Module):
    def __init__(self, heads: int, grid_h: int, grid_w: int, max_depth_offset: int,
                 rng: np.random.Generator | None = None, with_depth: bool = True,
                 dtype=np.float32):
        size = (2 * grid_h - 1) * (2 * grid_w - 1)
        if rng is None:
            table = np.zeros((heads, size), dtype=dtype)
        else:
            table = trunc_normal(rng, (heads, size), dtype=dtype)
        self.pos_table = param(table)
        self.depth_bias = param(np.zeros((heads, max_depth_offset), dtype=dtype)) if with_depth else None
        self.grid_h, self.grid_w = grid_h, grid_w
        self._index = relative_position_index(grid_h, grid_w)

    @property
    def heads(self) -> int:
        return self.pos_table.shape[0]

    @property
    def max_depth_offset(self) -> int:
        return 0 if self.depth_bias is None else self.depth_bias.shape[1]


def _check_cross(cross: Sequence[CrossTokenSet], d: int, depth: int | None) -> None:
    for i, cs in enumerate(cross):
        if cs.tokens.shape[-1] != d:
            raise ValueError(f"cross set from depth {cs.source_depth} has width {cs.tokens.shape[-1]}, expected {d}")
        if depth is not None and cs.source_depth >= depth:
            raise ValueError(f"cross set from depth {cs.source_depth} cannot feed block {depth}")
        if i and cs.source_depth >= cross[i - 1].source_depth:
            raise ValueError("cross sets must be ordered by descending source depth")


def assemble_kv_input(x_prev: TokenGrid, cross: Sequence[CrossTokenSet], alpha: LsfVector | None,
                      depth: int | None = None) -> Tensor:
    """Row-concatenate regular tokens with scaled cross tokens, ``[..., n + m_total, d]``."""
    _check_cross(cross, x_prev.d, depth)
    parts = [x_prev.tokens]
    for cs in cross:
        if alpha is None:
            parts.append(cs.tokens)
        else:
            offset = 0 if depth is None else depth - cs.source_depth
            parts.append(F.channel_scale(cs.tokens, alpha.for_offset(offset)))
    return F.concat(parts, axis=-2)


def bias_index(grid: tuple[int, int], cross_meta: Sequence[tuple[int, int]], current_depth: int,
               max_depth_offset: int) -> np.ndarray:
    """Column index into ``concat(pos_table, depth_bias)`` for every (query, key) pair."""
    gh, gw = grid
    n = gh * gw
    pos_size = (2 * gh - 1) * (2 * gw - 1)
    cols = [relative_position_index(gh, gw)]
    for source_depth, m in cross_meta:
        offset = current_depth - source_depth
        if offset < 1 or offset >= max_depth_offset:
            raise ValueError(
                f"depth offset {offset} (block {current_depth} <- {source_depth}) outside bias table of {max_depth_offset}"
            )
        cols.append(np.full((n, m), pos_size + offset, dtype=np.int64))
    return np.concatenate(cols, axis=1)


def build_bias(grid: tuple[int, int], cross_meta: Sequence[tuple[int, int]], current_depth: int,
               bias: AttentionBias) -> Tensor:
    """Realised bias ``[heads, n, n + m_total]``."""
    if tuple(grid) != (bias.grid_h, bias.grid_w):
        raise ValueError(f"bias built for grid {bias.grid_h}x{bias.grid_w}, got {grid}")
    if not cross_meta:
        return F.gather(bias.pos_table, bias._index)
    if bias.depth_bias is None:
        raise ValueError("cross tokens given but this bias has no depth table")
    index = bias_index(grid, cross_meta, current_depth, bias.max_depth_offset)
    return F.gather(F.concat([bias.pos_table, bias.depth_bias], axis=-1), index)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, n, d = t.shape
    t = t.reshape(*lead, n, heads, d // heads)
    nd = t.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return t.transpose(axes)


def _merge_heads(t: Tensor) -> Tensor:
    *lead, h, n, hd = t.shape
    nd = t.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return t.transpose(axes).reshape(*lead, n, h * hd)


def cmha_forward(x_prev: TokenGrid, cross: Sequence[CrossTokenSet], alpha: LsfVector | None,
                 params: CmhaParams, bias: AttentionBias | None, depth: int = 1,
                 residual: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Return ``(y, attn)``: ``y`` has exactly n tokens, ``attn`` is ``[..., heads, n, n + m_total]``.

    ``residual`` is added to the projected attention output; it defaults to
    ``x_prev.tokens`` (pre-norm blocks pass the un-normalised input instead).
    """
    if x_prev.d != params.d:
        raise ValueError(f"token width {x_prev.d} does not match attention width {params.d}")
    h = params.heads
    kv_in = assemble_kv_input(x_prev, cross, alpha, depth)
    q = _split_heads(F.linear(x_prev.tokens, params.w_q, params.b_q), h)
    k = _split_heads(F.linear(kv_in, params.w_k, params.b_k), h)
    v = _split_heads(F.linear(kv_in, params.w_v, params.b_v), h)
    logits = F.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(params.head_dim))
    if bias is not None:
        meta = [(cs.source_depth, cs.m) for cs in cross]
        logits = logits + build_bias((x_prev.grid_h, x_prev.grid_w), meta, depth, bias)
    attn = F.softmax_lastdim(logits)
    mixed = _merge_heads(F.matmul(attn, v))
    out = F.linear(mixed, params.w_p, params.b_p)
    base = x_prev.tokens if residual is None else residual
    return base + out, attn
