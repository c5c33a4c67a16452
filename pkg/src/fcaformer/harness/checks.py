"""Finite-difference check of a complete FcaFormer block."""

from __future__ import annotations

import numpy as np

from ..attention import CrossTokenSet, TokenGrid
from ..blocks import CrossTokenCache, FcaBlock, FcaOptions, fca_block_forward
from ..core import Tensor, grad_check, param, philox


def block_gradcheck(d: int = 16, heads: int = 2, grid: tuple[int, int] = (4, 4), cross_sets: int = 2,
                    opts: FcaOptions = FcaOptions(), seed: int = 0, dtype=np.float64,
                    max_coords: int = 8, eps: float = 1e-5) -> float:
    """Max relative error of block gradients w.r.t. every parameter and both token inputs.

    Parameters are redrawn at unit-ish scale (the default init leaves many
    branches at exactly zero, which would make the check vacuous), and the
    loss is a random projection of the block output.
    """
    rng = philox(seed, "gradcheck")
    depth = cross_sets + 1
    block = FcaBlock(d, heads, grid, depth=depth, max_depth_offset=depth + 1, rng=rng, opts=opts, dtype=dtype)
    for p in block.parameters():
        p.data = rng.normal(0.0, 0.5, p.shape).astype(dtype)
    gh, gw = grid
    x = param(rng.normal(size=(1, gh * gw, d)).astype(dtype))
    side = opts.tme.merged_side
    cache = CrossTokenCache(policy=opts.cross_history)
    sets = []
    for src in range(1, cross_sets + 1):
        t = param(rng.normal(size=(1, side(gh) * side(gw), d)).astype(dtype))
        sets.append(t)
        cache = cache.extended(CrossTokenSet(t, src, side(gh), side(gw)))
    weights = Tensor(rng.normal(size=(1, gh * gw, d)).astype(dtype))

    def loss():
        out, new_cache, _ = fca_block_forward(TokenGrid(x, gh, gw), cache, block)
        total = (out.tokens * weights).sum()
        merged = new_cache.sets[-1].tokens if opts.use_cross else None
        return total if merged is None else total + merged.sum()

    return grad_check(loss, block.parameters() + [x] + sets, eps=eps, max_coords=max_coords,
                      rng=np.random.default_rng(seed))
