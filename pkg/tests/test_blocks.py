import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import erf

from fcaformer.attention import TokenGrid
from fcaformer.blocks import (
    ConvNextBlock,
    CrossTokenCache,
    Downsample,
    FcaBlock,
    FcaOptions,
    Stem,
    convnext_block_forward,
    downsample_forward,
    fca_block_forward,
    stage_forward,
    stem_forward,
)
from fcaformer.core import Tensor, grad_check, param, philox


def make_stage(d, side, depth, policy="all_previous", dtype=np.float64, seed=0, **opt):
    opts = FcaOptions(cross_history=policy, **opt)
    return [FcaBlock(d, 2, (side, side), l, depth + 1, philox(seed, f"b{l}"), opts, dtype=dtype)
            for l in range(1, depth + 1)]


def zero_out(blocks):
    for blk in blocks:
        for name, p in blk.named_parameters():
            if not name.endswith("alpha"):
                p.data[...] = 0


def tokens(r, side, d, batch=None):
    shape = (side * side, d) if batch is None else (batch, side * side, d)
    return TokenGrid(Tensor(r.normal(size=shape)), side, side)


def test_zero_block_is_identity(rng):
    blocks = make_stage(8, 3, 1)
    zero_out(blocks)
    x = tokens(rng, 3, 8)
    out, cache, _ = fca_block_forward(x, CrossTokenCache(), blocks[0])
    assert np.array_equal(out.tokens.data, x.tokens.data)
    assert len(cache.sets) == 1


def test_zero_stage_is_identity(rng):
    blocks = make_stage(8, 4, 4)
    zero_out(blocks)
    x = tokens(rng, 4, 8, batch=2)
    assert np.array_equal(stage_forward(x, blocks).tokens.data, x.tokens.data)


def test_first_block_sees_no_cross_tokens(rng):
    blocks = make_stage(8, 3, 1)
    out, cache, attn = fca_block_forward(tokens(rng, 3, 8), CrossTokenCache(), blocks[0])
    assert attn.shape[-1] == 9 and len(cache.sets) == 1 and cache.sets[0].source_depth == 1


@pytest.mark.parametrize("policy,expect", [
    ("all_previous", [196 + 16 * (l - 1) for l in range(1, 7)]),
    ("skip_last", [196 + 16 * max(l - 2, 0) for l in range(1, 7)]),
])
def test_key_lengths_on_14x14_stage(rng, policy, expect):
    blocks = make_stage(4, 14, 6, policy, dtype=np.float32)
    trace = []
    x = TokenGrid(Tensor(rng.normal(size=(196, 4)).astype(np.float32)), 14, 14)
    stage_forward(x, blocks, policy, trace)
    assert [k for _, k in trace] == expect
    assert trace[3][1] == (244 if policy == "all_previous" else 228)


def test_cache_grows_linearly(rng):
    blocks = make_stage(4, 14, 5, dtype=np.float32)
    x = TokenGrid(Tensor(rng.normal(size=(196, 4)).astype(np.float32)), 14, 14)
    cache = CrossTokenCache()
    for l, blk in enumerate(blocks, start=1):
        x, cache, _ = fca_block_forward(x, cache, blk)
        assert len(cache.sets) == l and cache.total_tokens == 16 * l


def test_two_block_policies_differ_by_one_set(rng):
    x = tokens(rng, 4, 8)
    lengths = {}
    for policy in ("all_previous", "skip_last"):
        trace = []
        stage_forward(x, make_stage(8, 4, 2, policy), policy, trace)
        lengths[policy] = [k for _, k in trace]
    assert lengths["all_previous"][1] - lengths["skip_last"][1] == 1
    assert lengths["all_previous"][0] == lengths["skip_last"][0] == 16


def test_single_block_stage_matches_block(rng):
    blocks = make_stage(8, 3, 1)
    x = tokens(rng, 3, 8)
    out, _, _ = fca_block_forward(x, CrossTokenCache(), blocks[0])
    assert np.array_equal(stage_forward(x, blocks).tokens.data, out.tokens.data)


def test_block_errors(rng):
    blocks = make_stage(8, 3, 2)
    with pytest.raises(ValueError):
        fca_block_forward(tokens(rng, 3, 4), CrossTokenCache(), blocks[0])
    with pytest.raises(ValueError):
        fca_block_forward(tokens(rng, 2, 8), CrossTokenCache(), blocks[0])
    with pytest.raises(ValueError):
        fca_block_forward(tokens(rng, 3, 8), CrossTokenCache(policy="skip_last"), blocks[0])
    with pytest.raises(ValueError):
        CrossTokenCache(policy="every_other")


def test_options_validation():
    with pytest.raises(ValueError):
        FcaOptions(use_cross=False, use_lsf=True)


def test_stage_gradcheck():
    r = np.random.default_rng(11)
    blocks = make_stage(4, 3, 3)
    for blk in blocks:
        for p in blk.parameters():
            p.data = r.normal(0, 0.5, p.shape)
    x = param(r.normal(size=(9, 4)))
    probe = Tensor(r.normal(size=(9, 4)))

    def loss():
        return (stage_forward(TokenGrid(x, 3, 3), blocks).tokens * probe).sum()

    params = [p for blk in blocks for p in blk.parameters()] + [x]
    assert grad_check(loss, params, max_coords=6, rng=r) < 1e-4


# -- ConvNet side ---------------------------------------------------------

def test_convnext_zero_layer_scale_is_identity(rng):
    blk = ConvNextBlock(6, rng, layer_scale=0.0, dtype=np.float64)
    x = Tensor(rng.normal(size=(2, 6, 5, 5)))
    assert np.array_equal(convnext_block_forward(x, blk).data, x.data)


def test_convnext_one_by_one_hand_trace(rng):
    c = 3
    blk = ConvNextBlock(c, rng, layer_scale=0.5, dtype=np.float64)
    blk.dw.data[:] = 0
    for p in (blk.norm.beta, blk.b1, blk.b2, blk.w1, blk.w2):
        p.data = rng.normal(size=p.shape)
    x = rng.normal(size=(1, c, 1, 1))
    out = convnext_block_forward(Tensor(x), blk).data[0, :, 0, 0]
    # depthwise output is the constant dw bias (0) -> norm gives beta
    h = blk.w1.data @ blk.norm.beta.data + blk.b1.data
    h = h * 0.5 * (1 + erf(h / math.sqrt(2)))
    expect = x[0, :, 0, 0] + 0.5 * (blk.w2.data @ h + blk.b2.data)
    assert np.allclose(out, expect, atol=1e-12)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))
def test_convnext_preserves_shape(c, h, w):
    blk = ConvNextBlock(c, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(1, c, h, w)).astype(np.float32))
    assert convnext_block_forward(x, blk).shape == (1, c, h, w)


@pytest.mark.parametrize("size,sides", [(224, (56, 28, 14)), (32, (8, 4, 2))])
def test_stem_and_downsample_shapes(size, sides):
    r = np.random.default_rng(0)
    stem = Stem(4, r)
    x = stem_forward(Tensor(np.zeros((1, 3, size, size), np.float32)), stem)
    assert x.shape[2:] == (sides[0], sides[0])
    for i, want in enumerate(sides[1:]):
        x = downsample_forward(x, Downsample(4 * (i + 1), 4 * (i + 2), r))
        assert x.shape[1:] == (4 * (i + 2), want, want)


def test_zero_weights_give_zero_maps(rng):
    stem = Stem(4, rng)
    stem.w.data[:] = 0
    out = stem_forward(Tensor(rng.normal(size=(1, 3, 8, 8)).astype(np.float32)), stem)
    assert not out.data.any()
    ds = Downsample(4, 6, rng)
    ds.pw.data[:] = 0
    ds.dw.data[:] = 0
    assert not downsample_forward(Tensor(rng.normal(size=(1, 4, 4, 4)).astype(np.float32)), ds).data.any()


def test_indivisible_sizes_rejected(rng):
    with pytest.raises(ValueError):
        stem_forward(Tensor(np.zeros((1, 3, 10, 10), np.float32)), Stem(4, rng))
    with pytest.raises(ValueError):
        downsample_forward(Tensor(np.zeros((1, 4, 5, 5), np.float32)), Downsample(4, 4, rng))
