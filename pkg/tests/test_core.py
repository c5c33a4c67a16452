import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import erf

from fcaformer.core import (
    NonFiniteError,
    Tape,
    Tensor,
    backward,
    count_macs,
    grad_check,
    load_checkpoint,
    no_grad,
    param,
    philox,
    save_checkpoint,
    trunc_normal,
)
from fcaformer.core import functional as F


def p64(a):
    return param(np.asarray(a, dtype=np.float64))


def fd_grad(f, x, eps=1e-5):
    """Central differences of scalar numpy function f at array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f(x)
        x[i] = old - eps
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


# -- matmul ---------------------------------------------------------------

def test_matmul_identity_and_hand_values():
    m = Tensor(np.array([[1.5, -2.0], [3.0, 4.25]]))
    eye = Tensor(np.eye(2))
    assert np.array_equal(F.matmul(eye, m).data, m.data)
    out = F.matmul(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), Tensor(np.array([[5.0], [6.0]])))
    assert out.data.tolist() == [[17.0], [39.0]]
    z = F.matmul(Tensor(np.ones((3, 4))), Tensor(np.zeros((4, 5))))
    assert z.shape == (3, 5) and not z.data.any()


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_matmul_identity_bit_exact(p, q, seed):
    a = np.random.default_rng(seed).normal(size=(p, q)).astype(np.float32)
    assert np.array_equal(F.matmul(Tensor(a), Tensor(np.eye(q, dtype=np.float32))).data, a)
    assert np.array_equal(F.matmul(Tensor(np.eye(p, dtype=np.float32)), Tensor(a)).data, a)


def test_matmul_shape_errors():
    with pytest.raises(ValueError):
        F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_batched_broadcast_grad(rng):
    a = p64(rng.normal(size=(2, 3, 4)))
    b = p64(rng.normal(size=(4, 5)))
    loss = F.matmul(a, b).sum()
    backward(loss)
    assert np.allclose(b.grad, a.data.sum(axis=(0, 1))[:, None] * np.ones((1, 5)))
    assert np.allclose(a.grad, np.broadcast_to(b.data.sum(axis=1), (2, 3, 4)))


# -- softmax --------------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(F.softmax_lastdim(Tensor(np.zeros(3))).data, 1 / 3)
    assert np.allclose(F.softmax_lastdim(Tensor(np.array([1000.0, 1000.0]))).data, 0.5)
    assert np.allclose(F.softmax_lastdim(Tensor(np.array([0.0, math.log(3)]))).data, [0.25, 0.75])


@given(st.integers(1, 512), st.integers(0, 2**31 - 1), st.sampled_from([np.float32, np.float64]))
def test_softmax_rows_sum_to_one(k, seed, dtype):
    x = np.random.default_rng(seed).normal(scale=10, size=(3, k)).astype(dtype)
    s = F.softmax_lastdim(Tensor(x)).data
    tol = 1e-6 if dtype == np.float32 else 1e-12
    assert (s >= 0).all()
    assert np.abs(s.sum(axis=-1) - 1).max() <= tol


def test_non_finite_input_raises():
    with pytest.raises(NonFiniteError):
        F.softmax_lastdim(Tensor(np.array([0.0, np.inf])))


# -- layernorm ------------------------------------------------------------

def test_layernorm_examples():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    assert not F.layernorm(Tensor(np.full((1, 2), 5.0)), one, zero, 1e-6).data.any()
    out = F.layernorm(Tensor(np.array([1.0, 3.0])), one, zero, 1e-12).data
    assert np.allclose(out, [-1.0, 1.0])
    b = Tensor(np.array([0.3, -0.7]))
    out = F.layernorm(Tensor(np.array([[1.0, 3.0], [2.0, -4.0]])), zero, b, 1e-6).data
    assert np.array_equal(out, np.broadcast_to(b.data, (2, 2)))


def test_layernorm_rejects_empty_channels():
    with pytest.raises(ValueError):
        F.layernorm(Tensor(np.ones((2, 0))), Tensor(np.ones(0)), Tensor(np.zeros(0)))


# -- convolutions ---------------------------------------------------------

def naive_depthwise(x, w, stride, pad):
    b, c, h, wd = x.shape
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((b, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = (patch * w[None]).sum(axis=(-1, -2))
    return out


def test_depthwise_examples(rng):
    x = rng.normal(size=(2, 3, 5, 4))
    assert np.array_equal(F.conv2d_depthwise(Tensor(x), Tensor(np.ones((3, 1, 1)))).data, x)
    out = F.conv2d_depthwise(Tensor(rng.normal(size=(1, 2, 14, 14))), Tensor(np.ones((2, 7, 7))), stride=4, padding=3)
    assert out.shape[2:] == (4, 4)
    xt = p64(rng.normal(size=(1, 2, 4, 4)))
    w = p64(np.zeros((2, 3, 3)))
    y = F.conv2d_depthwise(xt, w, padding=1)
    assert not y.data.any()
    g = rng.normal(size=y.shape)
    backward((y * Tensor(g)).sum())
    xp = np.pad(xt.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expect = np.zeros((2, 3, 3))
    for c in range(2):
        for i in range(3):
            for j in range(3):
                expect[c, i, j] = (xp[0, c, i:i + 4, j:j + 4] * g[0, c]).sum()
    assert np.allclose(w.grad, expect)


@given(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3, 5]), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_depthwise_matches_naive(h, w, k, stride, seed):
    pad = k // 2
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, 3, h, w))
    wt = r.normal(size=(3, k, k))
    got = F.conv2d_depthwise(Tensor(x), Tensor(wt), stride=stride, padding=pad).data
    assert np.allclose(got, naive_depthwise(x, wt, stride, pad), atol=1e-12)


def test_depthwise_errors():
    with pytest.raises(ValueError):
        F.conv2d_depthwise(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 5, 5))))
    with pytest.raises(ValueError):
        F.conv2d_depthwise(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 3, 3))), stride=0)


def test_pointwise_examples(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    assert np.allclose(F.conv2d_pointwise(Tensor(x), Tensor(np.eye(3))).data, x)
    x2 = rng.normal(size=(1, 2, 3, 3))
    assert np.allclose(F.conv2d_pointwise(Tensor(x2), Tensor(np.ones((1, 2)))).data[:, 0], x2.sum(axis=1))
    assert not F.conv2d_pointwise(Tensor(np.zeros((1, 2, 2, 2))), Tensor(rng.normal(size=(4, 2)))).data.any()
    with pytest.raises(ValueError):
        F.conv2d_pointwise(Tensor(x), Tensor(np.ones((2, 4))))


def test_dense_conv_matches_loop(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(5, 3, 4, 4))
    got = F.conv2d(Tensor(x), Tensor(w), stride=4).data
    expect = np.zeros((2, 5, 2, 2))
    for i in range(2):
        for j in range(2):
            patch = x[:, :, 4 * i:4 * i + 4, 4 * j:4 * j + 4]
            expect[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w)
    assert np.allclose(got, expect)


# -- elementwise ----------------------------------------------------------

def test_channel_scale_and_gelu(rng):
    x = Tensor(rng.normal(size=(4, 3)))
    assert np.array_equal(F.channel_scale(x, Tensor(np.ones(3))).data, x.data)
    assert not F.channel_scale(x, Tensor(np.zeros(3))).data.any()
    assert F.gelu(Tensor(np.array(0.0))).item() == 0.0
    ten = F.gelu(Tensor(np.array(10.0))).item()
    assert abs(ten - 10.0 * 0.5 * (1 + erf(10 / math.sqrt(2)))) < 1e-12
    assert abs(ten - 10.0) < 1e-12
    with pytest.raises(ValueError):
        F.channel_scale(x, Tensor(np.ones(4)))


def test_concat_and_mean(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    assert np.array_equal(F.concat([Tensor(a), Tensor(b)], axis=0).data, np.concatenate([a, b]))
    assert np.allclose(F.mean(Tensor(a), axis=0).data, a.mean(axis=0))
    with pytest.raises(ValueError):
        F.concat([Tensor(a), Tensor(np.ones((2, 4)))], axis=0)


# -- backward / gradients -------------------------------------------------

def test_backward_examples(rng):
    p = p64(rng.normal(size=(3, 2)))
    backward(p.sum())
    assert np.array_equal(p.grad, np.ones((3, 2)))
    q = p64(rng.normal(size=4))
    backward((q * q).sum())
    assert np.allclose(q.grad, 2 * q.data)
    with pytest.raises(ValueError):
        backward(q * q)


def test_tape_visits_each_node_once():
    x = p64([1.0, 2.0])
    h = x * x
    out = (h + h + h).sum()
    tape = Tape.from_output(out)
    assert len(tape.nodes) == len({id(n) for n in tape.nodes})
    backward(out)
    assert np.allclose(x.grad, 6 * x.data)


def test_no_grad_builds_no_tape():
    x = p64([1.0])
    with no_grad():
        y = x * x
    assert y.is_leaf


PRIMITIVES = {
    "add": (lambda a, b: F.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: F.sub(a, b), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: F.mul(a, b), [(2, 3), (2, 3)]),
    "div": (lambda a, b: F.div(a, F.add(F.mul(b, b), Tensor(np.array(1.0)))), [(2, 3), (3,)]),
    "channel_scale": (lambda a, s: F.channel_scale(a, s), [(5, 3), (3,)]),
    "gelu": (lambda a: F.gelu(a), [(3, 4)]),
    "reshape": (lambda a: F.reshape(a, (6, 2)), [(3, 4)]),
    "transpose": (lambda a: F.transpose(a, (1, 0, 2)), [(2, 3, 2)]),
    "concat": (lambda a, b: F.concat([a, b], axis=-2), [(2, 3), (4, 3)]),
    "getitem": (lambda a: a[1:, ::2], [(3, 4)]),
    "gather": (lambda t: F.gather(t, np.array([[0, 2, 2], [1, 0, 4]])), [(2, 5)]),
    "sum": (lambda a: F.sum(a, axis=1), [(3, 4)]),
    "mean": (lambda a: F.mean(a, axis=0, keepdims=True), [(3, 4)]),
    "matmul": (lambda a, b: F.matmul(a, b), [(2, 3, 4), (4, 2)]),
    "linear": (lambda x, w, b: F.linear(x, w, b), [(3, 4), (2, 4), (2,)]),
    "softmax": (lambda a: F.softmax_lastdim(a), [(3, 5)]),
    "log_softmax": (lambda a: F.log_softmax_lastdim(a), [(3, 5)]),
    "layernorm": (lambda a, g, b: F.layernorm(a, g, b, 1e-6), [(3, 6), (6,), (6,)]),
    "depthwise": (lambda x, w: F.conv2d_depthwise(x, w, stride=2, padding=1), [(1, 2, 5, 5), (2, 3, 3)]),
    "pointwise": (lambda x, w: F.conv2d_pointwise(x, w), [(2, 3, 2, 2), (4, 3)]),
    "conv2d": (lambda x, w: F.conv2d(x, w, stride=2, padding=1), [(1, 2, 5, 5), (3, 2, 3, 3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    fn, shapes = PRIMITIVES[name]
    worst = 0.0
    for trial in range(20):
        r = np.random.default_rng(trial)
        params = [p64(r.normal(size=s)) for s in shapes]
        probe = None

        def loss():
            nonlocal probe
            out = fn(*params)
            if probe is None:
                probe = Tensor(r.normal(size=out.shape))
            return (out * probe).sum()

        loss()
        worst = max(worst, grad_check(loss, params, eps=1e-5, max_coords=64, rng=r))
    assert worst < 1e-6, f"{name}: {worst:.3e}"


def test_grad_check_examples():
    x = p64([0.3, -1.2, 2.0])
    assert grad_check(lambda: (x * x * Tensor(np.array([1.0, 2.0, 3.0]))).sum(), [x]) < 1e-9
    c = p64([1.0])
    assert grad_check(lambda: Tensor(np.array(4.0)) + c * Tensor(np.array(0.0)), [c]) == 0.0


def test_composite_against_independent_fd(rng):
    w = rng.normal(size=(3, 4))
    x = rng.normal(size=(5, 4))

    def numpy_loss(wv):
        h = x @ wv.T
        e = np.exp(h - h.max(axis=-1, keepdims=True))
        s = e / e.sum(axis=-1, keepdims=True)
        return float((s * np.arange(3)).sum())

    wt = p64(w.copy())
    s = F.softmax_lastdim(F.linear(Tensor(x), wt))
    backward((s * Tensor(np.arange(3.0))).sum())
    fd = fd_grad(numpy_loss, w.copy())
    assert np.abs(wt.grad - fd).max() / np.abs(fd).max() < 1e-6


# -- determinism, MACs, PRNG, checkpoint ----------------------------------

@given(st.integers(0, 2**31 - 1))
def test_kernels_deterministic(seed):
    r = np.random.default_rng(seed)
    x, w = r.normal(size=(1, 3, 6, 6)), r.normal(size=(3, 3, 3))
    a = F.conv2d_depthwise(Tensor(x), Tensor(w), padding=1).data
    b = F.conv2d_depthwise(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


def test_mac_counter():
    with count_macs() as c:
        F.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 5))))
        F.conv2d_depthwise(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((2, 3, 3))), padding=1)
        F.add(Tensor(np.ones(3)), Tensor(np.ones(3)))
    assert c.total == 2 * 3 * 4 * 5 + 9 * 2 * 16


def test_philox_streams():
    a = philox(7, "stage2.block1").normal(size=5)
    b = philox(7, "stage2.block1").normal(size=5)
    c = philox(7, "stage2.block2").normal(size=5)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    t = trunc_normal(philox(0, "x"), (2000,), std=0.02)
    assert np.abs(t).max() <= 0.04 and t.dtype == np.float32


def test_checkpoint_round_trip(tmp_path, rng):
    state = {
        "a.w": rng.normal(size=(3, 4)).astype(np.float32),
        "b": rng.normal(size=(2,)),
        "idx": np.arange(6, dtype=np.int64).reshape(2, 3),
        "blob": np.frombuffer(b"hello", dtype=np.uint8),
        "scalar": np.array(2.5, dtype=np.float64),
    }
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, state)
    back = load_checkpoint(path)
    assert list(back) == list(state)
    for k in state:
        assert back[k].dtype == state[k].dtype and np.array_equal(back[k], state[k])
    assert path.read_bytes().startswith(b"FCACKPT 1 5\n")


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE\n")
    with pytest.raises(ValueError):
        load_checkpoint(p)
