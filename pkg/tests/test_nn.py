import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layerwise import nn
from layerwise.errors import ConfigError, DataError, ShapeError
from conftest import central_diff, rel_err


# -- RMSNorm --------------------------------------------------------------

def test_rmsnorm_examples():
    ones = np.ones(6)
    np.testing.assert_allclose(nn.rmsnorm(ones, nn.NormGain(ones, 1e-300)), ones, rtol=1e-15)
    y = nn.rmsnorm(np.array([3.0, 4.0]), np.ones(2), eps=0.0)
    np.testing.assert_allclose(y, [3 / math.sqrt(12.5), 4 / math.sqrt(12.5)], rtol=1e-14)
    np.testing.assert_allclose(y, [0.84853, 1.13137], atol=1e-5)
    x = np.random.default_rng(0).normal(size=7)
    assert np.all(nn.rmsnorm(x, np.zeros(7)) == 0)


def test_rmsnorm_rejects_bad_gain():
    with pytest.raises(ShapeError):
        nn.rmsnorm(np.ones((2, 4)), np.ones(3))
    with pytest.raises(ConfigError):
        nn.NormGain(np.ones(3), eps=0.0)


@pytest.mark.parametrize("variant", ["naive", "fused"])
def test_norm_variants_agree(variant):
    rng = np.random.default_rng(1)
    x, g = rng.normal(size=(3, 5, 32)), rng.normal(size=(1, 32))
    np.testing.assert_allclose(nn.NORM_VARIANTS[variant](x, g, 1e-6), nn.rmsnorm(x, g), rtol=1e-13, atol=1e-14)
    x32 = x.astype(np.float32)
    assert nn.NORM_VARIANTS[variant](x32, g.astype(np.float32)).dtype == np.float32


# -- rotary ---------------------------------------------------------------

def test_rope_position_zero_is_identity():
    v = np.random.default_rng(2).normal(size=16)
    np.testing.assert_array_equal(nn.rope_apply(v, 0, nn.RopeConfig(16)), v)


def test_rope_pair_rotation_oracle():
    cfg = nn.RopeConfig(8, 10000.0)
    v = np.arange(1.0, 9.0)
    out = nn.rope_apply(v, 5, cfg)
    for j in range(4):
        ang = 5 * 10000.0 ** (-2 * j / 8)
        c, s = math.cos(ang), math.sin(ang)
        a, b = v[2 * j], v[2 * j + 1]
        assert out[2 * j] == pytest.approx(a * c - b * s, abs=1e-13)
        assert out[2 * j + 1] == pytest.approx(a * s + b * c, abs=1e-13)


@settings(max_examples=60, deadline=None)
@given(
    dh=st.sampled_from([2, 4, 8, 16, 64]),
    m=st.integers(0, 4096), n=st.integers(0, 4096), shift=st.integers(0, 4096),
    seed=st.integers(0, 2**31),
)
def test_rope_isometry_and_relative_position(dh, m, n, shift, seed):
    rng = np.random.default_rng(seed)
    cfg = nn.RopeConfig(dh)
    q, k = rng.normal(size=dh), rng.normal(size=dh)
    assert np.linalg.norm(nn.rope_apply(q, m, cfg)) == pytest.approx(np.linalg.norm(q), abs=1e-12)
    a = nn.rope_apply(q, m, cfg) @ nn.rope_apply(k, n, cfg)
    b = nn.rope_apply(q, m + shift, cfg) @ nn.rope_apply(k, n + shift, cfg)
    assert a == pytest.approx(b, abs=1e-9)


def test_rope_rejects_odd_or_wrong_length():
    with pytest.raises(ConfigError):
        nn.RopeConfig(7)
    with pytest.raises(ShapeError):
        nn.rope_apply(np.ones(6), 1, nn.RopeConfig(8))


# -- attention ------------------------------------------------------------

def loop_attention(q, k, v, offset):
    nh, t, dh = q.shape
    nkv, s, _ = k.shape
    out = np.zeros_like(q)
    for h in range(nh):
        kh = h // (nh // nkv)
        for i in range(t):
            scores = []
            for j in range(offset + i + 1):
                scores.append(sum(q[h, i, c] * k[kh, j, c] for c in range(dh)) / math.sqrt(dh))
            mx = max(scores)
            w = [math.exp(sc - mx) for sc in scores]
            z = sum(w)
            for j, wj in enumerate(w):
                out[h, i] += wj / z * v[kh, j]
    return out


@pytest.mark.parametrize("nh,nkv,t,s", [(4, 2, 3, 3), (6, 3, 2, 5), (4, 1, 4, 4)])
def test_gqa_matches_loop_oracle(nh, nkv, t, s):
    rng = np.random.default_rng(nh * 10 + s)
    q, k, v = rng.normal(size=(nh, t, 4)), rng.normal(size=(nkv, s, 4)), rng.normal(size=(nkv, s, 4))
    got = nn.gqa_attention(q, k, v, causal_offset=s - t)
    np.testing.assert_allclose(got, loop_attention(q, k, v, s - t), atol=1e-10)


def test_gqa_group_one_equals_repeated_heads():
    rng = np.random.default_rng(5)
    q, k, v = rng.normal(size=(4, 3, 8)), rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 3, 8))
    grouped = nn.gqa_attention(q, k, v)
    mha = nn.gqa_attention(q, np.repeat(k, 2, axis=0), np.repeat(v, 2, axis=0))
    np.testing.assert_allclose(grouped, mha, rtol=1e-14, atol=1e-15)


def test_gqa_single_position_returns_value():
    rng = np.random.default_rng(6)
    q, k, v = rng.normal(size=(4, 1, 8)), rng.normal(size=(2, 1, 8)), rng.normal(size=(2, 1, 8))
    out = nn.gqa_attention(q, k, v)
    for h in range(4):
        np.testing.assert_allclose(out[h, 0], v[h // 2, 0], rtol=1e-15)


def test_gqa_shape_errors():
    with pytest.raises(ShapeError):
        nn.gqa_attention(np.ones((3, 1, 4)), np.ones((2, 1, 4)), np.ones((2, 1, 4)))
    with pytest.raises(ShapeError):
        nn.gqa_attention(np.ones((2, 3, 4)), np.ones((2, 2, 4)), np.ones((2, 2, 4)))


# -- SwiGLU / loss --------------------------------------------------------

def test_swiglu_elementwise_oracle():
    rng = np.random.default_rng(7)
    x, wg, wu, wd = rng.normal(size=5), rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), rng.normal(size=(3, 5))
    hidden = []
    for j in range(3):
        a = sum(x[i] * wg[i, j] for i in range(5))
        b = sum(x[i] * wu[i, j] for i in range(5))
        hidden.append(a / (1 + math.exp(-a)) * b)
    expected = [sum(hidden[j] * wd[j, o] for j in range(3)) for o in range(5)]
    np.testing.assert_allclose(nn.swiglu_ffn(x, wg, wu, wd), expected, rtol=1e-12, atol=1e-14)
    assert np.all(nn.swiglu_ffn(np.zeros(5), wg, wu, wd) == 0)
    assert np.all(nn.swiglu_ffn(x, wg, np.zeros_like(wu), wd) == 0)
    with pytest.raises(ShapeError):
        nn.swiglu_ffn(x, wg, wu, wd.T)


def test_cross_entropy_examples():
    loss, _ = nn.cross_entropy(np.zeros((3, 7)), np.array([0, 3, 6]))
    assert loss == pytest.approx(math.log(7), rel=1e-15)
    logits = np.zeros((1, 4))
    logits[0, 2] = 50.0
    loss, _ = nn.cross_entropy(logits, np.array([2]))
    assert loss < 1e-20
    with pytest.raises(DataError):
        nn.cross_entropy(np.zeros((1, 4)), np.array([4]))
    with pytest.raises(ShapeError):
        nn.cross_entropy(np.zeros((2, 4)), np.array([1]))


# -- gradients ------------------------------------------------------------

N_INSTANCES = 20


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    logits, targets = rng.normal(size=(3, 5)), rng.integers(0, 5, 3)
    _, grad = nn.cross_entropy(logits, targets)
    num = central_diff(lambda: nn.cross_entropy(logits, targets)[0], logits)
    assert rel_err(grad, num) < 1e-6


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_rmsnorm_gradient(seed):
    rng = np.random.default_rng(seed)
    x, g, w = rng.normal(size=(2, 3, 6)), rng.normal(size=(1, 6)), rng.normal(size=(2, 3, 6))
    f = lambda: float(np.sum(nn.rmsnorm(x, g) * w))
    dx, dg = nn.rmsnorm_backward(w, x, g)
    assert rel_err(dx, central_diff(f, x)) < 1e-4
    assert rel_err(dg, central_diff(f, g)) < 1e-4


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_rope_gradient(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(5, 2, 8)), rng.normal(size=(5, 2, 8))
    cos, sin = nn.rope_angles(np.arange(5), 8)
    cos, sin = cos[:, None, :], sin[:, None, :]
    dx = nn.rope_rotate_backward(w, cos, sin)
    num = central_diff(lambda: float(np.sum(nn.rope_rotate(x, cos, sin) * w)), x)
    assert rel_err(dx, num) < 1e-4


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_attention_gradient(seed):
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(4, 3, 4)), rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(4, 3, 4))
    _, probs = nn.gqa_attention(q, k, v, return_probs=True)
    dq, dk, dv = nn.gqa_attention_backward(w, q, k, v, probs)
    f = lambda: float(np.sum(nn.gqa_attention(q, k, v) * w))
    for analytic, arr in ((dq, q), (dk, k), (dv, v)):
        assert rel_err(analytic, central_diff(f, arr)) < 1e-4


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_swiglu_gradient(seed):
    rng = np.random.default_rng(seed)
    x, wg, wu, wd = rng.normal(size=(2, 4)), rng.normal(size=(4, 6)), rng.normal(size=(4, 6)), rng.normal(size=(6, 4))
    w = rng.normal(size=(2, 4))
    grads = nn.swiglu_ffn_backward(w, x, wg, wu, wd)
    f = lambda: float(np.sum(nn.swiglu_ffn(x, wg, wu, wd) * w))
    for analytic, arr in zip(grads, (x, wg, wu, wd)):
        assert rel_err(analytic, central_diff(f, arr)) < 1e-4
