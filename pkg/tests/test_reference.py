import math

import numpy as np
import pytest

from tiledattn.reference import (
    KvCache,
    LayerWeights,
    decode_step,
    gelu,
    prefill_layer,
    std_attention,
)
from tiledattn.tensors import DimensionError, matmul


def position_loop_attention(q, k, v, causal):
    b, s, n, d = q.shape
    out = np.zeros_like(q)
    for bi in range(b):
        for h in range(n):
            for t in range(s):
                scores = []
                for u in range(k.shape[1]):
                    if causal and u > t:
                        continue
                    scores.append(sum(q[bi, t, h, x] * k[bi, u, h, x] for x in range(d)) / math.sqrt(d))
                mx = max(scores)
                w = [math.exp(sc - mx) for sc in scores]
                tot = sum(w)
                for u, wu in enumerate(w):
                    out[bi, t, h] += wu / tot * v[bi, u, h]
    return out


def test_single_position_returns_v(rng):
    q, k, v = (rng.standard_normal((2, 1, 3, 4)) for _ in range(3))
    assert np.allclose(std_attention(q, k, v), v, rtol=0, atol=1e-15)


def test_zero_query_averages_values(rng):
    k, v = rng.standard_normal((2, 1, 5, 2, 3))
    out = std_attention(np.zeros_like(k), k, v)
    assert np.allclose(out, np.broadcast_to(v.mean(axis=1, keepdims=True), v.shape), rtol=0, atol=1e-15)


@pytest.mark.parametrize("causal", [False, True])
def test_matches_position_loop(rng, causal):
    q, k, v = (rng.standard_normal((1, 8, 2, 4)) for _ in range(3))
    assert np.max(np.abs(std_attention(q, k, v, causal) - position_loop_attention(q, k, v, causal))) <= 1e-13


def test_causal_ignores_future_rows(rng):
    s = 8
    q, k, v = (rng.standard_normal((1, s, 2, 3)) for _ in range(3))
    base = std_attention(q, k, v, causal=True)
    for t in range(s):
        k2, v2 = k.copy(), v.copy()
        k2[:, t + 1 :] = rng.standard_normal(k2[:, t + 1 :].shape)
        v2[:, t + 1 :] = rng.standard_normal(v2[:, t + 1 :].shape)
        out = std_attention(q, k2, v2, causal=True)
        assert np.array_equal(out[:, : t + 1], base[:, : t + 1])


def test_shape_errors():
    with pytest.raises(DimensionError):
        std_attention(np.zeros((1, 2, 2, 4)), np.zeros((1, 2, 2, 3)), np.zeros((1, 2, 2, 3)))
    with pytest.raises(DimensionError):
        std_attention(np.zeros((1, 2, 2, 4)), np.zeros((1, 2, 2, 4)), np.zeros((1, 3, 2, 4)))


def test_gelu_reference_points():
    assert gelu(np.array(0.0)) == 0.0
    assert abs(float(gelu(np.array(1.0))) - 0.8411919906082768) < 1e-15


def test_zero_weights_prefill_is_identity(rng):
    x = rng.standard_normal((2, 4, 8))
    cache = KvCache()
    assert np.array_equal(prefill_layer(x, LayerWeights.zeros(8, 16, 2), cache), x)
    assert cache.k.shape == (2, 4, 8) and cache.v.shape == (2, 4, 8)


def test_prefill_compositional(rng):
    w = LayerWeights.random(8, 12, 2, rng)
    x = rng.standard_normal((1, 4, 8))
    got = prefill_layer(x, w, KvCache())
    q = matmul(x, w.w_q).reshape(1, 4, 2, 4)
    k = matmul(x, w.w_k).reshape(1, 4, 2, 4)
    v = matmul(x, w.w_v).reshape(1, 4, 2, 4)
    x_o = matmul(std_attention(q, k, v, causal=True).reshape(1, 4, 8), w.w_o) + x
    expect = matmul(gelu(matmul(x_o, w.w_1)), w.w_2) + x_o
    assert np.array_equal(got, expect)


def test_decode_grows_cache_by_one(rng):
    w = LayerWeights.random(8, 12, 2, rng)
    cache = KvCache(max_len=7)
    prefill_layer(rng.standard_normal((1, 5, 8)), w, cache)
    decode_step(rng.standard_normal((1, 1, 8)), w, cache)
    assert cache.length == 6


def test_decode_repeated_token_attends_evenly(rng):
    h1 = 6
    w = LayerWeights.random(h1, 4, 2, rng)
    w = LayerWeights(w.w_q, w.w_k, w.w_v, w.w_o, np.zeros_like(w.w_1), np.zeros_like(w.w_2), 2)
    t = rng.standard_normal((1, 1, h1))
    cache = KvCache()
    cache.append(matmul(t, w.w_k), matmul(t, w.w_v))
    out = decode_step(t, w, cache)
    assert np.allclose(out, matmul(matmul(t, w.w_v), w.w_o) + t, rtol=0, atol=1e-14)


def test_incremental_decode_matches_prefill(rng):
    w = LayerWeights.random(8, 12, 2, rng)
    seq = rng.standard_normal((1, 9, 8))
    cache = KvCache(max_len=9)
    prefill_layer(seq[:, :6], w, cache)
    outs = [decode_step(seq[:, t : t + 1], w, cache) for t in range(6, 9)]
    full = prefill_layer(seq, w, KvCache())
    for i, t in enumerate(range(6, 9)):
        assert np.max(np.abs(outs[i][:, 0] - full[:, t])) <= 1e-12


def test_decode_needs_cache(rng):
    w = LayerWeights.random(4, 4, 2, rng)
    with pytest.raises(DimensionError):
        decode_step(np.zeros((1, 1, 4)), w, KvCache())


def test_cache_limits():
    cache = KvCache(max_len=2)
    cache.append(np.zeros((1, 2, 4)), np.zeros((1, 2, 4)))
    with pytest.raises(DimensionError):
        cache.append(np.zeros((1, 1, 4)), np.zeros((1, 1, 4)))
    with pytest.raises(DimensionError):
        KvCache().append(np.zeros((1, 1, 4)), np.zeros((1, 2, 4)))


def test_weights_validation():
    with pytest.raises((ValueError, DimensionError)):
        LayerWeights.zeros(6, 4, 4)
