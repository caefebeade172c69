"""Brute-force attention and single transformer layer (prefill / decode).

Everything here materializes the full score matrix. The other modules use
these functions as ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensors import MASK_BIAS, DimensionError, matmul, softmax_rows

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def causal_bias(s_q: int, s_kv: int, dtype=np.float64) -> np.ndarray:
    """``[s_q, s_kv]`` additive mask; query ``i`` sits at position ``s_kv - s_q + i``."""
    q_pos = np.arange(s_kv - s_q, s_kv)[:, None]
    k_pos = np.arange(s_kv)[None, :]
    return np.where(k_pos <= q_pos, 0.0, MASK_BIAS).astype(dtype)


def std_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, causal: bool = False) -> np.ndarray:
    """``softmax(Q K^T / sqrt(D) + mask) V`` for ``[B, S, N, D]`` inputs.

    ``k`` and ``v`` may be longer than ``q`` (decode against a cache). With
    ``causal`` the queries are aligned to the end of the key sequence.
    """
    if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
        raise DimensionError("std_attention expects [B, S, N, D] tensors")
    if k.shape != v.shape:
        raise DimensionError(f"K {k.shape} and V {v.shape} differ")
    bq, s_q, nq, dq = q.shape
    bk, s_kv, nk, dk = k.shape
    if (bq, nq, dq) != (bk, nk, dk):
        raise DimensionError(f"Q {q.shape} incompatible with K {k.shape}")
    if s_q > s_kv:
        raise DimensionError("query sequence longer than key sequence")

    qh = np.transpose(q, (0, 2, 1, 3))
    kh = np.transpose(k, (0, 2, 3, 1))
    vh = np.transpose(v, (0, 2, 1, 3))
    scale = 1.0 / math.sqrt(dq)
    scores = matmul(qh, kh) * scale
    if causal:
        scores = scores + causal_bias(s_q, s_kv, scores.dtype)
    probs = softmax_rows(scores)
    out = matmul(probs, vh)
    return np.ascontiguousarray(np.transpose(out, (0, 2, 1, 3)))


@dataclass
class LayerWeights:
    """Projection and MLP weights of one layer; ``n_heads`` splits ``H1``."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_1: np.ndarray
    w_2: np.ndarray
    n_heads: int

    def __post_init__(self):
        h1 = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (h1, h1):
                raise DimensionError(f"{name} must be [{h1}, {h1}]")
        if self.w_1.ndim != 2 or self.w_1.shape[0] != h1:
            raise DimensionError(f"w_1 must be [{h1}, H2]")
        if self.w_2.shape != (self.w_1.shape[1], h1):
            raise DimensionError(f"w_2 must be [{self.w_1.shape[1]}, {h1}]")
        if self.n_heads < 1 or h1 % self.n_heads:
            raise DimensionError(f"H1={h1} not divisible into {self.n_heads} heads")

    @property
    def h1(self) -> int:
        return self.w_q.shape[0]

    @property
    def h2(self) -> int:
        return self.w_1.shape[1]

    @property
    def head_dim(self) -> int:
        return self.h1 // self.n_heads

    @classmethod
    def random(cls, h1: int, h2: int, n_heads: int, rng: np.random.Generator, scale: float = 0.2):
        def draw(*shape):
            return rng.standard_normal(shape) * scale

        return cls(draw(h1, h1), draw(h1, h1), draw(h1, h1), draw(h1, h1), draw(h1, h2), draw(h2, h1), n_heads)

    @classmethod
    def zeros(cls, h1: int, h2: int, n_heads: int):
        z = np.zeros
        return cls(z((h1, h1)), z((h1, h1)), z((h1, h1)), z((h1, h1)), z((h1, h2)), z((h2, h1)), n_heads)


@dataclass
class KvCache:
    """Keys and values of one layer, ``[B, S_cached, H1]`` each.

    Single writer: do not share one cache between concurrent decode steps.
    """

    k: np.ndarray | None = None
    v: np.ndarray | None = None
    max_len: int | None = field(default=None)

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[1]

    def append(self, k_new: np.ndarray, v_new: np.ndarray) -> None:
        if k_new.shape != v_new.shape:
            raise DimensionError(f"new K {k_new.shape} and V {v_new.shape} differ")
        if self.k is None:
            self.k, self.v = np.array(k_new), np.array(v_new)
        else:
            if self.k.shape != self.v.shape:
                raise DimensionError("cache K/V shapes drifted apart")
            if k_new.shape[0] != self.k.shape[0] or k_new.shape[2] != self.k.shape[2]:
                raise DimensionError(f"cannot append {k_new.shape} to cache {self.k.shape}")
            self.k = np.concatenate([self.k, k_new], axis=1)
            self.v = np.concatenate([self.v, v_new], axis=1)
        if self.max_len is not None and self.length > self.max_len:
            raise DimensionError(f"cache length {self.length} exceeds S+O={self.max_len}")


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, s, h1 = x.shape
    return x.reshape(b, s, n_heads, h1 // n_heads)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, s, n, d = x.shape
    return x.reshape(b, s, n * d)


def _mlp_residual(x_o: np.ndarray, w: LayerWeights) -> np.ndarray:
    return matmul(gelu(matmul(x_o, w.w_1)), w.w_2) + x_o


def prefill_layer(x: np.ndarray, w: LayerWeights, cache: KvCache, causal: bool = True) -> np.ndarray:
    """One layer over the prompt ``x`` of shape ``[B, S, H1]``; fills ``cache``."""
    if x.ndim != 3 or x.shape[2] != w.h1:
        raise DimensionError(f"input {x.shape} does not match H1={w.h1}")
    x_k = matmul(x, w.w_k)
    x_v = matmul(x, w.w_v)
    x_q = matmul(x, w.w_q)
    attn = std_attention(
        _split_heads(x_q, w.n_heads), _split_heads(x_k, w.n_heads), _split_heads(x_v, w.n_heads), causal
    )
    x_o = matmul(_merge_heads(attn), w.w_o) + x
    cache.append(x_k, x_v)
    return _mlp_residual(x_o, w)


def decode_step(t: np.ndarray, w: LayerWeights, cache: KvCache) -> np.ndarray:
    """One new token ``t`` of shape ``[B, 1, H1]`` against ``cache``.

    Appends the token's key/value first, so the cache grows by exactly one.
    """
    if cache.length == 0:
        raise DimensionError("decode_step needs a non-empty cache")
    if t.ndim != 3 or t.shape[1] != 1 or t.shape[2] != w.h1:
        raise DimensionError(f"decode input must be [B, 1, {w.h1}], got {t.shape}")
    before = cache.length
    cache.append(matmul(t, w.w_k), matmul(t, w.w_v))
    if cache.length != before + 1 or cache.k.shape != cache.v.shape:
        raise DimensionError("cache shape drift during decode")
    t_q = matmul(t, w.w_q)
    attn = std_attention(
        _split_heads(t_q, w.n_heads), _split_heads(cache.k, w.n_heads), _split_heads(cache.v, w.n_heads)
    )
    t_o = matmul(_merge_heads(attn), w.w_o) + t
    return _mlp_residual(t_o, w)
