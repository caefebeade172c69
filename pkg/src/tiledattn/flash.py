"""Blocked attention with the online-softmax recurrence.

KV blocks are walked in two levels: large level-1 blocks grouped from
``b_kv1 / b_kv2`` level-2 blocks. The level-2 block is the numeric unit, so the
level-1 size only changes iteration grouping, never the result. Causal
blocks are classified with the tiling mask: empty blocks are skipped, full
blocks skip the mask add, partial blocks add a window of the generator.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .masking import BlockKind, bmask_bias, classify_block, classify_grid
from .tensors import DimensionError, matmul


@dataclass(frozen=True)
class TileConfig:
    b_q: int
    b_kv1: int
    b_kv2: int
    causal: bool = False
    max_block: int = 128

    def __post_init__(self):
        if min(self.b_q, self.b_kv1, self.b_kv2, self.max_block) < 1:
            raise ValueError(f"block sizes must be positive: {self}")
        if self.b_kv1 % self.b_kv2:
            raise ValueError(f"b_kv2={self.b_kv2} must divide b_kv1={self.b_kv1}")
        if self.b_q > self.max_block or self.b_kv2 > self.max_block:
            raise ValueError(f"b_q and b_kv2 must not exceed the mask generator size {self.max_block}")

    @classmethod
    def unified(cls, b_q: int, b_kv: int, causal: bool = False, max_block: int | None = None) -> "TileConfig":
        return cls(b_q, b_kv, b_kv, causal, max_block or max(b_q, b_kv))


class SoftmaxState:
    """Running row max ``m``, row sum ``l`` and unnormalized output ``acc``."""

    def __init__(self, lead_shape: tuple[int, ...], rows: int, head_dim: int, dtype):
        self.m = np.full(lead_shape + (rows, 1), -np.inf, dtype=dtype)
        self.l = np.zeros(lead_shape + (rows, 1), dtype=dtype)
        self.acc = np.zeros(lead_shape + (rows, head_dim), dtype=dtype)

    def update(self, scores: np.ndarray, v_blk: np.ndarray) -> None:
        m_new = np.maximum(self.m, np.max(scores, axis=-1, keepdims=True))
        # exp(-inf - finite) is 0, so the first block needs no special case.
        scale = np.exp(self.m - m_new)
        p = np.exp(scores - m_new)
        self.l = scale * self.l + np.sum(p, axis=-1, keepdims=True)
        self.acc = scale * self.acc + matmul(p, v_blk)
        self.m = m_new

    def finalize(self) -> np.ndarray:
        return self.acc / self.l


def kv_block_order(seq_len: int, cfg: TileConfig) -> list[tuple[int, int]]:
    """Level-2 ``(block index, level-1 group)`` pairs in visiting order."""
    per_group = cfg.b_kv1 // cfg.b_kv2
    n_blocks = -(-seq_len // cfg.b_kv2)
    return [(j, j // per_group) for j in range(n_blocks)]


def _q_tile(qh, kh, vh, i: int, cfg: TileConfig, scale: float) -> np.ndarray:
    seq_len, head_dim = qh.shape[-2], qh.shape[-1]
    r0 = i * cfg.b_q
    rows = min(cfg.b_q, seq_len - r0)
    q_blk = qh[..., r0 : r0 + rows, :]
    state = SoftmaxState(qh.shape[:-2], rows, head_dim, qh.dtype)
    for j, _group in kv_block_order(seq_len, cfg):
        c0 = j * cfg.b_kv2
        cols = min(cfg.b_kv2, seq_len - c0)
        if cfg.causal:
            cls = classify_block(i, j, cfg.b_q, cfg.b_kv2, seq_len, cfg.max_block)
            if cls.kind is BlockKind.EMPTY:
                continue
        scores = matmul(q_blk, kh[..., :, c0 : c0 + cols]) * scale
        if cfg.causal and cls.kind is BlockKind.PARTIAL:
            scores = scores + bmask_bias(cfg.max_block, cls.offset, rows, cols, scores.dtype)
        state.update(scores, vh[..., c0 : c0 + cols, :])
    return state.finalize()


def flash_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, cfg: TileConfig, workers: int = 1
) -> np.ndarray:
    """Tiled attention over ``[B, S, N, D]`` inputs.

    All (batch, head) pairs of a query tile are processed together. With
    ``workers > 1`` query tiles are spread over a thread pool; every tile
    owns its state and writes a disjoint output slice, so the result does not
    depend on the worker count.
    """
    if q.shape != k.shape or k.shape != v.shape or q.ndim != 4:
        raise DimensionError(f"flash_attention needs equal [B, S, N, D] shapes, got {q.shape}, {k.shape}, {v.shape}")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    seq_len, head_dim = q.shape[1], q.shape[3]
    qh = np.ascontiguousarray(np.transpose(q, (0, 2, 1, 3)))
    kh = np.ascontiguousarray(np.transpose(k, (0, 2, 3, 1)))
    vh = np.ascontiguousarray(np.transpose(v, (0, 2, 1, 3)))
    scale = 1.0 / math.sqrt(head_dim)
    out = np.empty_like(qh)
    n_tiles = -(-seq_len // cfg.b_q)

    def run(i: int) -> None:
        r0 = i * cfg.b_q
        out[..., r0 : r0 + cfg.b_q, :] = _q_tile(qh, kh, vh, i, cfg, scale)

    if workers == 1:
        for i in range(n_tiles):
            run(i)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(n_tiles)))
    return np.ascontiguousarray(np.transpose(out, (0, 2, 1, 3)))


def skip_stats(seq_len: int, cfg: TileConfig) -> dict[str, int]:
    """Counts of empty / full / partial level-2 score blocks for one head."""
    n_q = -(-seq_len // cfg.b_q)
    n_kv = -(-seq_len // cfg.b_kv2)
    if not cfg.causal:
        return {"empty": 0, "full": n_q * n_kv, "partial": 0}
    kind, _ = classify_grid(seq_len, cfg.b_q, cfg.b_kv2)
    return {
        "empty": int(np.count_nonzero(kind == 0)),
        "full": int(np.count_nonzero(kind == 1)),
        "partial": int(np.count_nonzero(kind == 2)),
    }
