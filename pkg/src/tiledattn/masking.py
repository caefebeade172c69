"""Tiling-mask generator: causal block masks cut from a small (2M)x(2M) matrix.

A causal score block at q-block ``i`` and kv-block ``j`` only depends on the
offset ``d = j*b_c - i*b_r`` between its first column and first row: its mask
is ``B[r, c] = (r - c >= d)``. Every such mask is a window of one
lower-triangular generator of side ``2M``, so the full ``S x S`` mask never has
to exist.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensors import MASK_BIAS


class BlockKind(enum.Enum):
    EMPTY = "empty"
    FULL = "full"
    PARTIAL = "partial"


@dataclass(frozen=True)
class BlockMask:
    """Classification of one score block; ``offset`` is meaningful for PARTIAL only."""

    kind: BlockKind
    offset: int = 0


EMPTY = BlockMask(BlockKind.EMPTY)
FULL = BlockMask(BlockKind.FULL)


@dataclass(frozen=True)
class MMask:
    """Lower-triangular generator of side ``2 * max_block``."""

    max_block: int
    bits: np.ndarray

    def __post_init__(self):
        side = 2 * self.max_block
        if self.bits.shape != (side, side):
            raise ValueError(f"generator must be {side}x{side}, got {self.bits.shape}")

    @property
    def side(self) -> int:
        return 2 * self.max_block


def build_mmask(max_block: int) -> MMask:
    if max_block < 1:
        raise ValueError(f"max block size must be >= 1, got {max_block}")
    bits = np.tril(np.ones((2 * max_block, 2 * max_block), dtype=bool))
    bits.flags.writeable = False
    return MMask(max_block, bits)


def _extents(i: int, j: int, b_r: int, b_c: int, seq_len: int) -> tuple[int, int]:
    r0, c0 = i * b_r, j * b_c
    if i < 0 or j < 0 or r0 >= seq_len or c0 >= seq_len:
        raise IndexError(f"block ({i}, {j}) lies outside a sequence of length {seq_len}")
    return min(b_r, seq_len - r0), min(b_c, seq_len - c0)


def classify_block(
    i: int, j: int, b_r: int, b_c: int, seq_len: int, max_block: int | None = None
) -> BlockMask:
    """Classify the causal score block ``(i, j)``; edge blocks use clamped extents."""
    if b_r < 1 or b_c < 1:
        raise ValueError("block extents must be positive")
    if max_block is not None and (b_r > max_block or b_c > max_block):
        raise ValueError(f"block {b_r}x{b_c} exceeds max block size {max_block}")
    rows, cols = _extents(i, j, b_r, b_c, seq_len)
    first_row, last_row = i * b_r, i * b_r + rows - 1
    first_col, last_col = j * b_c, j * b_c + cols - 1
    if last_col <= first_row:
        return FULL
    if first_col > last_row:
        return EMPTY
    return BlockMask(BlockKind.PARTIAL, first_col - first_row)


def offset_range(b_r: int, b_c: int) -> tuple[int, int]:
    """Inclusive offsets accepted by :func:`extract_bmask` (all-ones .. single one)."""
    return -(b_c - 1), b_r - 1


def extract_bmask(m: MMask, d: int, b_r: int, b_c: int) -> np.ndarray:
    """The ``b_r x b_c`` window of the generator whose entries are ``r - c >= d``."""
    if b_r < 1 or b_c < 1 or b_r > m.max_block or b_c > m.max_block:
        raise ValueError(f"block {b_r}x{b_c} outside 1..{m.max_block}")
    lo, hi = offset_range(b_r, b_c)
    if not lo <= d <= hi:
        raise ValueError(f"offset {d} outside [{lo}, {hi}] for a {b_r}x{b_c} block")
    r0, c0 = max(0, -d), max(0, d)
    return m.bits[r0 : r0 + b_r, c0 : c0 + b_c]


@lru_cache(maxsize=4096)
def _cached_bias(max_block: int, d: int, b_r: int, b_c: int, dtype_str: str) -> np.ndarray:
    bits = extract_bmask(build_mmask(max_block), d, b_r, b_c)
    bias = np.where(bits, 0.0, MASK_BIAS).astype(dtype_str)
    bias.flags.writeable = False
    return bias


def bmask_bias(max_block: int, d: int, b_r: int, b_c: int, dtype=np.float64) -> np.ndarray:
    """Additive form of :func:`extract_bmask` (0 where visible, a large negative elsewhere)."""
    return _cached_bias(max_block, d, b_r, b_c, np.dtype(dtype).str)


def classify_grid(seq_len: int, b_r: int, b_c: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`classify_block` over every block of an ``S x S`` score matrix.

    Returns ``(kind, offset)`` arrays of shape ``[n_row_blocks, n_col_blocks]``;
    ``kind`` holds 0 = empty, 1 = full, 2 = partial.
    """
    n_r = -(-seq_len // b_r)
    n_c = -(-seq_len // b_c)
    first_row = np.arange(n_r)[:, None] * b_r
    last_row = np.minimum(first_row + b_r, seq_len) - 1
    first_col = np.arange(n_c)[None, :] * b_c
    last_col = np.minimum(first_col + b_c, seq_len) - 1
    kind = np.full((n_r, n_c), 2, dtype=np.int8)
    kind[np.broadcast_to(last_col <= first_row, kind.shape)] = 1
    kind[np.broadcast_to(first_col > last_row, kind.shape)] = 0
    offset = np.broadcast_to(first_col - first_row, kind.shape).copy()
    return kind, offset


def assemble_mask(seq_len: int, b_r: int, b_c: int, m: MMask) -> np.ndarray:
    """Rebuild the ``S x S`` causal mask block by block from the generator.

    Each element is read from the generator window chosen for its block, so the
    result checks classification and extraction together.
    """
    if b_r > m.max_block or b_c > m.max_block:
        raise ValueError(f"block {b_r}x{b_c} exceeds max block size {m.max_block}")
    kind, offset = classify_grid(seq_len, b_r, b_c)
    rows = np.arange(seq_len)
    cols = np.arange(seq_len)
    bi, r = rows // b_r, rows % b_r
    bj, c = cols // b_c, cols % b_c
    k = kind[bi[:, None], bj[None, :]]
    d = offset[bi[:, None], bj[None, :]]
    gr = np.maximum(0, -d) + r[:, None]
    gc = np.maximum(0, d) + c[None, :]
    partial = k == 2
    out = k == 1
    out[partial] = m.bits[gr[partial], gc[partial]]
    return out


def mask_memory_bytes(seq_len: int, max_block: int, bytes_per_element: int) -> tuple[int, int]:
    """Bytes of the full ``S x S`` mask and of the ``2M x 2M`` generator."""
    for name, value in (("seq_len", seq_len), ("max_block", max_block), ("bytes_per_element", bytes_per_element)):
        if int(value) != value or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value}")
    seq_len, max_block, bpe = int(seq_len), int(max_block), int(bytes_per_element)
    return seq_len * seq_len * bpe, (2 * max_block) ** 2 * bpe
