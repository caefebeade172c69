"""Dense tensor helpers shared by every numeric module.

Tensors are plain C-contiguous numpy arrays. ``float64`` is the wide mode
and ``float32`` the narrow mode. Reductions that feed equality checks run in
a fixed order so repeated runs are bitwise reproducible.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

WIDE = np.float64
NARROW = np.float32

# Additive bias for masked scores. Finite so the online-softmax algebra never
# sees inf - inf.
MASK_BIAS = -1e30


class DimensionError(ValueError):
    """Raised when tensor extents do not line up."""


class NumericError(ValueError):
    """Raised when an input contains NaN."""


def dtype_for(precision: str) -> np.dtype:
    if precision == "wide":
        return np.dtype(WIDE)
    if precision == "narrow":
        return np.dtype(NARROW)
    raise ValueError(f"unknown precision {precision!r}; expected 'wide' or 'narrow'")


def as_tensor(data, precision: str = "wide") -> np.ndarray:
    """Return ``data`` as a row-major array in the requested precision."""
    return np.ascontiguousarray(data, dtype=dtype_for(precision))


def block_view(t: np.ndarray, offsets: Sequence[int], extents: Sequence[int]) -> np.ndarray:
    """Read-only view of the box ``[offsets, offsets + extents)``.

    Raises IndexError if the box is not fully inside ``t``.
    """
    if len(offsets) != t.ndim or len(extents) != t.ndim:
        raise DimensionError(
            f"block_view needs {t.ndim} offsets/extents, got {len(offsets)}/{len(extents)}"
        )
    slices = []
    for axis, (off, ext, size) in enumerate(zip(offsets, extents, t.shape)):
        if off < 0 or ext < 0 or off + ext > size:
            raise IndexError(
                f"axis {axis}: block [{off}, {off + ext}) outside extent {size}"
            )
        slices.append(slice(off, off + ext))
    view = t[tuple(slices)]
    view.flags.writeable = False
    return view


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched ``a @ b`` with a fixed left-to-right sum over the inner axis.

    Leading axes broadcast like ``np.matmul``. Accumulation is done in
    float64; the result has the promoted input dtype. Each output element
    equals ``((a0*b0 + a1*b1) + a2*b2) + ...`` exactly, which is what a naive
    triple loop produces.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    out_dtype = np.result_type(a, b)
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    if k == 0:
        return np.zeros(batch + (m, n), dtype=out_dtype)
    # k-major copies so each step reads contiguous slabs.
    ak = np.ascontiguousarray(np.moveaxis(np.asarray(a, dtype=WIDE), -1, 0))[..., :, None]
    bk = np.ascontiguousarray(np.moveaxis(np.asarray(b, dtype=WIDE), -2, 0))[..., None, :]
    acc = np.array(np.broadcast_to(ak[0] * bk[0], batch + (m, n)))
    tmp = np.empty_like(acc)
    for kk in range(1, k):
        np.multiply(ak[kk], bk[kk], out=tmp)
        acc += tmp
    return acc.astype(out_dtype, copy=False)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, stabilized by the row max.

    Rows that are entirely ``-inf`` come back as zeros.
    """
    x = np.asarray(x)
    if np.isnan(x).any():
        raise NumericError("softmax_rows input contains NaN")
    row_max = np.max(x, axis=-1, keepdims=True)
    dead = np.isneginf(row_max)
    safe_max = np.where(dead, 0.0, row_max).astype(x.dtype)
    e = np.exp(x - safe_max)
    denom = np.sum(e, axis=-1, keepdims=True)
    denom = np.where(dead, 1.0, denom).astype(x.dtype)
    out = e / denom
    return np.where(dead, 0.0, out).astype(x.dtype)
