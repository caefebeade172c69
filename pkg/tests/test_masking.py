import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tiledattn.masking import (
    BlockKind,
    assemble_mask,
    bmask_bias,
    build_mmask,
    classify_block,
    classify_grid,
    extract_bmask,
    mask_memory_bytes,
    offset_range,
)
from tiledattn.tensors import MASK_BIAS

GIB = 2**30


def test_mmask_m1():
    assert np.array_equal(build_mmask(1).bits, [[1, 0], [1, 1]])


def test_mmask_m3_is_6x6_with_21_ones():
    m = build_mmask(3)
    assert m.bits.shape == (6, 6)
    assert int(m.bits.sum()) == 21
    assert np.array_equal(m.bits, np.tril(np.ones((6, 6), dtype=bool)))


def test_mmask_popcount_m8():
    assert int(build_mmask(8).bits.sum()) == 16 * 17 // 2


def test_mmask_rejects_zero():
    with pytest.raises(ValueError):
        build_mmask(0)


def test_mmask_is_immutable():
    with pytest.raises(ValueError):
        build_mmask(2).bits[0, 1] = True


def test_classify_examples():
    assert classify_block(1, 0, 4, 4, 16).kind is BlockKind.FULL
    assert classify_block(0, 1, 4, 4, 16).kind is BlockKind.EMPTY
    c = classify_block(2, 2, 3, 3, 9)
    assert c.kind is BlockKind.PARTIAL and c.offset == 0


def elementwise_kind(i, j, b_r, b_c, s):
    rows = range(i * b_r, min((i + 1) * b_r, s))
    cols = range(j * b_c, min((j + 1) * b_c, s))
    vals = {c <= r for r in rows for c in cols}
    if vals == {True}:
        return BlockKind.FULL
    if vals == {False}:
        return BlockKind.EMPTY
    return BlockKind.PARTIAL


def test_classify_exhaustive():
    for b_r, b_c in itertools.product(range(1, 7), repeat=2):
        for s in range(1, 37):
            for i in range(-(-s // b_r)):
                for j in range(-(-s // b_c)):
                    got = classify_block(i, j, b_r, b_c, s)
                    assert got.kind is elementwise_kind(i, j, b_r, b_c, s), (i, j, b_r, b_c, s)
                    if got.kind is BlockKind.PARTIAL:
                        assert got.offset == j * b_c - i * b_r


def test_classify_errors():
    with pytest.raises(ValueError):
        classify_block(0, 0, 8, 8, 16, max_block=4)
    with pytest.raises(IndexError):
        classify_block(4, 0, 4, 4, 16)


def test_partial_offsets_in_extractable_range():
    for b_r, b_c in itertools.product(range(1, 9), repeat=2):
        lo, hi = offset_range(b_r, b_c)
        for s in range(1, 33):
            for i in range(-(-s // b_r)):
                for j in range(-(-s // b_c)):
                    c = classify_block(i, j, b_r, b_c, s)
                    if c.kind is BlockKind.PARTIAL:
                        assert lo <= c.offset <= hi


def test_extract_diag():
    assert np.array_equal(extract_bmask(build_mmask(4), 0, 3, 3), np.tril(np.ones((3, 3), dtype=bool)))


def test_extract_extreme_shift_single_one():
    b = extract_bmask(build_mmask(4), 3, 4, 4)
    assert int(b.sum()) == 1 and b[3, 0]


def test_extract_matches_predicate_m8():
    m = build_mmask(8)
    lo, hi = offset_range(8, 8)
    r, c = np.indices((8, 8))
    for d in range(lo, hi + 1):
        assert np.array_equal(extract_bmask(m, d, 8, 8), r - c >= d)


def test_extract_in_bounds_exhaustive():
    for big_m in range(1, 17):
        m = build_mmask(big_m)
        for b_r, b_c in itertools.product(range(1, big_m + 1), repeat=2):
            lo, hi = offset_range(b_r, b_c)
            r, c = np.indices((b_r, b_c))
            for d in range(lo, hi + 1):
                out = extract_bmask(m, d, b_r, b_c)
                assert out.shape == (b_r, b_c)
                assert np.array_equal(out, r - c >= d)


def test_extract_rejects_bad_offset():
    m = build_mmask(4)
    lo, hi = offset_range(4, 4)
    for d in (lo - 1, hi + 1):
        with pytest.raises(ValueError):
            extract_bmask(m, d, 4, 4)
    with pytest.raises(ValueError):
        extract_bmask(m, 0, 5, 4)


def test_bias_form():
    bias = bmask_bias(4, 1, 3, 3)
    assert np.array_equal(bias == 0.0, extract_bmask(build_mmask(4), 1, 3, 3))
    assert set(np.unique(bias)) == {0.0, MASK_BIAS}


def test_grid_matches_scalar():
    for s, b_r, b_c in [(17, 4, 3), (32, 8, 8), (5, 2, 7)]:
        kind, offset = classify_grid(s, b_r, b_c)
        names = {0: BlockKind.EMPTY, 1: BlockKind.FULL, 2: BlockKind.PARTIAL}
        for i, j in np.ndindex(kind.shape):
            c = classify_block(i, j, b_r, b_c, s)
            assert names[int(kind[i, j])] is c.kind
            if c.kind is BlockKind.PARTIAL:
                assert offset[i, j] == c.offset


def test_reconstruction_nonsquare_divisors():
    m = build_mmask(8)
    for s in range(1, 97):
        divs = [b for b in range(1, 9) if s % b == 0]
        for b_r, b_c in itertools.product(divs, repeat=2):
            assert np.array_equal(assemble_mask(s, b_r, b_c, m), np.tril(np.ones((s, s), dtype=bool)))


@given(st.integers(1, 80), st.integers(1, 8), st.integers(1, 8))
def test_reconstruction_ragged(s, b_r, b_c):
    assert np.array_equal(assemble_mask(s, b_r, b_c, build_mmask(8)), np.tril(np.ones((s, s), dtype=bool)))


@pytest.mark.parametrize("n_b", [1, 2, 5, 8, 64])
def test_empty_fraction_closed_form(n_b):
    b = 4
    kind, _ = classify_grid(n_b * b, b, b)
    assert int((kind == 0).sum()) == n_b * (n_b - 1) // 2


def test_memory_bytes():
    assert mask_memory_bytes(64 * 1024, 512, 2)[0] == 8 * GIB
    assert mask_memory_bytes(64 * 1024, 512, 2)[1] == 2 * 2**20
    assert mask_memory_bytes(1, 1, 1)[0] == 1
    big = mask_memory_bytes(2**40, 1, 8)[0]
    assert big == 2**83
    with pytest.raises(ValueError):
        mask_memory_bytes(0, 1, 1)
