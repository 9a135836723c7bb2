import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refloat.format import ReFloatConfig, convert_matrix, quantize_vector, quantize_vector_segment
from refloat.matrix_io import SparseMatrixCoo, exact_spmv
from refloat.spmv import (
    ReFloatSpMV,
    bit_serial_fixed_mvm,
    block_mvm,
    intermediate_bit_widths,
    spmv,
)

import oracles

SMALL_M = np.array([[0, 13, 7, 11], [11, 14, 3, 8], [9, 5, 2, 5], [14, 6, 9, 15]])
SMALL_X = np.array([6, 12, 6, 13])


def test_block_mvm_example():
    blocked = convert_matrix(SparseMatrixCoo.from_dense([[-248.0, 336.0], [-512.0, 136.0]]), ReFloatConfig(b=1, e=2, f=2))
    seg = quantize_vector_segment(np.ones(2), ReFloatConfig.lossless(1))
    part = block_mvm(blocked.block(0), seg)
    assert part.segment_index == 0
    assert part.values.tolist() == [96.0, -384.0]
    zero = block_mvm(blocked.block(0), quantize_vector_segment(np.zeros(2), ReFloatConfig.lossless(1)))
    assert zero.values.tolist() == [0.0, 0.0]


def test_block_mvm_rejects_wrong_segment():
    blocked = convert_matrix(SparseMatrixCoo.from_dense(np.eye(4)), ReFloatConfig.lossless(1), parallel_width=2)
    seg = quantize_vector_segment(np.ones(2), ReFloatConfig.lossless(1), segment_index=0)
    with pytest.raises(ValueError):
        block_mvm(blocked.block(blocked.block_col.tolist().index(1)), seg)


def test_block_mvm_overflow():
    blocked = convert_matrix(SparseMatrixCoo.from_dense([[1e308, 1e308]]), ReFloatConfig.lossless(1))
    seg = quantize_vector_segment(np.array([1e308, 1e308]), ReFloatConfig.lossless(1))
    with pytest.raises(OverflowError):
        block_mvm(blocked.block(0), seg)
    with pytest.raises(OverflowError):
        spmv(blocked, np.array([1e308, 1e308]))


def test_block_mvm_lossless_matches_block_of_exact():
    rng = np.random.default_rng(3)
    dense = rng.standard_normal((8, 8)) * (rng.random((8, 8)) < 0.6)
    m = SparseMatrixCoo.from_dense(dense)
    cfg = ReFloatConfig.lossless(3)
    x = rng.standard_normal(8)
    part = block_mvm(convert_matrix(m, cfg).block(0), quantize_vector_segment(x, cfg))
    assert np.array_equal(part.values, exact_spmv(m, x))


def test_spmv_identity_and_small_example():
    x = np.random.default_rng(0).standard_normal(300)
    eye = convert_matrix(SparseMatrixCoo.from_dense(np.eye(300)), ReFloatConfig.lossless(7))
    assert np.array_equal(spmv(eye, x), x)
    small = convert_matrix(SparseMatrixCoo.from_dense(SMALL_M.T.astype(float)), ReFloatConfig.lossless(2))
    assert spmv(small, SMALL_X.astype(float)).tolist() == [368, 354, 207, 387]
    with pytest.raises(ValueError):
        spmv(small, np.ones(5))


def _spd(rng, n):
    g = rng.standard_normal((n, n))
    return g @ g.T / n + np.eye(n)


def test_spmv_default_format_error_bound():
    rng = np.random.default_rng(128)
    # positive entries within a few binades: no saturation, no cancellation
    s = rng.uniform(0.25, 1.0, (128, 128))
    a = s + s.T + 10.0 * np.eye(128)
    assert np.linalg.eigvalsh(a).min() > 0
    m = SparseMatrixCoo.from_dense(a)
    cfg = ReFloatConfig(b=4, e=3, f=3, e_v=3, f_v=8)
    blocked = convert_matrix(m, cfg)
    x = rng.uniform(0.5, 1.0, 128)
    engine = ReFloatSpMV(blocked)
    y = engine(x)
    ref = exact_spmv(m, x)
    assert blocked.matrix_saturations == 0 and engine.last_saturations == 0
    assert np.max(np.abs(y - ref) / np.abs(ref)) < 2.0**-3


def test_error_shrinks_with_vector_fraction_bits():
    rng = np.random.default_rng(9)
    m = SparseMatrixCoo.from_dense(_spd(rng, 96))
    x = rng.standard_normal(96)
    ref = exact_spmv(m, x)
    errs = []
    for f_v in (4, 8, 16, 32, 52):
        cfg = ReFloatConfig(b=4, e=11, f=52, e_v=11, f_v=f_v)
        engine = ReFloatSpMV(convert_matrix(m, cfg))
        y = engine(x)
        assert engine.last_saturations == 0
        errs.append(np.max(np.abs(y - ref)))
    assert errs == sorted(errs, reverse=True)


def test_threads_give_identical_bits():
    rng = np.random.default_rng(11)
    dense = rng.standard_normal((700, 650)) * (rng.random((700, 650)) < 0.02)
    blocked = convert_matrix(SparseMatrixCoo.from_dense(dense), ReFloatConfig(b=5), parallel_width=3)
    x = rng.standard_normal(650)
    y1 = ReFloatSpMV(blocked, threads=1)(x)
    for t in (2, 3, 8):
        engine = ReFloatSpMV(blocked, threads=t)
        assert np.array_equal(engine(x).view(np.int64), y1.view(np.int64))
        engine.close()


def test_saturation_counting():
    m = SparseMatrixCoo.from_dense(np.eye(4))
    blocked = convert_matrix(m, ReFloatConfig(b=2, e=2, f=3, e_v=2, f_v=3))
    engine = ReFloatSpMV(blocked)
    engine(np.array([1.0, 2.0**10, 1.0, 1.0]))
    # base round(10/4)=3 -> offsets -3,7,-3,-3 in window [-1, 1]: all saturate
    assert engine.last_saturations == 4
    engine(np.ones(4))
    assert engine.last_saturations == 0 and engine.total_saturations == 4


def test_spmv_matches_dequantized_operands():
    # y equals the exact product of the dequantised matrix and vector up to
    # the ordering of binary64 additions; with b covering the matrix and a
    # single segment the order is the same
    rng = np.random.default_rng(21)
    dense = rng.standard_normal((16, 16))
    cfg = ReFloatConfig(b=4, e=3, f=3, e_v=3, f_v=8)
    blocked = convert_matrix(SparseMatrixCoo.from_dense(dense), cfg)
    x = rng.standard_normal(16)
    xq = quantize_vector(x, cfg).values()
    assert np.array_equal(spmv(blocked, x), exact_spmv(blocked.to_coo(), xq))


def test_bit_serial_small_example():
    t = bit_serial_fixed_mvm(SMALL_M.T, SMALL_X, 4, 4)
    assert t.result.tolist() == [368, 354, 207, 387]
    assert t.cycle_count == 7
    one = bit_serial_fixed_mvm([[1, 0], [1, 1]], [1, 1], 1, 1)
    assert one.cycle_count == 1 and one.result.tolist() == [1, 2]


def test_bit_serial_rejects_wide_entries():
    with pytest.raises(ValueError):
        bit_serial_fixed_mvm([[16]], [1], 4, 4)
    with pytest.raises(ValueError):
        bit_serial_fixed_mvm([[1]], [2], 4, 1)
    with pytest.raises(ValueError):
        bit_serial_fixed_mvm([[-1]], [1], 4, 1)
    with pytest.raises(ValueError):
        bit_serial_fixed_mvm(np.ones((129, 1), dtype=int), [1], 1, 1)


def test_bit_serial_random_seeds():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 8, (4, 4))
        v = rng.integers(0, 8, 4)
        t = bit_serial_fixed_mvm(a, v, 3, 3)
        assert t.result.tolist() == oracles.integer_mvm(a.tolist(), v.tolist())
        assert t.cycle_count == 5


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 32), st.integers(1, 32), st.integers(0, 2**32 - 1))
def test_bit_serial_property(nm, nv, rows, cols, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2**nm, (rows, cols))
    v = rng.integers(0, 2**nv, cols)
    t = bit_serial_fixed_mvm(a, v, nm, nv)
    assert t.result.tolist() == oracles.integer_mvm(a.tolist(), v.tolist())
    assert t.cycle_count == nv + nm - 1


def test_intermediate_bit_widths():
    assert intermediate_bit_widths(ReFloatConfig(b=7, e=3, f=3, e_v=3, f_v=8)) == (7, 19, 43)
    assert intermediate_bit_widths(ReFloatConfig(b=1, e=1, f=0, e_v=1, f_v=0)) == (1, 4, 8)
    assert intermediate_bit_widths(ReFloatConfig(b=7, e=11, f=52))[1] == 2108


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 160), st.integers(1, 160), st.integers(1, 5), st.integers(1, 4))
def test_lossless_spmv_is_order_matched_exact(seed, n_rows, n_cols, b, P):
    rng = np.random.default_rng(seed)
    dense = rng.standard_normal((n_rows, n_cols)) * (rng.random((n_rows, n_cols)) < 0.1)
    m = SparseMatrixCoo.from_dense(dense)
    blocked = convert_matrix(m, ReFloatConfig.lossless(b), parallel_width=P)
    x = rng.standard_normal(n_cols)
    y = spmv(blocked, x)
    assert np.array_equal(y, np.array(oracles.ordered_spmv_oracle(m.entries, n_rows, x.tolist(), b, P)))
