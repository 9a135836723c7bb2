"""SpMV in emulated ReFloat arithmetic, plus the bit-serial crossbar model.

A block MVM multiplies the base-free block values by the base-free
vector segment, accumulates per local row, and applies the combined scale
2^(e_b + e_vb) once to the partial. Partials are folded into ``y`` in
block-major order, so the result bits do not depend on the thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .format import (
    BlockedMatrix,
    QuantizedVectorSegment,
    ReFloatBlock,
    ReFloatConfig,
    _dequantize,
    quantize_vector,
)

__all__ = [
    "PartialSegment",
    "BitSerialTrace",
    "ReFloatSpMV",
    "block_mvm",
    "spmv",
    "bit_serial_fixed_mvm",
    "intermediate_bit_widths",
]


@dataclass
class PartialSegment:
    segment_index: int
    values: np.ndarray


@dataclass
class BitSerialTrace:
    n_matrix_bits: int
    n_vector_bits: int
    cycle_count: int
    result: np.ndarray


def _scale(partial: np.ndarray, exponent) -> np.ndarray:
    with np.errstate(over="ignore"):
        scaled = np.ldexp(partial, np.asarray(exponent, dtype=np.int32))
    if np.any(np.isinf(scaled) & np.isfinite(partial)):
        raise OverflowError("block partial overflows binary64 after applying the exponent bases")
    return scaled


def block_mvm(block: ReFloatBlock, seg: QuantizedVectorSegment) -> PartialSegment:
    """Multiply one quantised block by the matching quantised input segment."""
    if block.block_col != seg.segment_index:
        raise ValueError(
            f"block column {block.block_col} does not match segment {seg.segment_index}"
        )
    x = seg.unscaled_values()
    live = ~seg.is_zero[block.jj]
    acc = np.zeros(block.config.block_size)
    # ufunc.at applies the additions one by one in entry order
    np.add.at(acc, block.ii[live], block.unscaled_values()[live] * x[block.jj[live]])
    return PartialSegment(block.block_row, _scale(acc, block.e_b + seg.e_vb))


class ReFloatSpMV:
    """Reusable SpMV operator for one :class:`BlockedMatrix`.

    Every (block, local row) pair that holds entries gets a partial slot.
    Slots are numbered in block-major order, so summing a row's slots in
    slot order is exactly the commit order of the block stream.
    """

    def __init__(self, blocked: BlockedMatrix, threads: int = 1):
        self.blocked = blocked
        self.config: ReFloatConfig = blocked.config
        self.threads = max(1, int(threads))
        size = self.config.block_size
        n_seg = -(-blocked.n_cols // size)

        blk = blocked.entry_block_index()
        slot_key = blk * size + blocked.ii
        # entries are grouped by block, then sorted by (ii, jj): slot keys never decrease
        new_slot = np.ones(len(slot_key), dtype=bool)
        new_slot[1:] = slot_key[1:] != slot_key[:-1]
        slot_of_entry = np.cumsum(new_slot) - 1
        n_slots = int(new_slot.sum())
        first = np.flatnonzero(new_slot)

        self.slot_block = blk[first]
        self.slot_row = blocked.block_row[self.slot_block] * size + blocked.ii[first]
        self.slot_base = blocked.e_b[self.slot_block]
        self.slot_segment = blocked.block_col[self.slot_block]

        indptr = np.zeros(n_slots + 1, dtype=np.int64)
        np.cumsum(np.bincount(slot_of_entry, minlength=n_slots), out=indptr[1:])
        unscaled = _dequantize(blocked.sign, blocked.offset, blocked.fraction, self.config.f)
        self._partial_op = sp.csr_matrix(
            (unscaled, blocked.global_cols(), indptr), shape=(n_slots, n_seg * size)
        )

        # commit operator: y[row] = sum of its slots, in slot order
        order = np.argsort(self.slot_row, kind="stable")
        commit_ptr = np.zeros(blocked.n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.slot_row, minlength=blocked.n_rows), out=commit_ptr[1:])
        self._commit_op = sp.csr_matrix(
            (np.ones(n_slots), order, commit_ptr), shape=(blocked.n_rows, n_slots)
        )

        if self.threads > 1 and n_slots:
            bounds = np.linspace(0, n_slots, self.threads + 1).astype(np.int64)
            self._chunks = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
            self._chunk_ops = [self._partial_op[lo:hi] for lo, hi in self._chunks]
            self._pool = ThreadPoolExecutor(self.threads)
        else:
            self._pool = None

        self.calls = 0
        self.last_saturations = 0
        self.total_saturations = 0

    def partials(self, x) -> tuple[np.ndarray, int]:
        """Scaled partial of every slot and the number of saturated vector elements."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.blocked.n_cols,):
            raise ValueError(f"vector length {x.shape} does not match {self.blocked.n_cols} columns")
        xq = quantize_vector(x, self.config)
        x_unscaled = xq.unscaled_values()
        if self._pool is None:
            raw = self._partial_op @ x_unscaled
        else:
            parts = self._pool.map(lambda op: op @ x_unscaled, self._chunk_ops)
            raw = np.concatenate(list(parts))
        scaled = _scale(raw, self.slot_base + xq.e_vb[self.slot_segment])
        return scaled, xq.saturations

    def __call__(self, x) -> np.ndarray:
        scaled, saturations = self.partials(x)
        self.calls += 1
        self.last_saturations = saturations
        self.total_saturations += saturations
        return self._commit_op @ scaled

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


def spmv(blocked: BlockedMatrix, x, threads: int = 1) -> np.ndarray:
    """y = A x with A in ReFloat form and x quantised to (e_v, f_v) on the fly."""
    engine = blocked._cache.get(("spmv", threads))
    if engine is None:
        engine = blocked._cache[("spmv", threads)] = ReFloatSpMV(blocked, threads)
    return engine(x)


def bit_serial_fixed_mvm(matrix, vector, n_matrix_bits: int, n_vector_bits: int, crossbar_dim: int = 128) -> BitSerialTrace:
    """Fixed-point y = matrix @ vector on single-bit crossbars.

    The crossbar holds ``matrix.T``: wordlines carry vector elements and
    each bitline yields one output. The matrix is sliced into
    ``n_matrix_bits`` one-bit planes, one crossbar each. Vector bits enter
    MSB first; every cycle each crossbar shifts its accumulator left and adds
    the new column sums. The plane accumulators are then merged by
    shift-and-add, one plane per cycle.
    """
    a = np.asarray(matrix, dtype=np.int64)
    v = np.asarray(vector, dtype=np.int64)
    if a.ndim != 2 or v.shape != (a.shape[1],):
        raise ValueError("matrix must be 2-D with as many columns as the vector has elements")
    if max(a.shape) > crossbar_dim:
        raise ValueError(f"matrix does not fit a {crossbar_dim}x{crossbar_dim} crossbar")
    if n_matrix_bits < 1 or n_vector_bits < 1:
        raise ValueError("bit widths must be >= 1")
    if n_matrix_bits + n_vector_bits + int(a.shape[1]).bit_length() > 62:
        raise ValueError("bit widths too large for exact int64 emulation")
    if np.any(a < 0) or np.any(a >> n_matrix_bits):
        raise ValueError(f"matrix entry exceeds {n_matrix_bits} bits")
    if np.any(v < 0) or np.any(v >> n_vector_bits):
        raise ValueError(f"vector entry exceeds {n_vector_bits} bits")

    crossbars = [((a.T >> k) & 1) for k in range(n_matrix_bits)]
    acc = np.zeros((n_matrix_bits, a.shape[0]), dtype=np.int64)
    cycles = 0
    for t in range(n_vector_bits - 1, -1, -1):
        v_bit = (v >> t) & 1
        column_sums = np.stack([v_bit @ xb for xb in crossbars])
        acc = (acc << 1) + column_sums
        cycles += 1

    result = acc[n_matrix_bits - 1].copy()
    for k in range(n_matrix_bits - 2, -1, -1):
        result = (result << 1) + acc[k]
        cycles += 1
    return BitSerialTrace(n_matrix_bits, n_vector_bits, cycles, result)


def intermediate_bit_widths(config: ReFloatConfig) -> tuple[int, int, int]:
    """(ADC width, per-input-bit result width, block result width) of an engine.

    The signed block result after combining the four sign clusters is one
    bit wider than the last value.
    """
    f_x = config.b
    f_c = (1 << config.e) + config.f + 1 + config.b
    f_g = f_c + (1 << config.e_v) + config.f_v + 1 + config.b
    return f_x, f_c, f_g
