"""The ReFloat(b, e, f)(e_v, f_v) block floating-point format.

A matrix is cut into 2^b x 2^b blocks. Each block stores one shared
exponent base ``e_b``; every nonzero keeps its sign, an ``e``-bit signed
exponent offset from ``e_b`` and the leading ``f`` bits of its binary64
fraction. Vector segments of length 2^b are handled the same way with
``(e_v, f_v)`` bits and a per-segment base ``e_vb``.

Conversion rules:

* the base is the rounded mean of the exponents of the nonzeros (ties
  round away from zero), which minimises the sum of squared offsets;
* offsets outside ``[-2^(e-1)+1, 2^(e-1)-1]`` saturate to the nearest
  end of that window, keeping sign and fraction;
* fractions are truncated, never rounded;
* zeros carry an explicit flag (the 1.fraction form cannot encode them);
* subnormal inputs use their effective (normalised) exponent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .cost_model import default_parallel_width
from .layout import block_major_order
from .matrix_io import SparseMatrixCoo

__all__ = [
    "ReFloatConfig",
    "QuantizedScalar",
    "ReFloatBlock",
    "BlockedMatrix",
    "QuantizedVectorSegment",
    "QuantizedVector",
    "offset_window",
    "optimal_exponent_base",
    "block_loss",
    "quantize_scalar",
    "dequantize_scalar",
    "convert_matrix",
    "quantize_vector",
    "quantize_vector_segment",
    "memory_footprint_bits",
    "coo_footprint_bits",
    "COO_BITS_PER_ENTRY",
    "EXPONENT_BASE_BITS",
]

COO_BITS_PER_ENTRY = 32 + 32 + 64
EXPONENT_BASE_BITS = 11
INDEX_BITS = 32


@dataclass(frozen=True)
class ReFloatConfig:
    b: int = 7
    e: int = 3
    f: int = 3
    e_v: int = 3
    f_v: int = 8

    def __post_init__(self):
        if not 1 <= self.b <= 31:
            raise ValueError(f"b must be in [1, 31], got {self.b}")
        for name in ("e", "e_v"):
            if not 1 <= getattr(self, name) <= 11:
                raise ValueError(f"{name} must be in [1, 11], got {getattr(self, name)}")
        for name in ("f", "f_v"):
            if not 0 <= getattr(self, name) <= 52:
                raise ValueError(f"{name} must be in [0, 52], got {getattr(self, name)}")

    @classmethod
    def lossless(cls, b: int = 7) -> "ReFloatConfig":
        return cls(b=b, e=11, f=52, e_v=11, f_v=52)

    @property
    def block_size(self) -> int:
        return 1 << self.b

    @property
    def entry_bits(self) -> int:
        """Bits per stored nonzero: sign, offset, fraction and two local indices."""
        return 1 + self.e + self.f + 2 * self.b

    @property
    def block_overhead_bits(self) -> int:
        return 2 * (INDEX_BITS - self.b) + EXPONENT_BASE_BITS


class QuantizedScalar(NamedTuple):
    sign: int  # 0 for +, 1 for -
    offset: int
    fraction: int
    is_zero: bool = False


def offset_window(bits: int) -> tuple[int, int]:
    """Inclusive range of an offset stored in ``bits`` bits."""
    if bits < 1:
        raise ValueError("offset needs at least one bit")
    half = 1 << (bits - 1)
    return -half + 1, half - 1


def _round_mean(total, count):
    """round(total / count) with ties away from zero, in exact integer arithmetic."""
    total = np.asarray(total, dtype=np.int64)
    count = np.asarray(count, dtype=np.int64)
    q = (2 * np.abs(total) + count) // (2 * count)
    return np.where(total < 0, -q, q)


def optimal_exponent_base(exponents) -> int:
    """Integer base minimising the squared exponent offsets of a block."""
    exps = np.asarray(list(exponents) if not isinstance(exponents, np.ndarray) else exponents, dtype=np.int64)
    if exps.size == 0:
        raise ValueError("exponent base of an empty block is undefined")
    return int(_round_mean(exps.sum(), exps.size))


def block_loss(block_exponents, e_b: int) -> int:
    exps = [int(x) for x in block_exponents]
    if not exps:
        raise ValueError("loss of an empty block is undefined")
    return sum((x - e_b) ** 2 for x in exps)


def _split(values: np.ndarray, bits_f: int):
    """Sign, unbiased exponent and truncated leading fraction bits of each value."""
    mant, exp2 = np.frexp(np.abs(values))
    # frexp gives m in [0.5, 1); the binary64 form is (2m) * 2^(exp2 - 1)
    exps = exp2.astype(np.int64) - 1
    frac = np.floor((2.0 * mant - 1.0) * 2.0**bits_f).astype(np.int64)
    sign = np.signbit(values).astype(np.int8)
    return sign, exps, frac


def _quantize(values: np.ndarray, base, bits_e: int, bits_f: int):
    """Vectorised core of scalar quantisation.

    Returns sign, offset, fraction, zero flag and a saturation mask.
    """
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot quantize NaN or infinity")
    lo, hi = offset_window(bits_e)
    sign, exps, frac = _split(values, bits_f)
    is_zero = values == 0.0
    raw = exps - np.asarray(base, dtype=np.int64)
    offset = np.clip(raw, lo, hi)
    saturated = (raw != offset) & ~is_zero
    offset = np.where(is_zero, 0, offset)
    frac = np.where(is_zero, 0, frac)
    sign = np.where(is_zero, 0, sign).astype(np.int8)
    return sign, offset, frac, is_zero, saturated


def _dequantize(sign, offset, fraction, bits_f: int, base=0, is_zero=None) -> np.ndarray:
    mag = np.ldexp(
        1.0 + np.asarray(fraction, dtype=np.float64) * 2.0**-bits_f,
        (np.asarray(base, dtype=np.int64) + np.asarray(offset, dtype=np.int64)).astype(np.int32),
    )
    out = np.where(np.asarray(sign) != 0, -mag, mag)
    if is_zero is not None:
        out = np.where(is_zero, 0.0, out)
    return out


def quantize_scalar(value: float, e_b: int, bits_e: int, bits_f: int) -> QuantizedScalar:
    if not np.isfinite(value):
        raise ValueError(f"cannot quantize {value!r}")
    s, o, fr, z, _ = _quantize(np.array([value]), e_b, bits_e, bits_f)
    return QuantizedScalar(int(s[0]), int(o[0]), int(fr[0]), bool(z[0]))


def dequantize_scalar(q: QuantizedScalar, e_b: int, bits_f: int) -> float:
    if q.is_zero:
        return 0.0
    return float(_dequantize(q.sign, q.offset, q.fraction, bits_f, e_b))


@dataclass(eq=False)
class ReFloatBlock:
    """One quantised 2^b x 2^b block. Entry arrays are ordered by (ii, jj)."""

    config: ReFloatConfig
    block_row: int
    block_col: int
    e_b: int
    ii: np.ndarray
    jj: np.ndarray
    sign: np.ndarray
    offset: np.ndarray
    fraction: np.ndarray

    @property
    def nnz(self) -> int:
        return len(self.ii)

    @property
    def entries(self) -> list[tuple[int, int, QuantizedScalar]]:
        return [
            (int(i), int(j), QuantizedScalar(int(s), int(o), int(fr)))
            for i, j, s, o, fr in zip(self.ii, self.jj, self.sign, self.offset, self.fraction)
        ]

    def unscaled_values(self) -> np.ndarray:
        """Entry values with the block base left out (base 0)."""
        return _dequantize(self.sign, self.offset, self.fraction, self.config.f)

    def values(self) -> np.ndarray:
        return _dequantize(self.sign, self.offset, self.fraction, self.config.f, self.e_b)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.config.block_size,) * 2)
        out[self.ii, self.jj] = self.values()
        return out


_BLOCK_ARRAYS = ("block_row", "block_col", "e_b", "ptr")
_ENTRY_ARRAYS = ("ii", "jj", "sign", "offset", "fraction")


@dataclass(eq=False)
class BlockedMatrix:
    """A matrix in ReFloat form, blocks stored in block-major order.

    Block ``k`` owns entries ``ptr[k]:ptr[k+1]`` of the flat entry arrays.
    ``matrix_saturations`` counts nonzeros whose offset was clamped at
    conversion; it is bookkeeping and not part of equality.
    """

    config: ReFloatConfig
    n_rows: int
    n_cols: int
    parallel_width: int
    block_row: np.ndarray
    block_col: np.ndarray
    e_b: np.ndarray
    ptr: np.ndarray
    ii: np.ndarray
    jj: np.ndarray
    sign: np.ndarray
    offset: np.ndarray
    fraction: np.ndarray
    matrix_saturations: int = field(default=0, compare=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_blocks(self) -> int:
        return len(self.block_row)

    @property
    def nnz(self) -> int:
        return len(self.ii)

    def block(self, k: int) -> ReFloatBlock:
        lo, hi = int(self.ptr[k]), int(self.ptr[k + 1])
        return ReFloatBlock(
            self.config,
            int(self.block_row[k]),
            int(self.block_col[k]),
            int(self.e_b[k]),
            self.ii[lo:hi],
            self.jj[lo:hi],
            self.sign[lo:hi],
            self.offset[lo:hi],
            self.fraction[lo:hi],
        )

    @property
    def blocks(self) -> list[ReFloatBlock]:
        return [self.block(k) for k in range(self.n_blocks)]

    def entry_block_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_blocks), np.diff(self.ptr))

    def global_rows(self) -> np.ndarray:
        return self.block_row[self.entry_block_index()] * self.config.block_size + self.ii

    def global_cols(self) -> np.ndarray:
        return self.block_col[self.entry_block_index()] * self.config.block_size + self.jj

    def values(self) -> np.ndarray:
        """Dequantised value of every stored entry, in storage order."""
        base = self.e_b[self.entry_block_index()]
        return _dequantize(self.sign, self.offset, self.fraction, self.config.f, base)

    def to_coo(self) -> SparseMatrixCoo:
        return SparseMatrixCoo.from_arrays(
            self.n_rows, self.n_cols, self.global_rows(), self.global_cols(), self.values()
        )

    def footprint_bits(self) -> int:
        return self.nnz * self.config.entry_bits + self.n_blocks * self.config.block_overhead_bits

    def coo_bits(self) -> int:
        return self.nnz * COO_BITS_PER_ENTRY

    def memory_ratio(self) -> float | None:
        coo = self.coo_bits()
        return self.footprint_bits() / coo if coo else None

    def validate(self) -> None:
        """Check the structural invariants; raises ValueError on the first violation."""
        nb = self.n_blocks
        if len(self.ptr) != nb + 1 or self.ptr[0] != 0 or self.ptr[-1] != self.nnz:
            raise ValueError("block pointer array is inconsistent")
        counts = np.diff(self.ptr)
        if np.any(counts < 1):
            raise ValueError(f"block {int(np.flatnonzero(counts < 1)[0])} is empty")
        size = self.config.block_size
        if np.any((self.ii < 0) | (self.ii >= size) | (self.jj < 0) | (self.jj >= size)):
            raise ValueError("local index outside the block")
        if nb:
            if self.global_rows().max() >= self.n_rows or self.global_cols().max() >= self.n_cols:
                raise ValueError("entry outside the matrix")
        lo, hi = offset_window(self.config.e)
        if np.any((self.offset < lo) | (self.offset > hi)):
            raise ValueError("offset outside the saturation window")
        if np.any((self.fraction < 0) | (self.fraction >= (1 << self.config.f))):
            raise ValueError("fraction wider than f bits")
        key = self.entry_block_index() * size * size + self.ii * size + self.jj
        if len(np.unique(key)) != len(key):
            dup = np.sort(key)
            d = dup[1:][dup[1:] == dup[:-1]][0]
            raise ValueError(f"duplicate local index in block {int(d // (size * size))}")
        blk = np.unique(self.block_row * (1 << 32) + self.block_col)
        if len(blk) != nb:
            raise ValueError("block coordinates repeat")

    def __eq__(self, other) -> bool:
        if not isinstance(other, BlockedMatrix):
            return NotImplemented
        if (self.config, self.n_rows, self.n_cols, self.parallel_width) != (
            other.config,
            other.n_rows,
            other.n_cols,
            other.parallel_width,
        ):
            return False
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in _BLOCK_ARRAYS + _ENTRY_ARRAYS
        )

    __hash__ = None


def convert_matrix(
    matrix: SparseMatrixCoo,
    config: ReFloatConfig,
    parallel_width: int | None = None,
) -> BlockedMatrix:
    """Convert an exact COO matrix to ReFloat blocks in block-major order.

    ``parallel_width`` defaults to the number of processing engines the
    default hardware fits for this (e, f).
    """
    if matrix.n_rows > 1 << 32 or matrix.n_cols > 1 << 32:
        raise ValueError("matrix indices must fit in 32 bits")
    if parallel_width is None:
        parallel_width = default_parallel_width(config.e, config.f)
    b = config.b
    mask = (1 << b) - 1
    rows, cols, vals = matrix.rows, matrix.cols, matrix.values

    br, bc = rows >> b, cols >> b
    n_block_cols = (matrix.n_cols >> b) + 1
    ukeys, inverse = np.unique(br * n_block_cols + bc, return_inverse=True)
    ubr, ubc = ukeys // n_block_cols, ukeys % n_block_cols

    _, exps, _ = _split(vals, config.f)
    counts = np.bincount(inverse, minlength=len(ukeys))
    sums = np.zeros(len(ukeys), dtype=np.int64)
    np.add.at(sums, inverse, exps)
    e_b = _round_mean(sums, np.maximum(counts, 1)).astype(np.int64)

    sign, offset, frac, _, saturated = _quantize(vals, e_b[inverse], config.e, config.f)

    order = block_major_order(ubr, ubc, parallel_width)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    ii, jj = rows & mask, cols & mask
    perm = np.lexsort((jj, ii, rank[inverse]))

    ptr = np.zeros(len(ukeys) + 1, dtype=np.int64)
    np.cumsum(counts[order], out=ptr[1:])
    return BlockedMatrix(
        config=config,
        n_rows=matrix.n_rows,
        n_cols=matrix.n_cols,
        parallel_width=int(parallel_width),
        block_row=ubr[order].astype(np.int64),
        block_col=ubc[order].astype(np.int64),
        e_b=e_b[order],
        ptr=ptr,
        ii=ii[perm].astype(np.int64),
        jj=jj[perm].astype(np.int64),
        sign=sign[perm].astype(np.int8),
        offset=offset[perm].astype(np.int64),
        fraction=frac[perm].astype(np.int64),
        matrix_saturations=int(saturated.sum()),
    )


@dataclass(eq=False)
class QuantizedVectorSegment:
    segment_index: int
    e_vb: int
    bits_f: int
    sign: np.ndarray
    offset: np.ndarray
    fraction: np.ndarray
    is_zero: np.ndarray

    @property
    def elems(self) -> list[QuantizedScalar]:
        return [
            QuantizedScalar(int(s), int(o), int(fr), bool(z))
            for s, o, fr, z in zip(self.sign, self.offset, self.fraction, self.is_zero)
        ]

    def unscaled_values(self) -> np.ndarray:
        return _dequantize(self.sign, self.offset, self.fraction, self.bits_f, 0, self.is_zero)

    def values(self) -> np.ndarray:
        return _dequantize(self.sign, self.offset, self.fraction, self.bits_f, self.e_vb, self.is_zero)


@dataclass(eq=False)
class QuantizedVector:
    """A whole vector quantised segment by segment; arrays have shape (segments, 2^b)."""

    config: ReFloatConfig
    length: int
    e_vb: np.ndarray
    sign: np.ndarray
    offset: np.ndarray
    fraction: np.ndarray
    is_zero: np.ndarray
    saturations: int

    @property
    def n_segments(self) -> int:
        return len(self.e_vb)

    def segment(self, i: int) -> QuantizedVectorSegment:
        return QuantizedVectorSegment(
            i,
            int(self.e_vb[i]),
            self.config.f_v,
            self.sign[i],
            self.offset[i],
            self.fraction[i],
            self.is_zero[i],
        )

    def unscaled_values(self) -> np.ndarray:
        """Padded flat vector of per-element values with segment bases left out."""
        out = _dequantize(self.sign, self.offset, self.fraction, self.config.f_v, 0, self.is_zero)
        return out.reshape(-1)

    def values(self) -> np.ndarray:
        out = _dequantize(
            self.sign, self.offset, self.fraction, self.config.f_v, self.e_vb[:, None], self.is_zero
        )
        return out.reshape(-1)[: self.length]


def quantize_vector(x, config: ReFloatConfig) -> QuantizedVector:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    size = config.block_size
    n_seg = -(-len(x) // size)
    padded = np.zeros(n_seg * size)
    padded[: len(x)] = x
    seg = padded.reshape(n_seg, size)

    _, exps, _ = _split(seg, config.f_v)
    nonzero = seg != 0.0
    counts = nonzero.sum(axis=1)
    sums = np.where(nonzero, exps, 0).sum(axis=1)
    e_vb = np.where(counts > 0, _round_mean(sums, np.maximum(counts, 1)), 0).astype(np.int64)

    sign, offset, frac, is_zero, saturated = _quantize(seg, e_vb[:, None], config.e_v, config.f_v)
    return QuantizedVector(config, len(x), e_vb, sign, offset, frac, is_zero, int(saturated.sum()))


def quantize_vector_segment(segment, config: ReFloatConfig, segment_index: int = 0) -> QuantizedVectorSegment:
    segment = np.asarray(segment, dtype=np.float64)
    if segment.shape != (config.block_size,):
        raise ValueError(f"segment must have exactly {config.block_size} elements")
    seg = quantize_vector(segment, config).segment(0)
    seg.segment_index = segment_index
    return seg


def memory_footprint_bits(blocked: BlockedMatrix) -> int:
    return blocked.footprint_bits()


def coo_footprint_bits(matrix: SparseMatrixCoo) -> int:
    return matrix.nnz * COO_BITS_PER_ENTRY
