"""Binary container for :class:`BlockedMatrix`, written in block-major order.

Layout (all header integers little-endian)::

    magic    4 bytes  b"RFLT"
    version  u16
    n_rows, n_cols                u64 each
    b, e, f, e_v, f_v             u8 each
    parallel width, block count   u64 each

then one record per block, each starting on a byte boundary::

    block_row  (32 - b) bits
    block_col  (32 - b) bits
    e_b        11 bits, biased by 1023
    count      (2b + 1) bits
    count x [ii (b) | jj (b) | sign (1) | offset (e, two's complement) | fraction (f)]

Bits fill each byte from the least significant end; every field is
written most significant bit first.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .format import EXPONENT_BASE_BITS, INDEX_BITS, BlockedMatrix, ReFloatConfig
from .layout import block_major_order

__all__ = [
    "MAGIC",
    "VERSION",
    "ContainerError",
    "serialize",
    "deserialize",
    "dumps",
    "loads",
    "block_payload_bits",
    "block_record_bytes",
    "block_major_order",
    "SequentialAccessReport",
    "sequential_access_check",
]

MAGIC = b"RFLT"
VERSION = 1
EXPONENT_BIAS = 1023
_HEADER = struct.Struct("<4sHQQBBBBBQQ")


class ContainerError(ValueError):
    """Malformed, truncated or inconsistent container data."""


def _count_bits(b: int) -> int:
    # a block holds at most 2^(2b) entries
    return 2 * b + 1


def _block_header_bits(config: ReFloatConfig) -> int:
    return 2 * (INDEX_BITS - config.b) + EXPONENT_BASE_BITS + _count_bits(config.b)


def block_payload_bits(config: ReFloatConfig, nnz: int, with_count: bool = True) -> int:
    """Bits of one block record before byte alignment.

    ``with_count=False`` gives the storage accounting of the format itself
    (coordinates, base and entries), which leaves out the entry-count field
    the container adds.
    """
    bits = nnz * config.entry_bits + config.block_overhead_bits
    return bits + (_count_bits(config.b) if with_count else 0)


def block_record_bytes(config: ReFloatConfig, nnz: int) -> int:
    return -(-block_payload_bits(config, nnz) // 8)


def _field_bits(values, width: int) -> np.ndarray:
    """(n, width) uint8 matrix of each value's low ``width`` bits, MSB first."""
    v = np.asarray(values).astype(np.uint64)
    if width == 0:
        return np.zeros((len(v), 0), dtype=np.uint8)
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    return ((v[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)


def _read_fields(bits: np.ndarray, width: int) -> np.ndarray:
    """Inverse of :func:`_field_bits` for a (n, width) bit matrix."""
    if width == 0:
        return np.zeros(bits.shape[0], dtype=np.int64)
    weights = np.uint64(1) << np.arange(width - 1, -1, -1, dtype=np.uint64)
    return (bits.astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64).astype(np.int64)


def _encode(blocked: BlockedMatrix) -> bytes:
    cfg = blocked.config
    b, e, f = cfg.b, cfg.e, cfg.f
    coord_w = INDEX_BITS - b
    header = _HEADER.pack(
        MAGIC, VERSION, blocked.n_rows, blocked.n_cols, b, e, f, cfg.e_v, cfg.f_v,
        blocked.parallel_width, blocked.n_blocks,
    )
    if blocked.n_blocks == 0:
        return header

    biased = blocked.e_b + EXPONENT_BIAS
    if np.any((biased < 0) | (biased >= 1 << EXPONENT_BASE_BITS)):
        raise ValueError("exponent base does not fit the 11-bit biased field")
    if np.any(blocked.block_row >= 1 << coord_w) or np.any(blocked.block_col >= 1 << coord_w):
        raise ValueError("block coordinate does not fit its field")
    counts = np.diff(blocked.ptr)

    head_bits = np.hstack([
        _field_bits(blocked.block_row, coord_w),
        _field_bits(blocked.block_col, coord_w),
        _field_bits(biased, EXPONENT_BASE_BITS),
        _field_bits(counts, _count_bits(b)),
    ])
    offset_tc = blocked.offset & ((1 << e) - 1)
    entry_bits = np.hstack([
        _field_bits(blocked.ii, b),
        _field_bits(blocked.jj, b),
        _field_bits(blocked.sign, 1),
        _field_bits(offset_tc, e),
        _field_bits(blocked.fraction, f),
    ])
    H, W = head_bits.shape[1], cfg.entry_bits

    lengths = H + counts * W
    padded = -(-lengths // 8) * 8
    starts = np.zeros(len(padded), dtype=np.int64)
    np.cumsum(padded[:-1], out=starts[1:])
    out = np.zeros(int(padded.sum()), dtype=np.uint8)
    out[(starts[:, None] + np.arange(H)).reshape(-1)] = head_bits.reshape(-1)
    if W:
        blk = blocked.entry_block_index()
        local = np.arange(blocked.nnz) - blocked.ptr[blk]
        pos = starts[blk] + H + local * W
        out[(pos[:, None] + np.arange(W)).reshape(-1)] = entry_bits.reshape(-1)
    return header + np.packbits(out, bitorder="little").tobytes()


def _decode(data: bytes) -> BlockedMatrix:
    if len(data) < 4 or data[:4] != MAGIC:
        raise ContainerError("bad magic: not a ReFloat container")
    if len(data) < _HEADER.size:
        raise ContainerError("truncated header")
    magic, version, n_rows, n_cols, b, e, f, e_v, f_v, P, n_blocks = _HEADER.unpack_from(data)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version} (expected {VERSION})")
    try:
        cfg = ReFloatConfig(b, e, f, e_v, f_v)
    except ValueError as exc:
        raise ContainerError(f"invalid format parameters: {exc}") from None

    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size), bitorder="little")
    coord_w = INDEX_BITS - b
    H, W = _block_header_bits(cfg), cfg.entry_bits
    cw = _count_bits(b)
    # header weights, for reading one block header with a dot product
    head_w = [
        (0, coord_w), (coord_w, 2 * coord_w),
        (2 * coord_w, 2 * coord_w + EXPONENT_BASE_BITS), (2 * coord_w + EXPONENT_BASE_BITS, H),
    ]
    powers = {w: 1 << np.arange(w - 1, -1, -1, dtype=np.int64) for w in {coord_w, EXPONENT_BASE_BITS, cw}}

    block_row = np.zeros(n_blocks, dtype=np.int64)
    block_col = np.zeros(n_blocks, dtype=np.int64)
    e_b = np.zeros(n_blocks, dtype=np.int64)
    counts = np.zeros(n_blocks, dtype=np.int64)
    entry_starts = np.zeros(n_blocks, dtype=np.int64)
    pos = 0
    total = len(bits)
    for k in range(n_blocks):
        if pos + H > total:
            raise ContainerError(f"truncated stream in block {k}")
        hb = bits[pos:pos + H].astype(np.int64)
        fields = [int(hb[lo:hi] @ powers[hi - lo]) for lo, hi in head_w]
        block_row[k], block_col[k] = fields[0], fields[1]
        e_b[k] = fields[2] - EXPONENT_BIAS
        counts[k] = fields[3]
        if counts[k] == 0:
            raise ContainerError(f"block {k} declares no entries")
        end = pos + H + counts[k] * W
        if end > total:
            raise ContainerError(f"truncated stream in block {k}")
        entry_starts[k] = pos + H
        pos = -(-end // 8) * 8
    if pos != total:
        raise ContainerError(f"{(total - pos) // 8} trailing bytes after the last block")

    ptr = np.zeros(n_blocks + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    nnz = int(ptr[-1])
    blk = np.repeat(np.arange(n_blocks), counts)
    local = np.arange(nnz) - ptr[blk]
    start = entry_starts[blk] + local * W
    eb = bits[start[:, None] + np.arange(W)] if W else np.zeros((nnz, 0), dtype=np.uint8)

    col = 0
    parts = []
    for w in (b, b, 1, e, f):
        parts.append(_read_fields(eb[:, col:col + w], w))
        col += w
    ii, jj, sign, offset_tc, fraction = parts
    offset = np.where(offset_tc >= 1 << (e - 1), offset_tc - (1 << e), offset_tc)

    blocked = BlockedMatrix(
        config=cfg,
        n_rows=int(n_rows),
        n_cols=int(n_cols),
        parallel_width=int(P),
        block_row=block_row,
        block_col=block_col,
        e_b=e_b,
        ptr=ptr,
        ii=ii,
        jj=jj,
        sign=sign.astype(np.int8),
        offset=offset.astype(np.int64),
        fraction=fraction,
    )
    try:
        blocked.validate()
    except ValueError as exc:
        raise ContainerError(f"invalid container contents: {exc}") from None
    return blocked


def serialize(blocked: BlockedMatrix, sink) -> int:
    """Write ``blocked`` to a binary stream or path; returns the byte count."""
    data = _encode(blocked)
    if isinstance(sink, (str, bytes)) or hasattr(sink, "__fspath__"):
        with open(sink, "wb") as fh:
            fh.write(data)
    else:
        sink.write(data)
    return len(data)


def deserialize(source) -> BlockedMatrix:
    """Read a container from bytes, a binary stream or a path."""
    if isinstance(source, (bytes, bytearray, memoryview)):
        data = bytes(source)
    elif isinstance(source, str) or hasattr(source, "__fspath__"):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = source.read()
    return _decode(data)


def dumps(blocked: BlockedMatrix) -> bytes:
    buf = io.BytesIO()
    serialize(blocked, buf)
    return buf.getvalue()


def loads(data: bytes) -> BlockedMatrix:
    return deserialize(data)


@dataclass(frozen=True)
class SequentialAccessReport:
    parallel_width: int
    n_blocks: int
    rounds: int
    max_live_inputs: int
    max_live_outputs: int
    high_water: int
    bound: int

    @property
    def within_bound(self) -> bool:
        return self.high_water <= self.bound


def sequential_access_check(blocked: BlockedMatrix, parallel_width: int | None = None) -> SequentialAccessReport:
    """Replay the block stream through ``P`` engines and measure segment buffers.

    Each round takes the next ``P`` blocks in file order. It needs the
    input segments of their block columns and keeps partials for their
    block rows until the round commits. The high-water mark is the largest
    input plus output segment count of any round; by construction it is at
    most 2P however many block rows the matrix spans.
    """
    P = int(parallel_width or blocked.parallel_width)
    if P < 1:
        raise ValueError("parallel width must be >= 1")
    n = blocked.n_blocks
    max_in = max_out = high = 0
    for lo in range(0, n, P):
        rows = np.unique(blocked.block_row[lo:lo + P])
        cols = np.unique(blocked.block_col[lo:lo + P])
        max_in = max(max_in, len(cols))
        max_out = max(max_out, len(rows))
        high = max(high, len(rows) + len(cols))
    rounds = -(-n // P)
    return SequentialAccessReport(P, n, rounds, max_in, max_out, high, 2 * P)
