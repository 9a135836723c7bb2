"""Matrix Market ingestion, exact COO matrices, right-hand sides and exact SpMV."""

from __future__ import annotations

import gzip
import io
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

__all__ = [
    "MatrixMarketError",
    "SparseMatrixCoo",
    "parse_matrix_market",
    "read_matrix_market",
    "write_matrix_market",
    "generate_rhs",
    "exact_spmv",
    "RHS_MODES",
]

RHS_MODES = ("ones-solution", "ones-rhs", "seeded-random")


class MatrixMarketError(ValueError):
    """Raised for malformed or unsupported Matrix Market input."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class SparseMatrixCoo:
    """Exact binary64 sparse matrix in canonical coordinate form.

    Entries are sorted by (row, col), contain no duplicates and no stored
    zeros. Build instances with :meth:`from_entries` or
    :meth:`from_arrays` so the invariants are enforced.
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    @classmethod
    def from_arrays(cls, n_rows, n_cols, rows, cols, values) -> "SparseMatrixCoo":
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(cols, dtype=np.int64).reshape(-1)
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if not (len(rows) == len(cols) == len(values)):
            raise ValueError("rows, cols and values must have equal length")
        if n_rows < 0 or n_cols < 0:
            raise ValueError("matrix dimensions must be non-negative")
        if len(rows):
            if rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols:
                raise ValueError("entry index out of range")
            if not np.all(np.isfinite(values)):
                raise ValueError("matrix values must be finite")
        keep = values != 0.0
        rows, cols, values = rows[keep], cols[keep], values[keep]
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        if len(rows) > 1:
            dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if dup.any():
                k = int(np.flatnonzero(dup)[0])
                raise ValueError(f"duplicate entry at ({rows[k]}, {cols[k]})")
        return cls(int(n_rows), int(n_cols), rows, cols, values)

    @classmethod
    def from_entries(cls, n_rows, n_cols, entries) -> "SparseMatrixCoo":
        entries = list(entries)
        if not entries:
            return cls.from_arrays(n_rows, n_cols, [], [], [])
        r, c, v = zip(*entries)
        return cls.from_arrays(n_rows, n_cols, r, c, v)

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrixCoo":
        dense = np.asarray(dense, dtype=np.float64)
        r, c = np.nonzero(dense)
        return cls.from_arrays(dense.shape[0], dense.shape[1], r, c, dense[r, c])

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def entries(self) -> list[tuple[int, int, float]]:
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()))

    @cached_property
    def csr(self) -> sp.csr_matrix:
        # indices are already row-major sorted, so scipy keeps our column order
        indptr = np.zeros(self.n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.rows, minlength=self.n_rows), out=indptr[1:])
        return sp.csr_matrix((self.values, self.cols, indptr), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = self.values
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseMatrixCoo):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.rows, other.rows)
            and np.array_equal(self.cols, other.cols)
            and np.array_equal(self.values.view(np.int64), other.values.view(np.int64))
        )

    __hash__ = None


_SUPPORTED_FIELDS = ("real", "integer")
_SUPPORTED_SYMMETRY = ("general", "symmetric")


def parse_matrix_market(data: bytes | str) -> SparseMatrixCoo:
    """Parse Matrix Market coordinate text into a canonical COO matrix.

    Symmetric storage is expanded to both triangles (the diagonal is kept
    once) and explicit zeros are dropped. Errors carry the 1-based line
    number of the offending line.
    """
    if isinstance(data, bytes):
        data = data.decode("ascii", errors="replace")
    lines = data.splitlines()
    if not lines:
        raise MatrixMarketError("empty input", 1)

    header = lines[0].split()
    if len(header) != 5 or header[0].lower() != "%%matrixmarket":
        raise MatrixMarketError("missing %%MatrixMarket header", 1)
    obj, fmt, fld, sym = (h.lower() for h in header[1:])
    if obj != "matrix":
        raise MatrixMarketError(f"unsupported object {obj!r}", 1)
    if fmt != "coordinate":
        raise MatrixMarketError(f"unsupported format {fmt!r} (coordinate only)", 1)
    if fld not in _SUPPORTED_FIELDS:
        raise MatrixMarketError(f"unsupported field {fld!r}", 1)
    if sym not in _SUPPORTED_SYMMETRY:
        raise MatrixMarketError(f"unsupported symmetry {sym!r}", 1)

    # skip comments and blank lines up to the size line
    k = 1
    while k < len(lines) and (not lines[k].strip() or lines[k].lstrip().startswith("%")):
        k += 1
    if k >= len(lines):
        raise MatrixMarketError("missing size line", k)
    size = lines[k].split()
    try:
        n_rows, n_cols, nnz = (int(t) for t in size)
    except ValueError:
        raise MatrixMarketError("malformed size line", k + 1) from None
    if n_rows < 0 or n_cols < 0 or nnz < 0:
        raise MatrixMarketError("negative size", k + 1)
    if sym == "symmetric" and n_rows != n_cols:
        raise MatrixMarketError("symmetric matrix must be square", k + 1)

    body_lines = []
    line_numbers = []
    for j in range(k + 1, len(lines)):
        s = lines[j].strip()
        if s and not s.startswith("%"):
            body_lines.append(s)
            line_numbers.append(j + 1)
    if len(body_lines) != nnz:
        where = line_numbers[nnz] if len(body_lines) > nnz else len(lines)
        raise MatrixMarketError(f"expected {nnz} entries, found {len(body_lines)}", where)

    rows, cols, vals = _parse_body(body_lines, line_numbers)

    bad = (rows < 1) | (rows > n_rows) | (cols < 1) | (cols > n_cols)
    if bad.any():
        j = int(np.flatnonzero(bad)[0])
        raise MatrixMarketError(f"index ({rows[j]}, {cols[j]}) out of range", line_numbers[j])
    rows -= 1
    cols -= 1

    if sym == "symmetric":
        off = rows != cols
        rows, cols, vals = (
            np.concatenate([rows, cols[off]]),
            np.concatenate([cols, rows[off]]),
            np.concatenate([vals, vals[off]]),
        )
        origin = np.concatenate([np.arange(nnz), np.flatnonzero(off)])
    else:
        origin = np.arange(nnz)

    order = np.lexsort((cols, rows))
    r, c = rows[order], cols[order]
    if len(r) > 1:
        dup = (r[1:] == r[:-1]) & (c[1:] == c[:-1])
        if dup.any():
            j = origin[order[int(np.flatnonzero(dup)[0]) + 1]]
            raise MatrixMarketError("duplicate entry", line_numbers[j])
    return SparseMatrixCoo.from_arrays(n_rows, n_cols, rows, cols, vals)


def _parse_body(body_lines, line_numbers):
    n = len(body_lines)
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0)
    tokens = " ".join(body_lines).split()
    if len(tokens) == 3 * n:
        try:
            arr = np.array(tokens).reshape(n, 3)
            rows = arr[:, 0].astype(np.int64)
            cols = arr[:, 1].astype(np.int64)
            vals = arr[:, 2].astype(np.float64)
            if np.all(np.isfinite(vals)):
                return rows, cols, vals
        except ValueError:
            pass
    # slow path: find the first offending line
    for s, ln in zip(body_lines, line_numbers):
        parts = s.split()
        if len(parts) != 3:
            raise MatrixMarketError(f"expected 3 fields, found {len(parts)}", ln)
        try:
            int(parts[0]), int(parts[1])
        except ValueError:
            raise MatrixMarketError("non-integer index", ln) from None
        try:
            v = float(parts[2])
        except ValueError:
            raise MatrixMarketError(f"bad value {parts[2]!r}", ln) from None
        if not np.isfinite(v):
            raise MatrixMarketError("non-finite value", ln)
    raise MatrixMarketError("malformed body")  # pragma: no cover


def read_matrix_market(path: str | os.PathLike) -> SparseMatrixCoo:
    """Read a ``.mtx`` or ``.mtx.gz`` file from disk."""
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return parse_matrix_market(fh.read())


def write_matrix_market(matrix: SparseMatrixCoo, sink=None) -> str:
    """Write ``matrix`` as a general real coordinate file.

    Values use 17 significant digits so a re-parse reproduces them exactly.
    Returns the text; also writes it to ``sink`` (path or text stream) when given.
    """
    buf = io.StringIO()
    buf.write("%%MatrixMarket matrix coordinate real general\n")
    buf.write(f"{matrix.n_rows} {matrix.n_cols} {matrix.nnz}\n")
    for r, c, v in zip(matrix.rows.tolist(), matrix.cols.tolist(), matrix.values.tolist()):
        buf.write(f"{r + 1} {c + 1} {v!r}\n")
    text = buf.getvalue()
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w") as fh:
            fh.write(text)
    elif sink is not None:
        sink.write(text)
    return text


def exact_spmv(matrix: SparseMatrixCoo, x) -> np.ndarray:
    """y = A x in binary64, each row summed left to right in ascending column order."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (matrix.n_cols,):
        raise ValueError(f"vector length {x.shape} does not match {matrix.n_cols} columns")
    # scipy's CSR kernel starts every row at 0.0 and adds in stored order
    return matrix.csr @ x


def generate_rhs(matrix: SparseMatrixCoo, mode: str = "ones-solution", seed: int = 0) -> np.ndarray:
    if matrix.n_rows != matrix.n_cols:
        raise ValueError("right-hand side generation needs a square matrix")
    n = matrix.n_rows
    if mode == "ones-solution":
        return exact_spmv(matrix, np.ones(n))
    if mode == "ones-rhs":
        return np.ones(n)
    if mode == "seeded-random":
        return np.random.default_rng(seed).uniform(-1.0, 1.0, n)
    raise ValueError(f"unknown rhs mode {mode!r}; expected one of {RHS_MODES}")
