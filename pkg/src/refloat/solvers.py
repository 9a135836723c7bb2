"""CG and BiCGSTAB over a pluggable SpMV backend.

Only the SpMV goes through the backend. Dot products, axpys and scalars
stay in binary64. Convergence is judged on the recurrence residual; the
true residual against the exact matrix is computed once at the end.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .format import ReFloatConfig, convert_matrix
from .matrix_io import SparseMatrixCoo, exact_spmv
from .spmv import ReFloatSpMV

__all__ = [
    "Status",
    "SolverSettings",
    "ConvergenceTrace",
    "SolverResult",
    "ExactBackend",
    "ReFloatBackend",
    "TruncatedBackend",
    "truncate_values",
    "make_backend",
    "cg_solve",
    "bicgstab_solve",
    "solve",
    "StudyPoint",
    "truncation_study",
    "METHODS",
    "BACKENDS",
]

METHODS = ("cg", "bicgstab")
BACKENDS = ("exact", "refloat")
BREAKDOWN_EPS = 1e-300


class Status(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITER = "max-iter"
    BREAKDOWN = "breakdown"


@dataclass(frozen=True)
class SolverSettings:
    method: str = "cg"
    tolerance: float = 1e-8
    max_iterations: int = 100_000
    backend: str = "exact"
    refloat: ReFloatConfig = field(default_factory=ReFloatConfig)
    threads: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class ConvergenceTrace:
    records: list = field(default_factory=list)
    status: Status = Status.MAX_ITER
    final_true_residual: float = math.nan

    @property
    def iterations(self) -> list[int]:
        return [it for it, _ in self.records]

    @property
    def residuals(self) -> list[float]:
        return [r for _, r in self.records]


@dataclass
class SolverResult:
    solution: np.ndarray
    trace: ConvergenceTrace
    iterations_used: int
    spmv_calls: int
    saturations: int = 0

    @property
    def status(self) -> Status:
        return self.trace.status

    @property
    def converged(self) -> bool:
        return self.trace.status is Status.CONVERGED


class ExactBackend:
    name = "exact"

    def __init__(self, matrix: SparseMatrixCoo):
        self.matrix = matrix
        self.calls = 0
        self.saturations = 0

    def __call__(self, x) -> np.ndarray:
        self.calls += 1
        return exact_spmv(self.matrix, x)


class ReFloatBackend:
    """SpMV through a converted matrix; the vector is re-quantised on every call."""

    name = "refloat"

    def __init__(self, matrix: SparseMatrixCoo, config: ReFloatConfig, threads: int = 1):
        self.matrix = matrix
        self.blocked = convert_matrix(matrix, config)
        self.engine = ReFloatSpMV(self.blocked, threads)
        self.calls = 0

    @property
    def saturations(self) -> int:
        return self.engine.total_saturations + self.blocked.matrix_saturations

    def __call__(self, x) -> np.ndarray:
        self.calls += 1
        return self.engine(x)


def truncate_values(values, exponent_bits: int, fraction_bits: int) -> np.ndarray:
    """Cut binary64 values to a global (exponent, fraction) bit budget.

    Fractions are truncated to ``fraction_bits``. With fewer than 11
    exponent bits the unbiased exponent wraps modulo 2^exponent_bits into
    the signed range, the way a narrow register drops high bits.
    """
    if not 1 <= exponent_bits <= 11:
        raise ValueError("exponent_bits must be in [1, 11]")
    if not 0 <= fraction_bits <= 52:
        raise ValueError("fraction_bits must be in [0, 52]")
    v = np.asarray(values, dtype=np.float64)
    mant, exp2 = np.frexp(np.abs(v))
    exps = exp2.astype(np.int64) - 1
    frac = np.floor((2.0 * mant - 1.0) * 2.0**fraction_bits)
    if exponent_bits < 11:
        half = 1 << (exponent_bits - 1)
        exps = ((exps + half) % (1 << exponent_bits)) - half
    mag = np.ldexp(1.0 + frac * 2.0**-fraction_bits, exps.astype(np.int32))
    out = np.where(np.signbit(v), -mag, mag)
    return np.where(v == 0.0, 0.0, out)


class TruncatedBackend:
    """Exact SpMV on globally truncated operands (matrix once, vector every call)."""

    name = "truncated"

    def __init__(self, matrix: SparseMatrixCoo, exponent_bits: int, fraction_bits: int):
        self.exponent_bits = exponent_bits
        self.fraction_bits = fraction_bits
        self.matrix = matrix
        self.truncated = SparseMatrixCoo.from_arrays(
            matrix.n_rows,
            matrix.n_cols,
            matrix.rows,
            matrix.cols,
            truncate_values(matrix.values, exponent_bits, fraction_bits),
        )
        self.calls = 0
        self.saturations = 0

    def __call__(self, x) -> np.ndarray:
        self.calls += 1
        return exact_spmv(self.truncated, truncate_values(x, self.exponent_bits, self.fraction_bits))


def make_backend(matrix: SparseMatrixCoo, settings: SolverSettings):
    if settings.backend == "exact":
        return ExactBackend(matrix)
    return ReFloatBackend(matrix, settings.refloat, settings.threads)


class _Run:
    """Shared bookkeeping of one solve."""

    def __init__(self, matrix, b, settings, backend, callback):
        if matrix.n_rows != matrix.n_cols:
            raise ValueError("solvers need a square matrix")
        self.b = np.asarray(b, dtype=np.float64)
        if self.b.shape != (matrix.n_rows,):
            raise ValueError(f"right-hand side length {self.b.shape} does not match n={matrix.n_rows}")
        self.matrix = matrix
        self.settings = settings
        self.A = backend if backend is not None else make_backend(matrix, settings)
        self.callback = callback
        self.trace = ConvergenceTrace()

    def record(self, iteration: int, norm: float):
        self.trace.records.append((iteration, norm))
        if self.callback is not None:
            self.callback(iteration, norm)

    def finish(self, x, status: Status, iterations: int) -> SolverResult:
        self.trace.status = status
        true_r = self.b - exact_spmv(self.matrix, x)
        self.trace.final_true_residual = float(np.linalg.norm(true_r))
        return SolverResult(x, self.trace, iterations, self.A.calls, self.A.saturations)


def cg_solve(matrix: SparseMatrixCoo, b, settings: SolverSettings | None = None,
             callback: Callable[[int, float], None] | None = None, backend=None) -> SolverResult:
    """Conjugate gradient from x0 = 0.

    Records ||r|| at iteration 0 and after each update; stops once it drops
    below the tolerance. A non-positive or non-finite p.Ap is a breakdown.
    """
    settings = settings or SolverSettings(method="cg")
    run = _Run(matrix, b, settings, backend, callback)
    A, tol = run.A, settings.tolerance

    x = np.zeros(matrix.n_cols)
    r = run.b - A(x)
    p = r.copy()
    rr = float(r @ r)
    norm = math.sqrt(rr)
    run.record(0, norm)
    if not math.isfinite(norm):
        return run.finish(x, Status.BREAKDOWN, 0)
    if norm < tol:
        return run.finish(x, Status.CONVERGED, 0)

    for it in range(1, settings.max_iterations + 1):
        Ap = A(p)
        pAp = float(p @ Ap)
        if not (pAp > 0 and math.isfinite(pAp)):
            return run.finish(x, Status.BREAKDOWN, it - 1)
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = float(r @ r)
        norm = math.sqrt(rr_new)
        run.record(it, norm)
        if not math.isfinite(norm):
            return run.finish(x, Status.BREAKDOWN, it)
        if norm < tol:
            return run.finish(x, Status.CONVERGED, it)
        beta = rr_new / rr
        p = r + beta * p
        rr = rr_new
    return run.finish(x, Status.MAX_ITER, settings.max_iterations)


def bicgstab_solve(matrix: SparseMatrixCoo, b, settings: SolverSettings | None = None,
                   callback: Callable[[int, float], None] | None = None, backend=None) -> SolverResult:
    """BiCGSTAB (van der Vorst) from x0 = 0 with shadow residual r_hat = r0.

    Two SpMVs per iteration, except a final iteration that already meets
    the tolerance at its half step, which uses one.
    """
    settings = settings or SolverSettings(method="bicgstab")
    run = _Run(matrix, b, settings, backend, callback)
    A, tol = run.A, settings.tolerance

    x = np.zeros(matrix.n_cols)
    r = run.b - A(x)
    r_hat = r.copy()
    norm = float(np.linalg.norm(r))
    run.record(0, norm)
    if not math.isfinite(norm):
        return run.finish(x, Status.BREAKDOWN, 0)
    if norm < tol:
        return run.finish(x, Status.CONVERGED, 0)

    rho = alpha = omega = 1.0
    v = np.zeros_like(r)
    p = np.zeros_like(r)
    for it in range(1, settings.max_iterations + 1):
        rho_new = float(r_hat @ r)
        if not abs(rho_new) >= BREAKDOWN_EPS:
            return run.finish(x, Status.BREAKDOWN, it - 1)
        beta = (rho_new / rho) * (alpha / omega)
        rho = rho_new
        p = r + beta * (p - omega * v)
        v = A(p)
        denom = float(r_hat @ v)
        if not abs(denom) >= BREAKDOWN_EPS:
            return run.finish(x, Status.BREAKDOWN, it - 1)
        alpha = rho / denom
        s = r - alpha * v
        s_norm = float(np.linalg.norm(s))
        if s_norm < tol:
            x += alpha * p
            run.record(it, s_norm)
            return run.finish(x, Status.CONVERGED, it)
        t = A(s)
        tt = float(t @ t)
        omega = float(t @ s) / tt if tt > 0 else 0.0
        if not abs(omega) >= BREAKDOWN_EPS:
            return run.finish(x, Status.BREAKDOWN, it - 1)
        x += alpha * p + omega * s
        r = s - omega * t
        norm = float(np.linalg.norm(r))
        run.record(it, norm)
        if not math.isfinite(norm):
            return run.finish(x, Status.BREAKDOWN, it)
        if norm < tol:
            return run.finish(x, Status.CONVERGED, it)
    return run.finish(x, Status.MAX_ITER, settings.max_iterations)


def solve(matrix: SparseMatrixCoo, b, settings: SolverSettings, callback=None, backend=None) -> SolverResult:
    fn = cg_solve if settings.method == "cg" else bicgstab_solve
    return fn(matrix, b, settings, callback=callback, backend=backend)


@dataclass(frozen=True)
class StudyPoint:
    exponent_bits: int
    fraction_bits: int
    iterations: int | None  # None means no convergence
    status: Status

    @property
    def label(self) -> str:
        return "NC" if self.iterations is None else str(self.iterations)


def truncation_study(matrix: SparseMatrixCoo, b_vec, exponent_bits: int, fraction_bits: int,
                     tolerance: float = 1e-8, max_iterations: int = 100_000) -> StudyPoint:
    """CG iterations to tolerance with every SpMV operand cut to a global bit budget."""
    backend = TruncatedBackend(matrix, exponent_bits, fraction_bits)
    settings = SolverSettings("cg", tolerance, max_iterations)
    res = cg_solve(matrix, b_vec, settings, backend=backend)
    iters = res.iterations_used if res.converged else None
    return StudyPoint(exponent_bits, fraction_bits, iters, res.status)
