"""Analytical crossbar, cycle and scheduling model of the ReRAM accelerator.

All counts are exact integers. Only the latency estimate is a float.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

__all__ = [
    "HardwareConfig",
    "CostReport",
    "cluster_crossbars",
    "crossbar_count",
    "cycle_count",
    "engines_available",
    "default_parallel_width",
    "scheduling_rounds",
    "schedule_blocks",
    "schedule_spmv",
    "schedule_escma",
    "ESCMA_FORMAT",
    "FP64_FORMAT",
]

# (e_M, f_M, e_v, f_v) bit budgets of the two reference designs
FP64_FORMAT = (11, 52, 11, 52)
ESCMA_FORMAT = (6, 52, 6, 52)


@dataclass(frozen=True)
class HardwareConfig:
    """Platform parameters.

    ``total_compute_bits`` defaults to 2**34 cells, i.e. 2**20 single-bit
    128x128 crossbars, which is how the 17.1 Gb compute ReRAM budget is
    counted.
    """

    crossbar_dim: int = 128
    total_compute_bits: int = 1 << 34
    cell_bits: int = 1
    write_latency_ns: float = 50.88
    block_compute_latency_ns: float = 107.0

    def __post_init__(self):
        if self.crossbar_dim <= 0 or self.crossbar_dim & (self.crossbar_dim - 1):
            raise ValueError("crossbar_dim must be a positive power of two")
        for name in ("total_compute_bits", "cell_bits", "write_latency_ns", "block_compute_latency_ns"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def total_crossbars(self) -> int:
        return self.total_compute_bits // (self.crossbar_dim**2 * self.cell_bits)


def cluster_crossbars(e_M: int, f_M: int, explicit_leading_bit: bool = False) -> int:
    """Crossbars holding one sign combination of a block.

    One plane per bit of the aligned fixed-point form: 2^e_M padding bits,
    f_M fraction bits and the leading one. ``explicit_leading_bit`` is the
    mapping of the earlier floating-point design, which keeps one more
    plane for the stored 53-bit significand (118 rather than 117 planes
    at e_M=6, f_M=52).
    """
    if e_M < 1 or f_M < 0:
        raise ValueError("need e_M >= 1 and f_M >= 0")
    return (1 << e_M) + f_M + 1 + int(explicit_leading_bit)


def crossbar_count(e_M: int, f_M: int, explicit_leading_bit: bool = False) -> int:
    """Crossbars per processing engine (four clusters, one per sign pair)."""
    return 4 * cluster_crossbars(e_M, f_M, explicit_leading_bit)


def cycle_count(e_M: int, f_M: int, e_v: int, f_v: int) -> int:
    """Cycles of one pipelined block MVM."""
    if e_v < 1 or f_v < 0:
        raise ValueError("need e_v >= 1 and f_v >= 0")
    return ((1 << e_v) + f_v + 1) + cluster_crossbars(e_M, f_M) - 1


def engines_available(hw: HardwareConfig, e_M: int, f_M: int, explicit_leading_bit: bool = False) -> int:
    per_engine = crossbar_count(e_M, f_M, explicit_leading_bit)
    engines = hw.total_crossbars // per_engine
    if engines < 1:
        raise ValueError(
            f"an engine needs {per_engine} crossbars but only {hw.total_crossbars} are available"
        )
    return engines


def default_parallel_width(e: int, f: int, hw: HardwareConfig | None = None) -> int:
    return engines_available(hw or HardwareConfig(), e, f)


def scheduling_rounds(blocks_required: int, engines: int) -> int:
    if engines < 1:
        raise ValueError("engines must be >= 1")
    return -(-blocks_required // engines)


@dataclass(frozen=True)
class CostReport:
    e_M: int
    f_M: int
    e_v: int
    f_v: int
    crossbars_per_cluster: int
    crossbars_per_engine: int
    cycles_per_block_mvm: int
    engines_available: int
    blocks_required: int
    rounds: int
    estimated_spmv_latency_ns: float
    memory_ratio: float | None = None

    def to_rows(self) -> list[tuple[str, object]]:
        return list(asdict(self).items())

    def format_table(self, other: "CostReport | None" = None, titles=("refloat", "escma")) -> str:
        rows = self.to_rows()
        if other is None:
            width = max(len(k) for k, _ in rows)
            return "\n".join(f"{k:<{width}}  {_fmt(v)}" for k, v in rows)
        other_rows = dict(other.to_rows())
        width = max(len(k) for k, _ in rows)
        lines = [f"{'':<{width}}  {titles[0]:>16}  {titles[1]:>16}"]
        for k, v in rows:
            lines.append(f"{k:<{width}}  {_fmt(v):>16}  {_fmt(other_rows[k]):>16}")
        return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def schedule_blocks(
    blocks_required: int,
    e_M: int,
    f_M: int,
    e_v: int,
    f_v: int,
    hw: HardwareConfig | None = None,
    memory_ratio: float | None = None,
    explicit_leading_bit: bool = False,
) -> CostReport:
    """Cost of one SpMV that needs ``blocks_required`` block MVMs.

    Each round rewrites every engine's crossbars and then runs one block
    MVM per engine.
    """
    hw = hw or HardwareConfig()
    per_engine = crossbar_count(e_M, f_M, explicit_leading_bit)
    cycles = cycle_count(e_M, f_M, e_v, f_v)
    engines = engines_available(hw, e_M, f_M, explicit_leading_bit)
    rounds = scheduling_rounds(blocks_required, engines)
    latency = rounds * (per_engine * hw.write_latency_ns + cycles * hw.block_compute_latency_ns)
    return CostReport(
        e_M=e_M,
        f_M=f_M,
        e_v=e_v,
        f_v=f_v,
        crossbars_per_cluster=cluster_crossbars(e_M, f_M, explicit_leading_bit),
        crossbars_per_engine=per_engine,
        cycles_per_block_mvm=cycles,
        engines_available=engines,
        blocks_required=blocks_required,
        rounds=rounds,
        estimated_spmv_latency_ns=latency,
        memory_ratio=memory_ratio,
    )


def schedule_escma(blocks_required: int, hw: HardwareConfig | None = None) -> CostReport:
    """The earlier floating-point design: (6, 52)(6, 52) with its 118-plane clusters."""
    return schedule_blocks(blocks_required, *ESCMA_FORMAT, hw=hw, explicit_leading_bit=True)


def schedule_spmv(blocked, hw: HardwareConfig | None = None, fmt=None) -> CostReport:
    """Schedule a converted matrix.

    ``fmt`` overrides the (e_M, f_M, e_v, f_v) budget, e.g. to price the same
    block count under :data:`ESCMA_FORMAT`; the memory ratio is then omitted.
    """
    if blocked.n_blocks == 0:
        raise ValueError("cannot schedule an empty matrix")
    cfg = blocked.config
    if fmt is None:
        fmt = (cfg.e, cfg.f, cfg.e_v, cfg.f_v)
        ratio = blocked.memory_ratio()
    else:
        ratio = None
    return schedule_blocks(blocked.n_blocks, *fmt, hw=hw, memory_ratio=ratio)
