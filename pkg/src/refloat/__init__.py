"""ReFloat block floating-point emulator with a ReRAM accelerator cost model."""

from .cost_model import (
    ESCMA_FORMAT,
    FP64_FORMAT,
    CostReport,
    HardwareConfig,
    cluster_crossbars,
    crossbar_count,
    cycle_count,
    engines_available,
    schedule_blocks,
    schedule_escma,
    schedule_spmv,
    scheduling_rounds,
)
from .format import (
    BlockedMatrix,
    QuantizedScalar,
    QuantizedVector,
    QuantizedVectorSegment,
    ReFloatBlock,
    ReFloatConfig,
    block_loss,
    convert_matrix,
    coo_footprint_bits,
    dequantize_scalar,
    memory_footprint_bits,
    offset_window,
    optimal_exponent_base,
    quantize_scalar,
    quantize_vector,
    quantize_vector_segment,
)
from .layout import block_major_order
from .matrix_io import (
    MatrixMarketError,
    SparseMatrixCoo,
    exact_spmv,
    generate_rhs,
    parse_matrix_market,
    read_matrix_market,
    write_matrix_market,
)
from .solvers import (
    ConvergenceTrace,
    SolverResult,
    SolverSettings,
    Status,
    bicgstab_solve,
    cg_solve,
    solve,
    truncate_values,
    truncation_study,
)
from .spmv import (
    BitSerialTrace,
    PartialSegment,
    ReFloatSpMV,
    bit_serial_fixed_mvm,
    block_mvm,
    intermediate_bit_widths,
    spmv,
)
from .streaming import (
    ContainerError,
    deserialize,
    sequential_access_check,
    serialize,
)

__version__ = "0.1.0"
