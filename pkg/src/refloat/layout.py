"""Block-major ordering of non-empty blocks.

Block columns are cut into strips of ``P`` columns. A strip is walked band
by band (one band = one row of blocks), left to right on even bands and
right to left on odd ones, before moving on to the next strip. Every run
of consecutive blocks that share a band and a strip therefore has at most
``P`` blocks, and a strip only ever touches ``P`` input segments.
"""

from __future__ import annotations

import numpy as np

__all__ = ["block_major_order"]


def block_major_order(block_rows, block_cols, parallel_width: int) -> np.ndarray:
    """Permutation that puts the given blocks into block-major order."""
    if parallel_width < 1:
        raise ValueError("parallel width must be >= 1")
    br = np.asarray(block_rows, dtype=np.int64)
    bc = np.asarray(block_cols, dtype=np.int64)
    strip = bc // parallel_width
    # odd bands run right to left
    along = np.where(br % 2 == 0, bc, -bc)
    return np.lexsort((along, br, strip))
