"""Dense token grids: the batch x rows x cols x dim substrate for all block ops.

A grid holds one D-dimensional token per (row, col) cell. Flattening is always
raster order (rows outer, cols inner); transposition swaps the two spatial
axes and is materialized so downstream scans read contiguous memory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

CANONICAL = "canonical"
TRANSPOSED = "transposed"


@dataclass(frozen=True)
class TokenGrid:
    """Immutable (batch, h, w, D) float64 token tensor with an orientation flag.

    The orientation records whether this grid is a transposed view of a
    canonical grid; alternating blocks use it to restore the original layout.
    """

    values: np.ndarray
    orientation: str = CANONICAL

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4:
            raise ShapeError(f"token grid needs 4 axes (batch, h, w, D), got {v.ndim}")
        if min(v.shape) < 1:
            raise ShapeError(f"all grid dims must be >= 1, got {v.shape}")
        if self.orientation not in (CANONICAL, TRANSPOSED):
            raise ValueError(f"unknown orientation {self.orientation!r}")
        object.__setattr__(self, "values", np.ascontiguousarray(v))

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def h(self) -> int:
        return self.values.shape[1]

    @property
    def w(self) -> int:
        return self.values.shape[2]

    @property
    def dim(self) -> int:
        return self.values.shape[3]

    @property
    def tokens(self) -> int:
        return self.h * self.w

    def with_values(self, values: np.ndarray) -> "TokenGrid":
        """Same orientation, new payload of identical shape."""
        if values.shape != self.values.shape:
            raise ShapeError(f"expected {self.values.shape}, got {values.shape}")
        return TokenGrid(values, self.orientation)


def transpose_grid(g: TokenGrid) -> TokenGrid:
    """Swap the two spatial axes: out(b, i, j, d) = in(b, j, i, d).

    Returns a materialized copy (not a strided view) with the orientation
    flag toggled. Involution: transpose(transpose(g)) is bit-identical to g.
    """
    flipped = TRANSPOSED if g.orientation == CANONICAL else CANONICAL
    return TokenGrid(np.ascontiguousarray(g.values.transpose(0, 2, 1, 3)), flipped)


def raster_flatten(g: TokenGrid) -> np.ndarray:
    """Flatten to (batch, h*w, D), tokens emitted in row-major raster order."""
    return g.values.reshape(g.batch, g.tokens, g.dim).copy()


def raster_unflatten(seq: np.ndarray, h: int, w: int, dim: int,
                     orientation: str = CANONICAL) -> TokenGrid:
    """Inverse of raster_flatten: (batch, h*w, D) or (batch, h*w*D) back to a grid."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim == 2:
        per_batch = seq.shape[1]
    elif seq.ndim == 3:
        per_batch = seq.shape[1] * seq.shape[2]
    else:
        raise ShapeError(f"sequence needs 2 or 3 axes, got {seq.ndim}")
    if per_batch != h * w * dim:
        raise ShapeError(
            f"sequence of {per_batch} values per batch does not factor as "
            f"h*w*D = {h}*{w}*{dim}"
        )
    return TokenGrid(seq.reshape(seq.shape[0], h, w, dim), orientation)
