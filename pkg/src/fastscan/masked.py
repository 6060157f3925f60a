"""Pooled scan over irregular (masked) token grids.

Unmasked tokens are kept as a packed list sorted in traversal order, with
their (row, col) coordinates. Transposition is pure index bookkeeping: swap
every coordinate, swap the grid dims and re-sort. Pooling sums each row's
surviving tokens and divides by the full column count w (not the survivor
count), so the pooled magnitude still encodes how full the row was; a
conventional mean divisor is available as an ablation. Decompression
scatters each pooled value back to its row's surviving positions, times an
optional scale (1 while masked, 1 - mask_ratio when transferring the model
to dense inputs).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .block import (
    BlockParams,
    SCAN_PARALLEL,
    SKIP_BEFORE_REPEAT,
    causal_conv1d,
    layer_norm,
    rms_norm,
    silu,
)
from .block import _scan_tokens
from .errors import DomainError, ShapeError
from .grid import TokenGrid

ROW_MAJOR = "row_major"
COL_MAJOR = "col_major"

DIVIDE_BY_COLUMNS = "columns"
DIVIDE_BY_COUNT = "count"


@dataclass(frozen=True)
class MaskedTokenSet:
    """Sorted coordinate list + values for an irregular h x w token grid.

    coords are stored in the current frame and kept sorted lexicographically
    by (row, col) of that frame; the traversal flag records whether the
    current frame is the canonical one (row_major) or the transposed one
    (col_major, i.e. the ordering corresponds to canonical (col, row)).
    """

    h: int
    w: int
    coords: np.ndarray   # (n, 2) int rows/cols in the current frame
    values: np.ndarray   # (n, D)
    traversal: str = ROW_MAJOR
    mask_ratio: float = 0.0

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ShapeError("coords must be (n, 2)")
        n = coords.shape[0]
        if n < 1:
            raise DomainError("a masked token set needs at least one token")
        if values.ndim != 2 or values.shape[0] != n:
            raise ShapeError(f"values must be ({n}, D)")
        if self.traversal not in (ROW_MAJOR, COL_MAJOR):
            raise ValueError(f"unknown traversal {self.traversal!r}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise DomainError("mask_ratio must be in [0, 1)")
        if coords[:, 0].min() < 0 or coords[:, 0].max() >= self.h:
            raise ShapeError("row coordinates out of bounds")
        if coords[:, 1].min() < 0 or coords[:, 1].max() >= self.w:
            raise ShapeError("col coordinates out of bounds")
        keys = coords[:, 0] * self.w + coords[:, 1]
        if np.unique(keys).size != n:
            raise ShapeError("coords must be unique")
        if not (np.diff(keys) > 0).all():
            raise ShapeError("coords must be sorted in traversal order")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "values", values)

    @property
    def count(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def row_ids(self) -> np.ndarray:
        """Current-frame row index of each token, in traversal order."""
        return self.coords[:, 0]

    def with_values(self, values: np.ndarray) -> "MaskedTokenSet":
        if values.shape != self.values.shape:
            raise ShapeError(f"expected {self.values.shape}, got {values.shape}")
        return MaskedTokenSet(self.h, self.w, self.coords, values,
                              self.traversal, self.mask_ratio)


def random_mask(g: TokenGrid, ratio: float, seed: int) -> MaskedTokenSet:
    """Keep round((1 - ratio) * h * w) positions uniformly, deterministically per seed."""
    if not 0.0 <= ratio < 1.0:
        raise DomainError(f"mask ratio must be in [0, 1), got {ratio}")
    if g.batch != 1:
        raise ShapeError("random_mask operates on a single-item batch")
    total = g.tokens
    n_keep = int(round((1.0 - ratio) * total))
    if n_keep < 1:
        raise DomainError(f"ratio {ratio} keeps no tokens on a {g.h}x{g.w} grid")
    rng = np.random.default_rng(seed)
    kept = np.sort(rng.choice(total, size=n_keep, replace=False))
    coords = np.stack([kept // g.w, kept % g.w], axis=1)
    values = g.values[0].reshape(total, g.dim)[kept]
    return MaskedTokenSet(g.h, g.w, coords, values, ROW_MAJOR, ratio)


def transpose_order(m: MaskedTokenSet) -> np.ndarray:
    """Indices that reorder tokens into the transposed frame's traversal."""
    return np.lexsort((m.coords[:, 0], m.coords[:, 1]))


def masked_transpose(m: MaskedTokenSet) -> MaskedTokenSet:
    """Swap coordinates and grid dims, re-sorting for the new traversal.

    The value multiset is unchanged; applying the transpose twice restores
    both the coordinates and the ordering exactly.
    """
    order = transpose_order(m)
    new_traversal = COL_MAJOR if m.traversal == ROW_MAJOR else ROW_MAJOR
    return MaskedTokenSet(m.w, m.h, m.coords[order][:, ::-1], m.values[order],
                          new_traversal, m.mask_ratio)


def _row_segments(row_ids: np.ndarray):
    """Start offsets of runs of equal row ids, plus the id of each run."""
    if row_ids.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(np.diff(row_ids) != 0) + 1
    starts = np.concatenate([[0], change])
    return starts, row_ids[starts]


def _segment_sums(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Per-segment sums, accumulated strictly left to right within a segment."""
    n = values.shape[0]
    bounds = np.concatenate([starts, [n]])
    out = np.empty((starts.size,) + values.shape[1:])
    for i in range(starts.size):
        lo, hi = bounds[i], bounds[i + 1]
        acc = values[lo].copy()
        for j in range(lo + 1, hi):
            acc += values[j]
        out[i] = acc
    return out


def masked_pool_width(m: MaskedTokenSet, divisor: str = DIVIDE_BY_COLUMNS):
    """Pool each nonempty row of the current frame to one vector.

    Default divides row sums by the full column count w; the mean ablation
    divides by the number of surviving tokens instead. Rows with no tokens
    are dropped (the scan only sees rows that exist). Returns
    (pooled, rows): pooled is (h', D) and rows the frame row index of each
    pooled vector, in traversal order.
    """
    starts, rows = _row_segments(m.row_ids())
    sums = _segment_sums(m.values, starts)
    if divisor == DIVIDE_BY_COLUMNS:
        pooled = sums / m.w
    elif divisor == DIVIDE_BY_COUNT:
        counts = np.diff(np.concatenate([starts, [m.count]]))
        pooled = sums / counts[:, None]
    else:
        raise ValueError(f"unknown divisor {divisor!r}")
    return pooled, rows


def masked_repeat_width(pooled: np.ndarray, m: MaskedTokenSet,
                        scale: float = 1.0) -> MaskedTokenSet:
    """Scatter one pooled vector per nonempty row back to its surviving tokens.

    Every unmasked position (i, j) receives scale * pooled(row i). scale
    defaults to 1; use transfer_scale(mask_ratio) when running the masked
    pipeline on dense inputs.
    """
    pooled = np.asarray(pooled, dtype=np.float64)
    starts, rows = _row_segments(m.row_ids())
    if pooled.shape != (rows.size, m.dim):
        raise ShapeError(
            f"pooled must be ({rows.size}, {m.dim}) for this set, got {pooled.shape}"
        )
    seg_of_token = np.repeat(
        np.arange(rows.size), np.diff(np.concatenate([starts, [m.count]]))
    )
    return m.with_values(scale * pooled[seg_of_token])


def transfer_scale(mask_ratio: float) -> float:
    """Decompression scale for dense transfer: 1 - mask_ratio."""
    if not 0.0 <= mask_ratio < 1.0:
        raise DomainError("mask_ratio must be in [0, 1)")
    return 1.0 - mask_ratio


def mask_to_json(m: MaskedTokenSet, seed: int | None = None) -> str:
    """Serialize the mask structure (not the values) as JSON."""
    if m.traversal != ROW_MAJOR:
        raise ValueError("only canonical (row_major) masks are serialized")
    return json.dumps({
        "h": m.h,
        "w": m.w,
        "ratio": m.mask_ratio,
        "seed": seed,
        "coords": m.coords.tolist(),
    })


def mask_from_json(text: str, values: np.ndarray | None = None) -> MaskedTokenSet:
    """Rebuild a mask from JSON; values default to zeros with D = 1."""
    doc = json.loads(text)
    coords = np.asarray(doc["coords"], dtype=np.int64)
    if values is None:
        values = np.zeros((coords.shape[0], 1))
    return MaskedTokenSet(doc["h"], doc["w"], coords, values,
                          ROW_MAJOR, doc.get("ratio", 0.0))


def apply_mask(g: TokenGrid, coords: np.ndarray, mask_ratio: float = 0.0) -> MaskedTokenSet:
    """Select the given (row, col) positions from a single-batch dense grid."""
    if g.batch != 1:
        raise ShapeError("apply_mask operates on a single-item batch")
    coords = np.asarray(coords, dtype=np.int64)
    flat = coords[:, 0] * g.w + coords[:, 1]
    values = g.values[0].reshape(g.tokens, g.dim)[flat]
    return MaskedTokenSet(g.h, g.w, coords, values, ROW_MAJOR, mask_ratio)


def _masked_branch(x_packed: np.ndarray, row_ids: np.ndarray, w: int, direction: str,
                   dp, *, divisor: str, repeat_scale: float, scan_kind: str,
                   use_post_norm: bool, skip_placement: str):
    """One scan direction over packed masked tokens.

    The causal conv runs over the packed sequence, so tokens adjacent in
    traversal order are conv neighbors. Returns (y_packed, pooled_len, depth).
    """
    if direction == "backward":
        x_packed = x_packed[::-1]
        row_ids = row_ids[::-1]

    act = silu(causal_conv1d(x_packed[None], dp.conv_kernel, dp.conv_bias))[0]

    starts, _rows = _row_segments(row_ids)
    sums = _segment_sums(act, starts)
    if divisor == DIVIDE_BY_COLUMNS:
        pooled = sums / w
    elif divisor == DIVIDE_BY_COUNT:
        counts = np.diff(np.concatenate([starts, [act.shape[0]]]))
        pooled = sums / counts[:, None]
    else:
        raise ValueError(f"unknown divisor {divisor!r}")

    y_pooled, depth = _scan_tokens(pooled[None], dp.selective, scan_kind)
    y_pooled = y_pooled[0]
    seg_of_token = np.repeat(
        np.arange(starts.size), np.diff(np.concatenate([starts, [act.shape[0]]]))
    )
    d_vec = dp.selective.d_skip
    if skip_placement == SKIP_BEFORE_REPEAT:
        y_rows = y_pooled + d_vec * pooled
        out = repeat_scale * y_rows[seg_of_token]
    else:
        out = repeat_scale * y_pooled[seg_of_token] + d_vec * act

    if use_post_norm:
        out = layer_norm(out, dp.post_scale, dp.post_shift)
    if direction == "backward":
        out = out[::-1]
    return np.ascontiguousarray(out), pooled.shape[0], depth


def masked_block_forward(m: MaskedTokenSet, params: BlockParams, *,
                         divisor: str = DIVIDE_BY_COLUMNS, repeat_scale: float = 1.0,
                         scan_kind: str = SCAN_PARALLEL, alternate: bool = True):
    """Full block over a masked token set; mirrors the dense block_forward.

    Odd blocks reorder the packed tokens into the transposed traversal (pure
    indexing) so pooling alternates canonical axes. Returns
    (MaskedTokenSet, trace dict).
    """
    u = rms_norm(m.values, params.input_scale)
    xz = u @ params.w_expand
    channels = params.channels
    x_arr, z_arr = xz[..., :channels], xz[..., channels:]

    transposed = alternate and params.block_index % 2 == 1
    if transposed:
        order = transpose_order(m)
        x_arr = x_arr[order]
        z_arr = z_arr[order]
        row_ids = m.coords[order][:, 1]  # transposed-frame rows = canonical cols
        rows_full, w_full = m.w, m.h
    else:
        row_ids = m.coords[:, 0]
        rows_full, w_full = m.h, m.w

    branch_args = dict(divisor=divisor, repeat_scale=repeat_scale,
                       scan_kind=scan_kind, use_post_norm=params.use_post_norm,
                       skip_placement=params.skip_placement)
    y_f, len_f, depth_f = _masked_branch(x_arr, row_ids, w_full, "forward",
                                         params.fwd, **branch_args)
    y_b, _len_b, _depth_b = _masked_branch(x_arr, row_ids, w_full, "backward",
                                           params.bwd, **branch_args)
    gate = silu(z_arr)
    y = y_f * gate + y_b * gate
    if transposed:
        undo = np.empty_like(y)
        undo[order] = y
        y = undo
    out = m.with_values(m.values + y @ params.w_out)
    trace = {
        "index": params.block_index,
        "pooled_axis": "height" if transposed else "width",
        "pooled_len": int(len_f),
        "depth": int(depth_f),
        "rows_full": int(rows_full),
    }
    return out, trace
