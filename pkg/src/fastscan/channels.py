"""Per-channel tokenization: each image channel contributes its own tokens.

The grid becomes (batch, h, w, C, D) and the scan runs over h*C (or w*C)
pooled tokens instead of h*w*C. Channel subsets are drawn by hierarchical
channel sampling and kept sorted, since token order matters to a sequential
model. Two flattened scanpaths exist: channel-first visits every channel at
one spatial site before moving on; spatial-first walks all positions of one
channel before the next.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .block import BlockParams, SCAN_PARALLEL, layer_norm, rms_norm, silu, causal_conv1d
from .block import _scan_tokens
from .errors import DomainError, ShapeError
from .grid import TokenGrid
from .pooling import PoolMode, pool_width, repeat_width

CHANNEL_FIRST = "channel_first"
SPATIAL_FIRST = "spatial_first"

POOL_WIDTH_CHANNEL = ("width", "channel")
POOL_HEIGHT_CHANNEL = ("height", "channel")
POOL_HEIGHT_WIDTH = ("height", "width")


@dataclass(frozen=True)
class ChannelTokenGrid:
    """(batch, h, w, C, D) token tensor plus the active channel ids.

    channel_ids are the original channel indices of the C slots, strictly
    increasing (sorted subsets come out of hcs_sample). channel_embed, when
    attached, holds the per-channel embedding vectors that were added.
    """

    values: np.ndarray
    channel_ids: np.ndarray
    channel_embed: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 5:
            raise ShapeError("channel grid needs 5 axes (batch, h, w, C, D)")
        ids = np.asarray(self.channel_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size != v.shape[3]:
            raise ShapeError("channel_ids must list one id per channel slot")
        if ids.size > 1 and not (np.diff(ids) > 0).all():
            raise ShapeError("channel_ids must be strictly increasing")
        object.__setattr__(self, "values", np.ascontiguousarray(v))
        object.__setattr__(self, "channel_ids", ids)

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
    def channels(self) -> int:
        return self.values.shape[3]

    @property
    def dim(self) -> int:
        return self.values.shape[4]


def hcs_sample(c_total: int, seed_or_rng) -> np.ndarray:
    """Hierarchical channel sampling: draw m ~ U{1..C}, then m distinct channels.

    The subset is returned ascending-sorted: channel order is positional
    information to a sequential scan, so shuffled subsets would scramble it.
    """
    if c_total < 1:
        raise DomainError("c_total must be >= 1")
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) \
        else np.random.default_rng(seed_or_rng)
    m = int(rng.integers(1, c_total + 1))
    chosen = rng.choice(c_total, size=m, replace=False)
    return np.sort(chosen)


def order_tokens(g: ChannelTokenGrid, path: str = CHANNEL_FIRST) -> np.ndarray:
    """Flatten to (batch, h*w*C, D) along the requested scanpath."""
    v = g.values
    if path == CHANNEL_FIRST:
        return v.reshape(g.batch, g.h * g.w * g.channels, g.dim).copy()
    if path == SPATIAL_FIRST:
        return np.ascontiguousarray(v.transpose(0, 3, 1, 2, 4)).reshape(
            g.batch, g.h * g.w * g.channels, g.dim
        )
    raise ValueError(f"unknown scanpath {path!r}")


def unorder_tokens(seq: np.ndarray, h: int, w: int, c: int, path: str) -> np.ndarray:
    """Inverse of order_tokens; returns (batch, h, w, C, D) values."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 3 or seq.shape[1] != h * w * c:
        raise ShapeError(f"sequence must be (batch, {h * w * c}, D)")
    dim = seq.shape[2]
    if path == CHANNEL_FIRST:
        return seq.reshape(seq.shape[0], h, w, c, dim).copy()
    if path == SPATIAL_FIRST:
        return np.ascontiguousarray(
            seq.reshape(seq.shape[0], c, h, w, dim).transpose(0, 2, 3, 1, 4)
        )
    raise ValueError(f"unknown scanpath {path!r}")


def _pool_rows_of(values: np.ndarray, mode: PoolMode) -> np.ndarray:
    """Pool axis 2 of (batch, rows, width, D) values; returns (batch, rows, D)."""
    return pool_width(TokenGrid(values), mode).values[:, :, 0, :]


def pool_spatial_values(values: np.ndarray, mode: PoolMode) -> np.ndarray:
    """Pool the width axis of (b, h, w, C, D) independently per (row, channel).

    Output is (b, h*C, D), channel-first over (row, channel).
    """
    b, h, w, c, d = values.shape
    per_channel = np.ascontiguousarray(values.transpose(0, 1, 3, 2, 4)).reshape(
        b, h * c, w, d
    )
    return _pool_rows_of(per_channel, mode)


def repeat_spatial_values(pooled: np.ndarray, h: int, w: int, c: int) -> np.ndarray:
    """Scatter (b, h*C, D) pooled tokens back across the width axis."""
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.shape[1] != h * c:
        raise ShapeError(f"pooled must have {h * c} tokens, got {pooled.shape[1]}")
    b, _, d = pooled.shape
    full = repeat_width(TokenGrid(pooled[:, :, None, :]), w).values
    return np.ascontiguousarray(
        full.reshape(b, h, c, w, d).transpose(0, 1, 3, 2, 4)
    )


def channel_pool_spatial(g: ChannelTokenGrid, mode: PoolMode = PoolMode.mean()) -> np.ndarray:
    """Spec surface for pool_spatial_values on a ChannelTokenGrid."""
    return pool_spatial_values(g.values, mode)


def pool_schedule_2d(block_index: int):
    """Cycle of axis pairs pooled when compressing two dims at once.

    index mod 3: 0 -> width+channel (scan length h), 1 -> height+channel
    (scan length w), 2 -> height+width (scan length C).
    """
    return (POOL_WIDTH_CHANNEL, POOL_HEIGHT_CHANNEL, POOL_HEIGHT_WIDTH)[block_index % 3]


def pool_axes_2d(values: np.ndarray, axes, mode: PoolMode = PoolMode.mean()) -> np.ndarray:
    """Pool two of the three token axes of (b, h, w, C, D) values.

    The two pooled axes are merged (first-listed axis outer) and reduced with
    the same fixed-order kernels as pool_width. Returns (b, remaining, D).
    """
    b, h, w, c, d = values.shape
    axes = tuple(axes)
    if axes == POOL_WIDTH_CHANNEL:
        merged = values.reshape(b, h, w * c, d)
    elif axes == POOL_HEIGHT_CHANNEL:
        merged = np.ascontiguousarray(values.transpose(0, 2, 1, 3, 4)).reshape(b, w, h * c, d)
    elif axes == POOL_HEIGHT_WIDTH:
        merged = np.ascontiguousarray(values.transpose(0, 3, 1, 2, 4)).reshape(b, c, h * w, d)
    else:
        raise ValueError(f"unknown axis pair {axes!r}")
    return _pool_rows_of(merged, mode)


def repeat_axes_2d(pooled: np.ndarray, shape, axes) -> np.ndarray:
    """Broadcast 2-axis-pooled tokens back to (b, h, w, C, D)."""
    b, h, w, c, d = shape
    pooled = np.asarray(pooled, dtype=np.float64)
    axes = tuple(axes)
    if axes == POOL_WIDTH_CHANNEL:
        if pooled.shape[1] != h:
            raise ShapeError(f"expected {h} pooled tokens, got {pooled.shape[1]}")
        return np.broadcast_to(pooled[:, :, None, None, :], (b, h, w, c, d)).copy()
    if axes == POOL_HEIGHT_CHANNEL:
        if pooled.shape[1] != w:
            raise ShapeError(f"expected {w} pooled tokens, got {pooled.shape[1]}")
        return np.broadcast_to(pooled[:, None, :, None, :], (b, h, w, c, d)).copy()
    if axes == POOL_HEIGHT_WIDTH:
        if pooled.shape[1] != c:
            raise ShapeError(f"expected {c} pooled tokens, got {pooled.shape[1]}")
        return np.broadcast_to(pooled[:, None, None, :, :], (b, h, w, c, d)).copy()
    raise ValueError(f"unknown axis pair {axes!r}")


def _channel_branch(x_seq: np.ndarray, h: int, w: int, c: int, direction: str,
                    dp, *, pool_tag: str, scan_kind: str, use_post_norm: bool):
    """One direction over the channel-first flattened sequence (b, h*w*C, EC)."""
    batch, length, channels = x_seq.shape
    seq = x_seq[:, ::-1] if direction == "backward" else x_seq
    act = silu(causal_conv1d(seq, dp.conv_kernel, dp.conv_bias))
    act5 = act.reshape(batch, h, w, c, channels)
    pooled = pool_spatial_values(act5, dp.pool_mode(pool_tag))
    y_pooled, depth = _scan_tokens(pooled, dp.selective, scan_kind)
    y_full = repeat_spatial_values(y_pooled, h, w, c)
    out = y_full + dp.selective.d_skip * act5
    out = out.reshape(batch, length, channels)
    if use_post_norm:
        out = layer_norm(out, dp.post_scale, dp.post_shift)
    if direction == "backward":
        out = out[:, ::-1]
    return np.ascontiguousarray(out), pooled.shape[1], depth


def channel_block_forward(values: np.ndarray, params: BlockParams, *,
                          pool: str = "mean", scan_kind: str = SCAN_PARALLEL,
                          alternate: bool = True):
    """Full block over per-channel tokens (b, h, w, C, D).

    Pooling and repetition act independently per channel; the scan covers
    the h*C (or w*C on transposed blocks) pooled tokens in channel-first
    order. Returns (values, trace dict).
    """
    u = rms_norm(values, params.input_scale)
    xz = u @ params.w_expand
    channels = params.channels
    x_arr, z_arr = xz[..., :channels], xz[..., channels:]

    transposed = alternate and params.block_index % 2 == 1
    if transposed:
        x_arr = np.ascontiguousarray(x_arr.transpose(0, 2, 1, 3, 4))
        z_arr = np.ascontiguousarray(z_arr.transpose(0, 2, 1, 3, 4))
    b, hh, ww, c = x_arr.shape[:4]
    x_seq = x_arr.reshape(b, hh * ww * c, channels)

    y_f, pooled_len, depth = _channel_branch(
        x_seq, hh, ww, c, "forward", params.fwd,
        pool_tag=pool, scan_kind=scan_kind, use_post_norm=params.use_post_norm)
    y_b, _, _ = _channel_branch(
        x_seq, hh, ww, c, "backward", params.bwd,
        pool_tag=pool, scan_kind=scan_kind, use_post_norm=params.use_post_norm)

    gate = silu(z_arr.reshape(b, hh * ww * c, channels))
    y = (y_f * gate + y_b * gate).reshape(b, hh, ww, c, channels)
    if transposed:
        y = np.ascontiguousarray(y.transpose(0, 2, 1, 3, 4))
    out = values + y @ params.w_out
    trace = {
        "index": params.block_index,
        "pooled_axis": "height" if transposed else "width",
        "pooled_len": int(pooled_len),
        "depth": int(depth),
    }
    return out, trace
