"""One pooled bidirectional scan block.

Pipeline per block: input RMS-norm -> expansion into an activation branch x
and a gate z -> (transpose of the working grid on odd blocks, so pooling
alternates between width and height) -> per-direction causal conv1d -> SiLU
-> width pooling -> selective projection -> ZOH discretization -> scan ->
repeat back to full width -> skip term -> post-scan LayerNorm -> gating ->
output projection -> residual.

The same code path with pooling and repetition removed (`pooled=False`)
serves as the unpooled reference model for equivalence checks, FLOP ratios
and timing comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .grid import CANONICAL, TokenGrid
from .pooling import PoolMode, pool_width, repeat_width
from .selective import (
    SelectiveSSMParams,
    ZOH_EXACT,
    discretize,
    project_tokens,
    scan_depth,
    scan_parallel_stack,
    scan_sequential_stack,
)

NORM_EPS = 1e-6

FORWARD = "forward"
BACKWARD = "backward"

SCAN_SEQUENTIAL = "sequential"
SCAN_PARALLEL = "parallel"

# Default: the pooled scan output is repeated to full width first, then the
# skip term is added at full length (decompression before the skip). The
# alternative adds the skip to the pooled output and repeats afterwards.
SKIP_AFTER_REPEAT = "after_repeat"
SKIP_BEFORE_REPEAT = "before_repeat"


def silu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * (0.5 * (1.0 + np.tanh(0.5 * x)))


def rms_norm(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Root-mean-square norm over the last axis, scaled."""
    x = np.asarray(x, dtype=np.float64)
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    return x / rms * scale


def layer_norm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """LayerNorm over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    return centered / np.sqrt(var + NORM_EPS) * scale + shift


def causal_conv1d(seq: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Depthwise causal convolution along the second-to-last axis.

    out[..., t, c] = bias[c] + sum_i kernel[c, i] * seq[..., t - (k-1) + i, c]
    with zero left-padding; out_t depends only on steps <= t.
    """
    seq = np.asarray(seq, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2:
        raise ShapeError("kernel must be (channels, k)")
    channels, k = kernel.shape
    if seq.shape[-1] != channels:
        raise ShapeError(f"sequence has {seq.shape[-1]} channels, kernel has {channels}")
    length = seq.shape[-2]
    if bias is None:
        out = np.zeros_like(seq)
    else:
        out = np.broadcast_to(np.asarray(bias, dtype=np.float64), seq.shape).copy()
    for i in range(k):
        shift = k - 1 - i
        if shift >= length:
            continue
        if shift == 0:
            out += kernel[:, i] * seq
        else:
            out[..., shift:, :] += kernel[:, i] * seq[..., : length - shift, :]
    return out


@dataclass(frozen=True)
class DirectionParams:
    """Per-direction learned state: conv taps plus the selective-scan set.

    score_weights, when present, are this direction's attention-pooling
    projection (one per pooling site, unshared between directions).
    """

    conv_kernel: np.ndarray   # (channels, k) depthwise taps
    conv_bias: np.ndarray     # (channels,)
    selective: SelectiveSSMParams
    post_scale: np.ndarray    # (channels,) post-scan LayerNorm scale
    post_shift: np.ndarray    # (channels,)
    score_weights: np.ndarray | None = None  # (channels,) attention-pool scores

    def __post_init__(self):
        kern = np.asarray(self.conv_kernel, dtype=np.float64)
        if kern.ndim != 2 or kern.shape[1] < 1:
            raise ShapeError("conv_kernel must be (channels, k) with k >= 1")
        channels = kern.shape[0]
        if self.selective.dim != channels:
            raise ShapeError("selective params dim must match conv channels")
        for name in ("conv_bias", "post_scale", "post_shift"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (channels,):
                raise ShapeError(f"{name} must be ({channels},)")
            object.__setattr__(self, name, arr)
        if self.score_weights is not None:
            sw = np.asarray(self.score_weights, dtype=np.float64)
            if sw.shape != (channels,):
                raise ShapeError(f"score_weights must be ({channels},)")
            object.__setattr__(self, "score_weights", sw)
        object.__setattr__(self, "conv_kernel", kern)

    def pool_mode(self, tag: str) -> PoolMode:
        """Resolve a pooling tag against this direction's score weights."""
        if tag == "attention":
            if self.score_weights is None:
                raise ShapeError("attention pooling needs score_weights")
            return PoolMode.attention(self.score_weights)
        return PoolMode(tag)


@dataclass(frozen=True)
class BlockParams:
    block_index: int
    input_scale: np.ndarray    # (D,) RMS-norm scale
    w_expand: np.ndarray       # (D, 2*E*D): x branch | gate z
    fwd: DirectionParams
    bwd: DirectionParams
    w_out: np.ndarray          # (E*D, D)
    use_post_norm: bool = True
    skip_placement: str = SKIP_AFTER_REPEAT
    fused_repeat_skip: bool = False

    def __post_init__(self):
        input_scale = np.asarray(self.input_scale, dtype=np.float64)
        w_expand = np.asarray(self.w_expand, dtype=np.float64)
        w_out = np.asarray(self.w_out, dtype=np.float64)
        d = input_scale.shape[0]
        channels = self.fwd.conv_kernel.shape[0]
        if w_expand.shape != (d, 2 * channels):
            raise ShapeError(f"w_expand must be ({d}, {2 * channels})")
        if w_out.shape != (channels, d):
            raise ShapeError(f"w_out must be ({channels}, {d})")
        if self.bwd.conv_kernel.shape[0] != channels:
            raise ShapeError("forward/backward channel counts differ")
        if self.skip_placement not in (SKIP_AFTER_REPEAT, SKIP_BEFORE_REPEAT):
            raise ValueError(f"unknown skip placement {self.skip_placement!r}")
        object.__setattr__(self, "input_scale", input_scale)
        object.__setattr__(self, "w_expand", w_expand)
        object.__setattr__(self, "w_out", w_out)

    @property
    def dim(self) -> int:
        return self.input_scale.shape[0]

    @property
    def channels(self) -> int:
        return self.fwd.conv_kernel.shape[0]


@dataclass(frozen=True)
class BranchTrace:
    pooled_len: int
    depth: int


@dataclass(frozen=True)
class BlockOutput:
    grid: TokenGrid
    cls: np.ndarray | None
    trace: dict


def _scan_tokens(tokens: np.ndarray, params: SelectiveSSMParams, scan_kind: str,
                 zoh_mode: str = ZOH_EXACT):
    """Project, discretize and scan a (batch, T, channels) token sequence.

    Returns (y, depth) with y of the same shape as tokens and the skip term
    left out (the branch applies it at its configured placement).
    """
    b_in, c_out, dt = project_tokens(tokens, params)
    abar, bbar = discretize(dt, params, b_in, mode=zoh_mode)
    bx = bbar * tokens[..., None]
    c_cells = np.broadcast_to(c_out[..., None, :], abar.shape)
    # Stack kernels expect the time axis first: (T, batch, channels, N).
    abar_t = np.ascontiguousarray(np.moveaxis(abar, 1, 0))
    bx_t = np.ascontiguousarray(np.moveaxis(bx, 1, 0))
    c_t = np.ascontiguousarray(np.moveaxis(c_cells, 1, 0))
    if scan_kind == SCAN_PARALLEL:
        y_t, depth = scan_parallel_stack(abar_t, bx_t, c_t)
    elif scan_kind == SCAN_SEQUENTIAL:
        y_t = scan_sequential_stack(abar_t, bx_t, c_t)
        depth = scan_depth(tokens.shape[1])
    else:
        raise ValueError(f"unknown scan kind {scan_kind!r}")
    return np.moveaxis(y_t, 0, 1), depth


def _branch_seq(x_seq: np.ndarray, h: int, w: int, cls_x: np.ndarray | None,
                direction: str, dp: DirectionParams, *, pooled: bool,
                pool_mode: PoolMode, scan_kind: str, use_post_norm: bool,
                skip_placement: str, fused_repeat_skip: bool):
    """Run one scan direction over a flattened working-orientation sequence.

    x_seq: (batch, h*w, channels) raster-flattened post-expansion tokens.
    Returns (y_seq, y_cls, BranchTrace) with y_seq back in the input order.
    """
    if direction not in (FORWARD, BACKWARD):
        raise ValueError(f"unknown direction {direction!r}")
    batch, length, channels = x_seq.shape
    d_vec = dp.selective.d_skip

    seq = x_seq
    cls_idx = None
    if cls_x is not None:
        mid = length // 2
        seq = np.concatenate([seq[:, :mid], cls_x[:, None, :], seq[:, mid:]], axis=1)
        cls_idx = mid
    if direction == BACKWARD:
        seq = seq[:, ::-1]
        if cls_idx is not None:
            cls_idx = seq.shape[1] - 1 - cls_idx

    act = silu(causal_conv1d(seq, dp.conv_kernel, dp.conv_bias))

    y_cls_out = None
    if pooled:
        cls_act = None
        if cls_idx is not None:
            cls_act = act[:, cls_idx]
            act = np.concatenate([act[:, :cls_idx], act[:, cls_idx + 1:]], axis=1)
        act_grid = act.reshape(batch, h, w, channels)
        pooled_tokens = pool_width(TokenGrid(act_grid), pool_mode).values[:, :, 0, :]
        scan_in = pooled_tokens
        cls_row = None
        if cls_act is not None:
            # The class token bypasses pooling: it joins the pooled sequence
            # at the row its full-sequence position falls in.
            cls_row = cls_idx // w
            scan_in = np.concatenate(
                [scan_in[:, :cls_row], cls_act[:, None, :], scan_in[:, cls_row:]], axis=1
            )
        y_scan, depth = _scan_tokens(scan_in, dp.selective, scan_kind)
        pooled_len = scan_in.shape[1]
        if cls_row is not None:
            y_cls = y_scan[:, cls_row]
            y_scan = np.concatenate([y_scan[:, :cls_row], y_scan[:, cls_row + 1:]], axis=1)
            y_cls_out = y_cls + d_vec * cls_act

        if skip_placement == SKIP_BEFORE_REPEAT:
            y_rows = y_scan + d_vec * pooled_tokens
            out = repeat_width(TokenGrid(y_rows[:, :, None, :]), w).values
        elif fused_repeat_skip:
            # Single logical pass: each pooled output lands directly on the
            # token span of its row. Bit-identical to repeat-then-add.
            out = d_vec * act_grid
            out += y_scan[:, :, None, :]
        else:
            y_full = repeat_width(TokenGrid(y_scan[:, :, None, :]), w).values
            out = y_full + d_vec * act_grid
        out = out.reshape(batch, length, channels)
        if use_post_norm:
            out = layer_norm(out, dp.post_scale, dp.post_shift)
            if y_cls_out is not None:
                y_cls_out = layer_norm(y_cls_out, dp.post_scale, dp.post_shift)
    else:
        # Unpooled reference: the class token stays embedded in the scanned
        # sequence; pooling and repetition drop out, everything else matches.
        y_scan, depth = _scan_tokens(act, dp.selective, scan_kind)
        pooled_len = act.shape[1]
        out = y_scan + d_vec * act
        if use_post_norm:
            out = layer_norm(out, dp.post_scale, dp.post_shift)
        if cls_idx is not None:
            y_cls_out = out[:, cls_idx]
            out = np.concatenate([out[:, :cls_idx], out[:, cls_idx + 1:]], axis=1)

    if direction == BACKWARD:
        out = out[:, ::-1]

    return np.ascontiguousarray(out), y_cls_out, BranchTrace(pooled_len, depth)


def ssm_branch(g: TokenGrid, direction: str, dp: DirectionParams, *,
               pooled: bool = True, pool_mode: PoolMode | None = None,
               scan_kind: str = SCAN_PARALLEL, use_post_norm: bool = True,
               skip_placement: str = SKIP_AFTER_REPEAT,
               fused_repeat_skip: bool = False):
    """One scan direction over a token grid in its working orientation.

    Flattens the grid in raster order (reversing the whole sequence for the
    backward direction), applies conv + SiLU, pools the width axis, runs the
    selective scan over the pooled rows, repeats the scan output back across
    each row, adds the skip term and the post-scan norm, and restores the
    original token order. Returns (TokenGrid, BranchTrace).
    """
    if pool_mode is None:
        pool_mode = PoolMode.mean()
    x_seq = g.values.reshape(g.batch, g.tokens, g.dim)
    out, _, trace = _branch_seq(
        x_seq, g.h, g.w, None, direction, dp,
        pooled=pooled, pool_mode=pool_mode, scan_kind=scan_kind,
        use_post_norm=use_post_norm, skip_placement=skip_placement,
        fused_repeat_skip=fused_repeat_skip,
    )
    return TokenGrid(out.reshape(g.values.shape), g.orientation), trace


def block_forward(g: TokenGrid, params: BlockParams, *, cls: np.ndarray | None = None,
                  pooled: bool = True, pool: str | PoolMode = "mean",
                  scan_kind: str = SCAN_PARALLEL, alternate: bool = True) -> BlockOutput:
    """Full block: norm, expand, both scan directions, gate, project, residual.

    Odd-indexed blocks transpose the working grid (when `alternate` is on),
    so pooling alternates between the width and height axes of the canonical
    grid. The output is always restored to canonical orientation before the
    residual, so residuals align token for token.

    `pool` is a tag resolved per direction (attention pooling uses each
    direction's own score weights) or an explicit PoolMode shared by both.
    """
    if isinstance(pool, PoolMode):
        mode_f = mode_b = pool
    else:
        mode_f = params.fwd.pool_mode(pool)
        mode_b = params.bwd.pool_mode(pool)
    if g.orientation != CANONICAL:
        raise ShapeError("block_forward expects a grid in canonical orientation")

    u = rms_norm(g.values, params.input_scale)
    xz = u @ params.w_expand
    channels = params.channels
    x_arr, z_arr = xz[..., :channels], xz[..., channels:]

    cls_x = None
    cls_z = None
    if cls is not None:
        cls = np.asarray(cls, dtype=np.float64)
        cls_u = rms_norm(cls, params.input_scale)
        cls_xz = cls_u @ params.w_expand
        cls_x, cls_z = cls_xz[..., :channels], cls_xz[..., channels:]

    transposed = alternate and params.block_index % 2 == 1
    if transposed:
        x_arr = np.ascontiguousarray(x_arr.transpose(0, 2, 1, 3))
        z_arr = np.ascontiguousarray(z_arr.transpose(0, 2, 1, 3))
    batch, hh, ww = x_arr.shape[0], x_arr.shape[1], x_arr.shape[2]
    x_seq = x_arr.reshape(batch, hh * ww, channels)

    branch_args = dict(pooled=pooled, scan_kind=scan_kind,
                       use_post_norm=params.use_post_norm,
                       skip_placement=params.skip_placement,
                       fused_repeat_skip=params.fused_repeat_skip)
    y_f, y_f_cls, tr_f = _branch_seq(x_seq, hh, ww, cls_x, FORWARD, params.fwd,
                                     pool_mode=mode_f, **branch_args)
    y_b, y_b_cls, tr_b = _branch_seq(x_seq, hh, ww, cls_x, BACKWARD, params.bwd,
                                     pool_mode=mode_b, **branch_args)

    gate = silu(z_arr.reshape(batch, hh * ww, channels))
    y = y_f * gate + y_b * gate
    y = y.reshape(batch, hh, ww, channels)
    if transposed:
        y = np.ascontiguousarray(y.transpose(0, 2, 1, 3))
    out_grid = TokenGrid(g.values + y @ params.w_out, g.orientation)

    cls_out = None
    if cls is not None:
        cls_gate = silu(cls_z)
        y_cls = y_f_cls * cls_gate + y_b_cls * cls_gate
        cls_out = cls + y_cls @ params.w_out

    pooled_axis = "height" if transposed else "width"
    trace = {
        "index": params.block_index,
        "pooled_axis": pooled_axis,
        "pooled_len": tr_f.pooled_len,
        "depth": tr_f.depth,
        "depth_backward": tr_b.depth,
    }
    return BlockOutput(out_grid, cls_out, trace)
