"""Wall-clock microbenchmarks of one block's components.

Each component is timed in isolation with its inputs prepared up front:
median over R repeats after W warmups, single run per sample. The timing
reference "vim" is this library's own unpooled pipeline (identical code
minus pool/repeat), so comparisons isolate the pooling mechanism rather
than implementation differences between two codebases.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .block import SCAN_SEQUENTIAL, block_forward, causal_conv1d, silu
from .block import _scan_tokens  # component closure shares the block's scan path
from .encoder import EncoderConfig, init_encoder_params
from .errors import DomainError
from .flops import model_config
from .grid import TokenGrid
from .pooling import PoolMode, pool_width, repeat_width
from .selective import discretize, project_tokens, scan_depth

MIN_WARMUP = 3
MIN_REPEATS = 5

COMPONENTS = ("conv", "pool", "projection", "scan", "repeat", "skip", "block_total")

CSV_COLUMNS = ("model", "resolution", "component", "median_ns", "depth", "pooled_len")


@dataclass(frozen=True)
class BenchRecord:
    model: str
    resolution: int
    component: str
    median_ns: int
    min_ns: int
    max_ns: int
    depth: int
    pooled_len: int


def time_callable(fn, warmup: int, repeats: int):
    """(median, min, max) wall time in ns over `repeats` single calls."""
    if warmup < MIN_WARMUP or repeats < MIN_REPEATS:
        raise DomainError(f"need warmup >= {MIN_WARMUP} and repeats >= {MIN_REPEATS}")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        start = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - start)
    samples.sort()
    return samples[len(samples) // 2], samples[0], samples[-1]


def bench_block(model: str, resolution: int, *, warmup: int = 5, repeats: int = 9,
                scan_kind: str = SCAN_SEQUENTIAL, seed: int = 0):
    """Time each component of one block plus the whole block forward.

    Returns a list of BenchRecord, one per component. For the unpooled
    reference the pool and repeat rows report zero time (the stages do not
    exist in its pipeline).
    """
    base = model_config(model)
    config = EncoderConfig(
        preset=base.preset, depth=1, image_h=resolution, image_w=resolution,
        pooled=base.pooled, post_norm=True, scan=scan_kind,
    )
    params = init_encoder_params(config, seed)
    bp = params.blocks[0]
    rng = np.random.default_rng(seed + 1)

    h = w = resolution // config.patch
    tokens = h * w
    channels = config.channels_inner
    pooled_len = h if config.pooled else tokens
    depth = scan_depth(pooled_len)

    grid = TokenGrid(rng.standard_normal((1, h, w, config.model_dim)))
    x_seq = rng.standard_normal((1, tokens, channels))
    act = silu(causal_conv1d(x_seq, bp.fwd.conv_kernel, bp.fwd.conv_bias))
    act_grid = TokenGrid(act.reshape(1, h, w, channels))
    pooled_grid = pool_width(act_grid)
    scan_tokens_in = pooled_grid.values[:, :, 0, :] if config.pooled else act
    b_in, c_out, dt = project_tokens(scan_tokens_in, bp.fwd.selective)
    y_scan, _ = _scan_tokens(scan_tokens_in, bp.fwd.selective, scan_kind)
    y_full = (repeat_width(TokenGrid(y_scan[:, :, None, :]), w).values
              if config.pooled else y_scan.reshape(1, h, w, channels))
    d_vec = bp.fwd.selective.d_skip

    def run_conv():
        causal_conv1d(x_seq, bp.fwd.conv_kernel, bp.fwd.conv_bias)

    def run_pool():
        pool_width(act_grid)

    def run_projection():
        project_tokens(scan_tokens_in, bp.fwd.selective)

    def run_scan():
        # Discretize + recurrence + output contraction: the fused-kernel
        # equivalent, with the projection and skip timed separately.
        abar, bbar = discretize(dt, bp.fwd.selective, b_in)
        bx = bbar * scan_tokens_in[..., None]
        c_cells = np.broadcast_to(c_out[..., None, :], abar.shape)
        abar_t = np.ascontiguousarray(np.moveaxis(abar, 1, 0))
        bx_t = np.ascontiguousarray(np.moveaxis(bx, 1, 0))
        c_t = np.ascontiguousarray(np.moveaxis(c_cells, 1, 0))
        if scan_kind == SCAN_SEQUENTIAL:
            from .selective import scan_sequential_stack
            scan_sequential_stack(abar_t, bx_t, c_t)
        else:
            from .selective import scan_parallel_stack
            scan_parallel_stack(abar_t, bx_t, c_t)

    def run_repeat():
        repeat_width(TokenGrid(y_scan[:, :, None, :]), w)

    def run_skip():
        return y_full + d_vec * act.reshape(1, h, w, channels)

    def run_block():
        block_forward(grid, bp, pooled=config.pooled, scan_kind=scan_kind)

    stage_fns = {
        "conv": run_conv,
        "pool": run_pool if config.pooled else None,
        "projection": run_projection,
        "scan": run_scan,
        "repeat": run_repeat if config.pooled else None,
        "skip": run_skip,
        "block_total": run_block,
    }
    records = []
    for component in COMPONENTS:
        fn = stage_fns[component]
        if fn is None:
            med = lo = hi = 0
        else:
            med, lo, hi = time_callable(fn, warmup, repeats)
        records.append(BenchRecord(model, resolution, component, med, lo, hi,
                                   depth, pooled_len))
    return records


def run_bench(models, resolutions, *, warmup: int = 5, repeats: int = 9,
              scan_kind: str = SCAN_SEQUENTIAL, seed: int = 0):
    records = []
    for model in models:
        for resolution in resolutions:
            records.extend(bench_block(model, resolution, warmup=warmup,
                                       repeats=repeats, scan_kind=scan_kind,
                                       seed=seed))
    return records


def write_csv(records, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([r.model, r.resolution, r.component, r.median_ns,
                             r.depth, r.pooled_len])


def records_by(records, model: str, component: str) -> dict:
    """resolution -> median_ns for one (model, component) pair."""
    return {r.resolution: r.median_ns for r in records
            if r.model == model and r.component == component}
