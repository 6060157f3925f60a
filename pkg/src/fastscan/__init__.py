"""Pooled selective-scan state-space kernels with verification harness.

The scan compresses each token-grid row to one token before the recurrence
and broadcasts the result back afterwards, halving the parallel-scan depth;
alternating blocks transpose the grid so both axes get pooled. Masked-grid
and per-channel variants, an analytic FLOP model and a timing harness round
out the package.
"""

from .errors import DomainError, ManifestError, ShapeError
from .fvt import read_fvt, write_fvt
from .grid import TokenGrid, raster_flatten, raster_unflatten, transpose_grid
from .pooling import PoolMode, pool_width, repeat_width
from .selective import (
    ScanLane,
    SelectiveSSMParams,
    discretize,
    project_selective,
    reverse_sequence,
    scan_depth,
    scan_parallel,
    scan_sequential,
    scan_vjp,
    softplus,
)
from .block import (
    BlockParams,
    DirectionParams,
    block_forward,
    causal_conv1d,
    ssm_branch,
)
from .masked import (
    MaskedTokenSet,
    masked_pool_width,
    masked_repeat_width,
    masked_transpose,
    random_mask,
    transfer_scale,
)
from .channels import (
    ChannelTokenGrid,
    channel_pool_spatial,
    hcs_sample,
    order_tokens,
    pool_schedule_2d,
)
from .encoder import (
    EncoderConfig,
    EncoderParams,
    encoder_forward,
    init_encoder_params,
    load_params,
    patch_embed,
    save_params,
)
from .flops import FlopReport, count_flops, count_flops_model, deit_s_flops

__version__ = "0.1.0"

__all__ = [
    "BlockParams",
    "ChannelTokenGrid",
    "DirectionParams",
    "DomainError",
    "EncoderConfig",
    "EncoderParams",
    "FlopReport",
    "ManifestError",
    "MaskedTokenSet",
    "PoolMode",
    "ScanLane",
    "SelectiveSSMParams",
    "ShapeError",
    "TokenGrid",
    "block_forward",
    "causal_conv1d",
    "channel_pool_spatial",
    "count_flops",
    "count_flops_model",
    "deit_s_flops",
    "discretize",
    "encoder_forward",
    "hcs_sample",
    "init_encoder_params",
    "load_params",
    "masked_pool_width",
    "masked_repeat_width",
    "masked_transpose",
    "order_tokens",
    "patch_embed",
    "pool_schedule_2d",
    "pool_width",
    "project_selective",
    "random_mask",
    "raster_flatten",
    "raster_unflatten",
    "read_fvt",
    "repeat_width",
    "reverse_sequence",
    "save_params",
    "scan_depth",
    "scan_parallel",
    "scan_sequential",
    "scan_vjp",
    "softplus",
    "ssm_branch",
    "transfer_scale",
    "transpose_grid",
    "write_fvt",
]
