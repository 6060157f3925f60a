"""Full encoder assembly: patch embedding, stacked alternating blocks, head.

Three variants share the block parameters: dense grids, masked (irregular)
grids, and per-channel tokenization. The same encoder with pooling disabled
(`pooled=False`) is the unpooled reference model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import fvt
from .block import (
    BlockParams,
    DirectionParams,
    SCAN_PARALLEL,
    SCAN_SEQUENTIAL,
    SKIP_AFTER_REPEAT,
    block_forward,
    rms_norm,
)
from .channels import ChannelTokenGrid, channel_block_forward
from .errors import DomainError, ManifestError, ShapeError
from .grid import TokenGrid
from .masked import (
    DIVIDE_BY_COLUMNS,
    MaskedTokenSet,
    apply_mask,
    masked_block_forward,
    random_mask,
)
from .selective import SelectiveSSMParams

# Layers and embedding dim per named size.
PRESETS = {
    "tiny": (24, 192),
    "small": (24, 384),
    "base": (24, 768),
    "large": (48, 1024),
    "huge": (64, 1280),
}

VARIANT_DENSE = "dense"
VARIANT_MASKED = "masked"
VARIANT_CHANNEL = "channel"

CLS_NONE = "none"
CLS_MIDDLE = "middle"

EMBED_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    preset: str = "tiny"
    depth: int | None = None          # overrides preset when set
    dim: int | None = None
    patch: int = 16
    image_h: int = 224
    image_w: int = 224
    image_c: int = 3
    n_states: int = 16
    expand: int = 2
    conv_width: int = 4
    pooling: str = "mean"             # mean | max | attention
    class_token: str = CLS_NONE       # none | middle
    variant: str = VARIANT_DENSE      # dense | masked | channel
    scan: str = SCAN_PARALLEL         # sequential | parallel
    post_norm: bool = True
    pooled: bool = True               # False = unpooled reference model
    alternate: bool = True
    skip_placement: str = SKIP_AFTER_REPEAT
    fused_repeat_skip: bool = False
    num_classes: int = 0
    mask_ratio: float = 0.0
    mask_seed: int = 0
    repeat_scale: float | None = None  # None -> 1.0; 1-ratio for dense transfer
    mask_divisor: str = DIVIDE_BY_COLUMNS

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise DomainError(f"unknown preset {self.preset!r}")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ShapeError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}"
            )
        if self.scan not in (SCAN_SEQUENTIAL, SCAN_PARALLEL):
            raise DomainError(f"unknown scan kind {self.scan!r}")
        if self.variant not in (VARIANT_DENSE, VARIANT_MASKED, VARIANT_CHANNEL):
            raise DomainError(f"unknown variant {self.variant!r}")
        if self.class_token not in (CLS_NONE, CLS_MIDDLE):
            raise DomainError(f"unknown class_token {self.class_token!r}")
        if self.class_token == CLS_MIDDLE and self.variant != VARIANT_DENSE:
            raise DomainError("class token is only supported in the dense variant")

    @property
    def n_layers(self) -> int:
        return self.depth if self.depth is not None else PRESETS[self.preset][0]

    @property
    def model_dim(self) -> int:
        return self.dim if self.dim is not None else PRESETS[self.preset][1]

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch

    @property
    def channels_inner(self) -> int:
        return self.expand * self.model_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "EncoderConfig":
        key_map = {"P": "patch", "N": "n_states", "E": "expand", "k": "conv_width"}
        kwargs = {}
        for key, value in doc.items():
            kwargs[key_map.get(key, key)] = value
        return cls(**kwargs)


@dataclass(frozen=True)
class EncoderParams:
    patch_weight: np.ndarray           # (P*P*C, D) dense/masked; (P*P, D) channel
    patch_bias: np.ndarray             # (D,)
    pos_embed: np.ndarray              # (h, w, D)
    blocks: tuple
    final_scale: np.ndarray            # (D,)
    cls_token: np.ndarray | None = None       # (D,)
    channel_embed: np.ndarray | None = None   # (C, D)
    classifier_w: np.ndarray | None = None    # (D, num_classes)
    classifier_b: np.ndarray | None = None    # (num_classes,)


@dataclass(frozen=True)
class EncoderResult:
    features: np.ndarray               # (batch, D)
    logits: np.ndarray | None
    trace: dict


def _init_selective(rng: np.random.Generator, channels: int, n: int) -> SelectiveSSMParams:
    # Decay init follows the real-diagonal convention: A = -(1..N) per channel.
    a_log = np.broadcast_to(np.log(np.arange(1, n + 1, dtype=np.float64)),
                            (channels, n)).copy()
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=channels))
    dt_bias = np.log(np.expm1(dt))  # inverse softplus
    return SelectiveSSMParams(
        a_log=a_log,
        d_skip=np.ones(channels),
        dt_bias=dt_bias,
        w_b=rng.standard_normal((channels, n)) / np.sqrt(channels),
        w_c=rng.standard_normal((channels, n)) / np.sqrt(channels),
        w_dt=rng.standard_normal(channels) / np.sqrt(channels),
    )


def _init_direction(rng: np.random.Generator, config: EncoderConfig) -> DirectionParams:
    channels = config.channels_inner
    k = config.conv_width
    score = rng.standard_normal(channels) * EMBED_STD if config.pooling == "attention" else None
    return DirectionParams(
        conv_kernel=rng.standard_normal((channels, k)) / np.sqrt(k),
        conv_bias=np.zeros(channels),
        selective=_init_selective(rng, channels, config.n_states),
        post_scale=np.ones(channels),
        post_shift=np.zeros(channels),
        score_weights=score,
    )


def init_encoder_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Seeded random parameters with a fixed draw order (deterministic per seed)."""
    rng = np.random.default_rng(seed)
    d = config.model_dim
    patch_in = config.patch * config.patch * (
        1 if config.variant == VARIANT_CHANNEL else config.image_c
    )
    patch_weight = rng.standard_normal((patch_in, d)) / np.sqrt(patch_in)
    patch_bias = np.zeros(d)
    pos_embed = rng.standard_normal((config.grid_h, config.grid_w, d)) * EMBED_STD
    channel_embed = None
    if config.variant == VARIANT_CHANNEL:
        channel_embed = rng.standard_normal((config.image_c, d)) * EMBED_STD
    cls_token = None
    if config.class_token == CLS_MIDDLE:
        cls_token = rng.standard_normal(d) * EMBED_STD

    channels = config.channels_inner
    blocks = []
    for i in range(config.n_layers):
        blocks.append(BlockParams(
            block_index=i,
            input_scale=np.ones(d),
            w_expand=rng.standard_normal((d, 2 * channels)) / np.sqrt(d),
            fwd=_init_direction(rng, config),
            bwd=_init_direction(rng, config),
            w_out=rng.standard_normal((channels, d)) / np.sqrt(channels),
            use_post_norm=config.post_norm,
            skip_placement=config.skip_placement,
            fused_repeat_skip=config.fused_repeat_skip,
        ))
    classifier_w = classifier_b = None
    if config.num_classes > 0:
        classifier_w = rng.standard_normal((d, config.num_classes)) / np.sqrt(d)
        classifier_b = np.zeros(config.num_classes)
    return EncoderParams(
        patch_weight=patch_weight,
        patch_bias=patch_bias,
        pos_embed=pos_embed,
        blocks=tuple(blocks),
        final_scale=np.ones(d),
        cls_token=cls_token,
        channel_embed=channel_embed,
        classifier_w=classifier_w,
        classifier_b=classifier_b,
    )


def _extract_patches(image: np.ndarray, patch: int) -> np.ndarray:
    """(b, C, H, W) -> (b, h, w, P*P*C); per-patch flatten order (pi, pj, c)."""
    b, c, height, width = image.shape
    if height % patch or width % patch:
        raise ShapeError(f"image {height}x{width} not divisible by patch {patch}")
    h, w = height // patch, width // patch
    tiles = image.reshape(b, c, h, patch, w, patch)
    return np.ascontiguousarray(tiles.transpose(0, 2, 4, 3, 5, 1)).reshape(
        b, h, w, patch * patch * c
    )


def patch_embed(image: np.ndarray, config: EncoderConfig, params: EncoderParams) -> TokenGrid:
    """Project non-overlapping P x P x C patches to D-dim tokens + position embedding."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    if image.shape[1] != config.image_c:
        raise ShapeError(f"expected {config.image_c} channels, got {image.shape[1]}")
    patches = _extract_patches(image, config.patch)
    tokens = patches @ params.patch_weight + params.patch_bias
    return TokenGrid(tokens + params.pos_embed)


def channel_tokenize(image: np.ndarray, config: EncoderConfig, params: EncoderParams,
                     channel_subset: np.ndarray | None = None) -> ChannelTokenGrid:
    """Per-channel patch embedding: shared P*P projection plus channel embedding.

    Position embeddings are shared by all channels at the same spatial site;
    the channel embedding distinguishes them.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    if channel_subset is None:
        channel_subset = np.arange(image.shape[1])
    channel_subset = np.asarray(channel_subset, dtype=np.int64)
    image = image[:, channel_subset]
    b, c, height, width = image.shape
    patch = config.patch
    h, w = height // patch, width // patch
    tiles = image.reshape(b, c, h, patch, w, patch)
    patches = np.ascontiguousarray(tiles.transpose(0, 2, 4, 1, 3, 5)).reshape(
        b, h, w, c, patch * patch
    )
    tokens = patches @ params.patch_weight + params.patch_bias
    tokens = tokens + params.pos_embed[None, :, :, None, :]
    tokens = tokens + params.channel_embed[channel_subset]
    return ChannelTokenGrid(tokens, channel_subset)


def _head(tokens: np.ndarray, config: EncoderConfig, params: EncoderParams,
          cls_final: np.ndarray | None) -> np.ndarray:
    """Final RMS-norm then mean over tokens, or class-token readout."""
    if config.class_token == CLS_MIDDLE:
        return rms_norm(cls_final, params.final_scale)
    normed = rms_norm(tokens, params.final_scale)
    return normed.mean(axis=1)


def _dense_forward(image, config: EncoderConfig, params: EncoderParams):
    g = patch_embed(image, config, params)
    cls = None
    if config.class_token == CLS_MIDDLE:
        cls = np.broadcast_to(params.cls_token, (g.batch, config.model_dim)).copy()
    traces = []
    for bp in params.blocks:
        out = block_forward(g, bp, cls=cls, pooled=config.pooled,
                            pool=config.pooling, scan_kind=config.scan,
                            alternate=config.alternate)
        g, cls = out.grid, out.cls
        traces.append(out.trace)
    tokens = g.values.reshape(g.batch, g.tokens, g.dim)
    return _head(tokens, config, params, cls), traces


def _masked_forward(image, config: EncoderConfig, params: EncoderParams,
                    mask: MaskedTokenSet | None):
    g = patch_embed(image, config, params)
    if mask is None:
        probe = TokenGrid(g.values[:1])
        mask = random_mask(probe, config.mask_ratio, config.mask_seed)
    coords = mask.coords
    if mask.traversal != "row_major":
        raise DomainError("masked encoder expects a canonical (row_major) mask")
    scale = 1.0 if config.repeat_scale is None else float(config.repeat_scale)
    features = []
    traces = []
    for b in range(g.batch):
        m = apply_mask(TokenGrid(g.values[b:b + 1]), coords, mask.mask_ratio)
        item_traces = []
        for bp in params.blocks:
            m, trace = masked_block_forward(
                m, bp, divisor=config.mask_divisor, repeat_scale=scale,
                scan_kind=config.scan, alternate=config.alternate)
            item_traces.append(trace)
        normed = rms_norm(m.values, params.final_scale)
        features.append(normed.mean(axis=0))
        if b == 0:
            traces = item_traces
    return np.stack(features), traces


def _channel_forward(image, config: EncoderConfig, params: EncoderParams,
                     channel_subset):
    g = channel_tokenize(image, config, params, channel_subset)
    values = g.values
    traces = []
    for bp in params.blocks:
        values, trace = channel_block_forward(
            values, bp, pool=config.pooling, scan_kind=config.scan,
            alternate=config.alternate)
        traces.append(trace)
    b = values.shape[0]
    tokens = values.reshape(b, -1, config.model_dim)
    return _head(tokens, config, params, None), traces


def encoder_forward(image: np.ndarray, config: EncoderConfig, params: EncoderParams,
                    *, mask: MaskedTokenSet | None = None,
                    channel_subset: np.ndarray | None = None) -> EncoderResult:
    """Run the configured variant end to end.

    Returns features (batch, D), optional logits, and a trace with the
    per-block pooled scan length, parallel depth and pooled axis.
    """
    if config.variant == VARIANT_DENSE:
        features, block_traces = _dense_forward(image, config, params)
    elif config.variant == VARIANT_MASKED:
        features, block_traces = _masked_forward(image, config, params, mask)
    else:
        features, block_traces = _channel_forward(image, config, params, channel_subset)
    logits = None
    if params.classifier_w is not None:
        logits = features @ params.classifier_w + params.classifier_b
    trace = {
        "variant": config.variant,
        "pooled": config.pooled,
        "alternate": config.alternate,
        "blocks": block_traces,
    }
    return EncoderResult(features, logits, trace)


# --- weights directory (FVT1 tensors + JSON manifest) ----------------------

def _named_tensors(params: EncoderParams):
    yield "patch_embed.weight", params.patch_weight
    yield "patch_embed.bias", params.patch_bias
    yield "pos_embed", params.pos_embed
    if params.cls_token is not None:
        yield "cls_token", params.cls_token
    if params.channel_embed is not None:
        yield "channel_embed", params.channel_embed
    for i, bp in enumerate(params.blocks):
        prefix = f"blocks.{i}"
        yield f"{prefix}.input_scale", bp.input_scale
        yield f"{prefix}.w_expand", bp.w_expand
        for tag, dp in (("fwd", bp.fwd), ("bwd", bp.bwd)):
            yield f"{prefix}.{tag}.conv_kernel", dp.conv_kernel
            yield f"{prefix}.{tag}.conv_bias", dp.conv_bias
            yield f"{prefix}.{tag}.a_log", dp.selective.a_log
            yield f"{prefix}.{tag}.d_skip", dp.selective.d_skip
            yield f"{prefix}.{tag}.dt_bias", dp.selective.dt_bias
            yield f"{prefix}.{tag}.w_b", dp.selective.w_b
            yield f"{prefix}.{tag}.w_c", dp.selective.w_c
            yield f"{prefix}.{tag}.w_dt", dp.selective.w_dt
            yield f"{prefix}.{tag}.post_scale", dp.post_scale
            yield f"{prefix}.{tag}.post_shift", dp.post_shift
            if dp.score_weights is not None:
                yield f"{prefix}.{tag}.score_weights", dp.score_weights
        yield f"{prefix}.w_out", bp.w_out
    yield "final_scale", params.final_scale
    if params.classifier_w is not None:
        yield "classifier.weight", params.classifier_w
        yield "classifier.bias", params.classifier_b


def save_params(directory, config: EncoderConfig, params: EncoderParams) -> None:
    """Dump every parameter as an FVT1 tensor plus a manifest naming them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, arr in _named_tensors(params):
        fname = name.replace("/", "_") + ".fvt"
        fvt.write_fvt(directory / fname, np.asarray(arr, dtype=np.float64))
        tensors[name] = {"file": fname, "shape": list(np.asarray(arr).shape)}
    manifest = {
        "format": "fastscan-weights-v1",
        "config": config.to_dict(),
        "tensors": tensors,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_params(directory):
    """Load (config, params) from a weights directory; raise ManifestError on mismatch."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ManifestError(f"{directory}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "fastscan-weights-v1":
        raise ManifestError(f"{directory}: unrecognized manifest format")
    config = EncoderConfig.from_dict(manifest["config"])

    loaded = {}
    for name, entry in manifest["tensors"].items():
        path = directory / entry["file"]
        if not path.exists():
            raise ManifestError(f"{directory}: manifest names missing tensor file {entry['file']}")
        arr = fvt.read_fvt(path)
        if list(arr.shape) != entry["shape"]:
            raise ManifestError(
                f"{name}: stored shape {list(arr.shape)} != manifest {entry['shape']}")
        loaded[name] = arr

    def need(name):
        if name not in loaded:
            raise ManifestError(f"manifest is missing required tensor {name}")
        return loaded[name]

    blocks = []
    for i in range(config.n_layers):
        prefix = f"blocks.{i}"
        dirs = {}
        for tag in ("fwd", "bwd"):
            dirs[tag] = DirectionParams(
                conv_kernel=need(f"{prefix}.{tag}.conv_kernel"),
                conv_bias=need(f"{prefix}.{tag}.conv_bias"),
                selective=SelectiveSSMParams(
                    a_log=need(f"{prefix}.{tag}.a_log"),
                    d_skip=need(f"{prefix}.{tag}.d_skip"),
                    dt_bias=need(f"{prefix}.{tag}.dt_bias"),
                    w_b=need(f"{prefix}.{tag}.w_b"),
                    w_c=need(f"{prefix}.{tag}.w_c"),
                    w_dt=need(f"{prefix}.{tag}.w_dt"),
                ),
                post_scale=need(f"{prefix}.{tag}.post_scale"),
                post_shift=need(f"{prefix}.{tag}.post_shift"),
                score_weights=loaded.get(f"{prefix}.{tag}.score_weights"),
            )
        blocks.append(BlockParams(
            block_index=i,
            input_scale=need(f"{prefix}.input_scale"),
            w_expand=need(f"{prefix}.w_expand"),
            fwd=dirs["fwd"],
            bwd=dirs["bwd"],
            w_out=need(f"{prefix}.w_out"),
            use_post_norm=config.post_norm,
            skip_placement=config.skip_placement,
            fused_repeat_skip=config.fused_repeat_skip,
        ))
    params = EncoderParams(
        patch_weight=need("patch_embed.weight"),
        patch_bias=need("patch_embed.bias"),
        pos_embed=need("pos_embed"),
        blocks=tuple(blocks),
        final_scale=need("final_scale"),
        cls_token=loaded.get("cls_token"),
        channel_embed=loaded.get("channel_embed"),
        classifier_w=loaded.get("classifier.weight"),
        classifier_b=loaded.get("classifier.bias"),
    )
    return config, params
