"""Encoder towers: patch/token embedding, mixing blocks, pooling, projection.

Each block applies two residual sub-modules with pre-normalization:

    x = x + spatial_mixing(LN(x))    inter-token aggregation via the
                                     bidirectional kernel, gated by SiLU
    x = x + channel_mixing(LN(x))    per-token feedforward with squared
                                     ReLU and a SiLU gate

A tower is embed -> blocks -> final LN -> mean pool over non-pad tokens ->
linear map into the shared space -> L2 normalization. There are no position
embeddings by default; relative position is carried entirely by the shift
operators and the decay products (a learned absolute table can be enabled
per config).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .shifts import (DecayParams, ImageLayout, LerpParams, TextLayout,
                     TokenGrid, decay_path, lerp, token_shift)
from .tensor import (Tensor, ShapeError, embedding, layer_norm, matmul,
                     silu, sqrt_op, squared_relu, tmean, transpose, tsum)
from .wkv import WKV_CLAMP, biwkv

__all__ = [
    "LN_EPS",
    "PAD_ID",
    "EncoderConfig",
    "SpatialMixParams",
    "ChannelMixParams",
    "BlockParams",
    "TowerParams",
    "init_tower",
    "named_parameters",
    "is_no_decay",
    "patch_embed",
    "text_embed",
    "spatial_mixing",
    "channel_mixing",
    "encoder_forward",
    "param_count",
    "flops_estimate",
    "paper_image_config",
    "paper_text_config",
    "desk_image_config",
    "desk_text_config",
]

LN_EPS = 1e-5
PAD_ID = 0


@dataclass
class EncoderConfig:
    """Hyperparameters of one tower."""

    modality: str                   # "image" or "text"
    embed_dim: int = 64
    layers: int = 4
    heads: int = 4
    hidden_rate: float = 4.0
    patch_size: int = 8             # image only
    image_size: int = 32            # image only, pixels per side
    vocab_size: int = 259           # text only
    context_len: int = 32           # text only
    shared_dim: int | None = None   # defaults to embed_dim
    decay_rank: int = 32
    separate_decay_phi: bool = False
    learned_positions: bool = False

    def __post_init__(self):
        if self.modality not in ("image", "text"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.embed_dim % 4 != 0:
            raise ValueError("embed_dim must be divisible by 4")
        if self.decay_rank > self.embed_dim:
            raise ValueError("decay_rank must not exceed embed_dim")
        if self.modality == "text" and self.context_len > 77:
            raise ValueError("context_len is capped at 77")
        if self.modality == "image" and self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.shared_dim is None:
            self.shared_dim = self.embed_dim

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.hidden_rate * self.embed_dim))

    @property
    def tokens(self) -> int:
        if self.modality == "image":
            return (self.image_size // self.patch_size) ** 2
        return self.context_len


@dataclass
class SpatialMixParams:
    heads: int
    lerp: LerpParams                      # targets g, r, k, v, w
    decay: DecayParams
    proj_g: Tensor
    proj_r: Tensor
    proj_k: Tensor
    proj_v: Tensor
    proj_out: Tensor
    head_ln_gain: Tensor
    head_ln_bias: Tensor
    u: Tensor                             # (H, C/H)
    decay_inner: DecayParams | None = None


@dataclass
class ChannelMixParams:
    lerp: LerpParams                      # targets r, k
    proj_r: Tensor                        # (C, C)
    proj_k: Tensor                        # (C, C_h)
    proj_v: Tensor                        # (C_h, C)


@dataclass
class BlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    spatial: SpatialMixParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    channel: ChannelMixParams


@dataclass
class TowerParams:
    config: EncoderConfig
    embed: Tensor                         # (3 p^2, C) or (vocab, C)
    blocks: list[BlockParams]
    final_ln_gain: Tensor
    final_ln_bias: Tensor
    proj_shared: Tensor                   # (C, D_e)
    pos: Tensor | None = None


def _param(rng, shape, scale) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _const(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def _init_decay(rng, c: int, rank: int, d: int) -> DecayParams:
    # base spans slow-to-fast decays within every head's channel slice
    ramp = (np.arange(c) % d) / max(d - 1, 1)
    base = -6.0 + 5.0 * ramp
    return DecayParams(
        base=_const(base),
        down=_param(rng, (c, rank), 1.0 / math.sqrt(c)),
        up=_const(np.zeros((rank, c))),
    )


def init_tower(config: EncoderConfig, rng: np.random.Generator) -> TowerParams:
    """Fresh tower parameters.

    Output projections of both sub-modules start at zero so every block is
    the identity at initialization; the rest uses 1/sqrt(fan_in) Gaussians.
    """
    c = config.embed_dim
    h = config.heads
    d = config.head_dim
    c_h = config.hidden_dim
    ramp = np.arange(c) / max(c - 1, 1)

    if config.modality == "image":
        in_dim = 3 * config.patch_size ** 2
        embed = _param(rng, (in_dim, c), 1.0 / math.sqrt(in_dim))
    else:
        embed = _param(rng, (config.vocab_size, c), 0.02)

    blocks = []
    for _ in range(config.layers):
        sp_lerp = LerpParams({t: _const(1.0 - 0.3 * ramp) for t in ("g", "r", "k", "v", "w")})
        ch_lerp = LerpParams({t: _const(1.0 - 0.3 * ramp) for t in ("r", "k")})
        spatial = SpatialMixParams(
            heads=h,
            lerp=sp_lerp,
            decay=_init_decay(rng, c, config.decay_rank, d),
            decay_inner=_init_decay(rng, c, config.decay_rank, d)
            if config.separate_decay_phi else None,
            proj_g=_param(rng, (c, c), 1.0 / math.sqrt(c)),
            proj_r=_param(rng, (c, c), 1.0 / math.sqrt(c)),
            proj_k=_param(rng, (c, c), 1.0 / math.sqrt(c)),
            proj_v=_param(rng, (c, c), 1.0 / math.sqrt(c)),
            proj_out=_const(np.zeros((c, c))),
            head_ln_gain=_const(np.ones(c)),
            head_ln_bias=_const(np.zeros(c)),
            u=_const(np.tile((d - np.arange(d)) / d, (h, 1))),
        )
        channel = ChannelMixParams(
            lerp=ch_lerp,
            proj_r=_param(rng, (c, c), 1.0 / math.sqrt(c)),
            proj_k=_param(rng, (c, c_h), 1.0 / math.sqrt(c)),
            proj_v=_const(np.zeros((c_h, c))),
        )
        blocks.append(BlockParams(
            ln1_gain=_const(np.ones(c)), ln1_bias=_const(np.zeros(c)),
            spatial=spatial,
            ln2_gain=_const(np.ones(c)), ln2_bias=_const(np.zeros(c)),
            channel=channel,
        ))

    pos = None
    if config.learned_positions:
        pos = _const(np.zeros((config.tokens, c)))

    return TowerParams(
        config=config,
        embed=embed,
        blocks=blocks,
        final_ln_gain=_const(np.ones(c)),
        final_ln_bias=_const(np.zeros(c)),
        proj_shared=_param(rng, (c, config.shared_dim), 1.0 / math.sqrt(c)),
        pos=pos,
    )


def named_parameters(tower: TowerParams, prefix: str) -> list[tuple[str, Tensor]]:
    out: list[tuple[str, Tensor]] = [(f"{prefix}.embed", tower.embed)]
    if tower.pos is not None:
        out.append((f"{prefix}.pos", tower.pos))
    for i, blk in enumerate(tower.blocks):
        base = f"{prefix}.blocks.{i}"
        out.append((f"{base}.ln1.gain", blk.ln1_gain))
        out.append((f"{base}.ln1.bias", blk.ln1_bias))
        sp = blk.spatial
        for t, tens in sorted(sp.lerp.eta.items()):
            out.append((f"{base}.spatial.eta.{t}", tens))
        out.append((f"{base}.spatial.decay.base", sp.decay.base))
        out.append((f"{base}.spatial.decay.down", sp.decay.down))
        out.append((f"{base}.spatial.decay.up", sp.decay.up))
        if sp.decay_inner is not None:
            out.append((f"{base}.spatial.decay_inner.base", sp.decay_inner.base))
            out.append((f"{base}.spatial.decay_inner.down", sp.decay_inner.down))
            out.append((f"{base}.spatial.decay_inner.up", sp.decay_inner.up))
        out.append((f"{base}.spatial.proj_g", sp.proj_g))
        out.append((f"{base}.spatial.proj_r", sp.proj_r))
        out.append((f"{base}.spatial.proj_k", sp.proj_k))
        out.append((f"{base}.spatial.proj_v", sp.proj_v))
        out.append((f"{base}.spatial.proj_out", sp.proj_out))
        out.append((f"{base}.spatial.head_ln.gain", sp.head_ln_gain))
        out.append((f"{base}.spatial.head_ln.bias", sp.head_ln_bias))
        out.append((f"{base}.spatial.u", sp.u))
        out.append((f"{base}.ln2.gain", blk.ln2_gain))
        out.append((f"{base}.ln2.bias", blk.ln2_bias))
        ch = blk.channel
        for t, tens in sorted(ch.lerp.eta.items()):
            out.append((f"{base}.channel.eta.{t}", tens))
        out.append((f"{base}.channel.proj_r", ch.proj_r))
        out.append((f"{base}.channel.proj_k", ch.proj_k))
        out.append((f"{base}.channel.proj_v", ch.proj_v))
    out.append((f"{prefix}.final_ln.gain", tower.final_ln_gain))
    out.append((f"{prefix}.final_ln.bias", tower.final_ln_bias))
    out.append((f"{prefix}.proj_shared", tower.proj_shared))
    return out


def is_no_decay(name: str) -> bool:
    """Weight decay is skipped for norm affines and the temperature scalar."""
    parts = name.split(".")
    return (len(parts) >= 2 and parts[-2] in ("ln1", "ln2", "head_ln", "final_ln")) \
        or name == "temperature.log_inv_tau"


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def patch_embed(image: Tensor, p: int, proj: Tensor) -> TokenGrid:
    """Non-overlapping p x p x 3 patches, flattened row-major and projected."""
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if image.ndim != 4 or image.shape[3] != 3:
        raise ShapeError(f"image must be (B, H, W, 3), got {image.shape}")
    b, hp, wp, _ = image.shape
    if hp % p != 0 or wp % p != 0:
        raise ShapeError(f"image size {hp}x{wp} not divisible by patch size {p}")
    gh, gw = hp // p, wp // p
    x = image.reshape((b, gh, p, gw, p, 3))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    x = x.reshape((b, gh * gw, 3 * p * p))
    tokens = matmul(x, proj)
    return TokenGrid(tokens, ImageLayout(gh, gw))


def text_embed(ids: np.ndarray, table: Tensor, pad_id: int = PAD_ID) -> TokenGrid:
    """Token-id lookup; pad ids give zero vectors and set the pad mask."""
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ShapeError(f"ids must be (B, T), got {ids.shape}")
    pad_mask = ids == pad_id
    emb = embedding(ids, table)
    keep = (~pad_mask).astype(np.float64)[:, :, None]
    tokens = emb * keep
    return TokenGrid(tokens, TextLayout(pad_mask))


def spatial_mixing(grid: TokenGrid, params: SpatialMixParams) -> Tensor:
    """Inter-token mixing: shift, four projections, decay, kernel, gate."""
    x = grid.tokens
    b, t, c = x.shape
    h = params.heads
    d = c // h
    xs = token_shift(grid)

    g = matmul(lerp(x, xs, params.lerp["g"]), params.proj_g)
    r = matmul(lerp(x, xs, params.lerp["r"]), params.proj_r)
    k = matmul(lerp(x, xs, params.lerp["k"]), params.proj_k)
    v = matmul(lerp(x, xs, params.lerp["v"]), params.proj_v)
    w_tilde, _ = decay_path(x, xs, params.lerp["w"], params.decay,
                            params.decay_inner)

    if grid.is_text:
        # pads contribute nothing and must not block decay flow (w = 1)
        keep = (~grid.layout.pad_mask).astype(np.float64)[:, :, None]
        k = k * keep
        v = v * keep
        w_tilde = w_tilde * keep + (-WKV_CLAMP) * (1.0 - keep)

    def split_heads(tens: Tensor) -> Tensor:
        return transpose(tens.reshape((b, t, h, d)), (0, 2, 1, 3))

    wkv = biwkv(split_heads(r), split_heads(k), split_heads(v),
                split_heads(w_tilde), params.u)
    wkv = transpose(wkv, (0, 2, 1, 3))    # (B, T, H, d)
    normed = layer_norm(wkv, params.head_ln_gain.reshape((h, d)),
                        params.head_ln_bias.reshape((h, d)), eps=LN_EPS)
    merged = normed.reshape((b, t, c))
    return matmul(silu(g) * merged, params.proj_out)


def channel_mixing(grid: TokenGrid, params: ChannelMixParams) -> Tensor:
    """Per-token feedforward; the SiLU gate multiplies the down-projected path."""
    x = grid.tokens
    xs = token_shift(grid)
    r = matmul(lerp(x, xs, params.lerp["r"]), params.proj_r)
    k = matmul(lerp(x, xs, params.lerp["k"]), params.proj_k)
    return silu(r) * matmul(squared_relu(k), params.proj_v)


def _embed_input(inp, tower: TowerParams) -> TokenGrid:
    cfg = tower.config
    if cfg.modality == "image":
        return patch_embed(inp, cfg.patch_size, tower.embed)
    return text_embed(inp, tower.embed)


def encoder_forward(inp, tower: TowerParams) -> Tensor:
    """Encode a batch into L2-normalized shared-space embeddings (B, D_e)."""
    grid = _embed_input(inp, tower)
    x = grid.tokens
    if tower.pos is not None:
        if tower.pos.shape[0] != x.shape[1]:
            raise ShapeError("position table does not match token count")
        x = x + tower.pos
    for blk in tower.blocks:
        normed = layer_norm(x, blk.ln1_gain, blk.ln1_bias, eps=LN_EPS)
        x = x + spatial_mixing(grid.with_tokens(normed), blk.spatial)
        normed = layer_norm(x, blk.ln2_gain, blk.ln2_bias, eps=LN_EPS)
        x = x + channel_mixing(grid.with_tokens(normed), blk.channel)
    x = layer_norm(x, tower.final_ln_gain, tower.final_ln_bias, eps=LN_EPS)

    if grid.is_text:
        keep = (~grid.layout.pad_mask).astype(np.float64)[:, :, None]
        counts = keep.sum(axis=1)          # (B, 1)
        pooled = tsum(x * keep, axis=1) * (1.0 / counts)
    else:
        pooled = tmean(x, axis=1)

    z = matmul(pooled, tower.proj_shared)
    norm_sq = tsum(z * z, axis=1, keepdims=True)
    return z / sqrt_op(norm_sq)


# ---------------------------------------------------------------------------
# bookkeeping
# ---------------------------------------------------------------------------

def param_count(config: EncoderConfig) -> int:
    """Exact learnable-scalar count of one tower under this layout."""
    c = config.embed_dim
    c_h = config.hidden_dim
    r = config.decay_rank
    decay = c + 2 * c * r
    if config.separate_decay_phi:
        decay *= 2
    spatial = 5 * c + decay + 5 * c * c + 2 * c + c
    channel = 2 * c + c * c + c * c_h + c_h * c
    block = 4 * c + spatial + channel      # the 4c covers both pre-norms
    if config.modality == "image":
        embed = 3 * config.patch_size ** 2 * c
    else:
        embed = config.vocab_size * c
    total = embed + config.layers * block + 2 * c + c * config.shared_dim
    if config.learned_positions:
        total += config.tokens * c
    return total


def flops_estimate(config: EncoderConfig, input_size: int) -> float:
    """Forward FLOPs (2 x multiply-accumulates) for one sample.

    ``input_size`` is pixels per side for images and token count for text.
    Elementwise work is ignored; matmuls and the kernel scan dominate.
    """
    c = config.embed_dim
    c_h = config.hidden_dim
    h = config.heads
    d = config.head_dim
    r = config.decay_rank
    if config.modality == "image":
        t = (input_size // config.patch_size) ** 2
        embed_macs = t * (3 * config.patch_size ** 2) * c
    else:
        t = input_size
        embed_macs = 0
    spatial = 5 * t * c * c + 4 * t * c * r + 4 * t * h * d * d + t * c
    channel = t * c * c + 2 * t * c * c_h
    macs = embed_macs + config.layers * (spatial + channel) + c * config.shared_dim
    return 2.0 * macs


# ---------------------------------------------------------------------------
# reference configurations
# ---------------------------------------------------------------------------

def paper_image_config(patch_size: int = 32) -> EncoderConfig:
    return EncoderConfig(modality="image", embed_dim=640, layers=12, heads=8,
                         hidden_rate=5.0, patch_size=patch_size, image_size=224,
                         shared_dim=640, decay_rank=32)


def paper_text_config() -> EncoderConfig:
    return EncoderConfig(modality="text", embed_dim=640, layers=6, heads=10,
                         hidden_rate=3.5, vocab_size=49408, context_len=77,
                         shared_dim=640, decay_rank=32)


def desk_image_config() -> EncoderConfig:
    return EncoderConfig(modality="image", embed_dim=64, layers=4, heads=4,
                         hidden_rate=4.0, patch_size=8, image_size=32,
                         shared_dim=64, decay_rank=32)


def desk_text_config() -> EncoderConfig:
    return EncoderConfig(modality="text", embed_dim=64, layers=2, heads=2,
                         hidden_rate=3.5, vocab_size=259, context_len=32,
                         shared_dim=64, decay_rank=32)
