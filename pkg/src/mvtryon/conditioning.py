"""Garment feature encoders, soft view selection, and the joint attention block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as num
from . import nn
from .errors import ContractError, DimensionError
from .nn import LinearLayer, ParamSpec, ParamStore
from .numerics import Tensor
from .pose import PoseEmbedding, PoseSkeleton


@dataclass
class GarmentPair:
    """Frontal and back product shots of one garment, with their poses."""

    front_image: Tensor
    back_image: Tensor
    front_pose: PoseSkeleton
    back_pose: PoseSkeleton

    def __post_init__(self):
        if self.front_image.shape != self.back_image.shape:
            raise ContractError(
                f"garment views disagree: {self.front_image.shape} vs {self.back_image.shape}")

    def image(self, choice) -> Tensor:
        from .pose import ViewChoice

        return self.front_image if choice == ViewChoice.FRONT else self.back_image


@dataclass
class GlobalCondition:
    """Single semantic garment token, shape (1, d_g)."""

    token: Tensor

    def __post_init__(self):
        if self.token.ndim != 2 or self.token.shape[0] != 1:
            raise ContractError(f"global condition must be a 1 x d token, got {self.token.shape}")


@dataclass
class LocalFeaturePyramid:
    """Multi-scale garment token grids, finest level first.

    ``levels[i]`` holds (n_i, d_i) tokens laid out row-major over
    ``grids[i]``; each level quarters the token count of the previous one.
    """

    levels: list[Tensor]
    grids: list[tuple[int, int]]


@dataclass
class SoftSelectionBlock:
    """Per-scale projections for pose-similarity soft selection.

    ``w_h`` maps person-pose tokens, ``w_f`` maps garment-pose tokens (one
    map shared by the front and back views), ``w_c`` maps garment features;
    all land in a common width d.
    """

    w_h: LinearLayer
    w_f: LinearLayer
    w_c: LinearLayer
    scale: int = 0

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str, scale: int = 0) -> "SoftSelectionBlock":
        return cls(
            w_h=LinearLayer.from_store(store, f"{prefix}.w_h"),
            w_f=LinearLayer.from_store(store, f"{prefix}.w_f"),
            w_c=LinearLayer.from_store(store, f"{prefix}.w_c"),
            scale=scale,
        )


def soft_selection_spec(prefix: str, d: int, d_p: int, d_c: int) -> list[ParamSpec]:
    return (nn.linear_spec(f"{prefix}.w_h", d, d_p)
            + nn.linear_spec(f"{prefix}.w_f", d, d_p)
            + nn.linear_spec(f"{prefix}.w_c", d, d_c))


# ---------------------------------------------------------------------------
# encoders


def global_encoder_spec(d_g: int, prefix: str = "global_enc",
                        widths: tuple[int, ...] = (8, 16, 24, 32)) -> list[ParamSpec]:
    specs: list[ParamSpec] = []
    in_ch = 3
    for i, w in enumerate(widths):
        specs += nn.conv_spec(f"{prefix}.conv{i}", w, in_ch)
        in_ch = w
    specs += nn.linear_spec(f"{prefix}.head", d_g, in_ch)
    return specs


def global_encode(image: Tensor, params: ParamStore, prefix: str = "global_enc") -> GlobalCondition:
    """Four (conv, GELU, pool) stages, global average pool, linear head."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"garment image must be 3 x H x W, got {image.shape}")
    _, h, w = image.shape
    if h % 16 or w % 16:
        raise ContractError(f"global encoder needs H, W divisible by 16, got {h}x{w}")
    x = image
    i = 0
    while f"{prefix}.conv{i}.w" in params:
        x = nn.conv_layer(params, f"{prefix}.conv{i}", x, pad=1)
        x = num.gelu(x)
        x = num.avg_pool2d(x, 2)
        i += 1
    c = x.shape[0]
    pooled = num.mean_axis(num.reshape(x, (c, x.shape[1] * x.shape[2])), axis=1)
    token = nn.linear(LinearLayer.from_store(params, f"{prefix}.head"),
                      num.reshape(pooled, (1, c)))
    return GlobalCondition(token)


def local_encoder_spec(widths: tuple[int, ...], prefix: str = "local_enc",
                       stem_width: int | None = None) -> list[ParamSpec]:
    stem_width = stem_width or widths[0]
    specs = nn.conv_spec(f"{prefix}.stem", stem_width, 3)
    in_ch = stem_width
    for i, w in enumerate(widths):
        specs += nn.conv_spec(f"{prefix}.conv{i}", w, in_ch)
        in_ch = w
    return specs


def local_encode(image: Tensor, params: ParamStore, prefix: str = "local_enc") -> LocalFeaturePyramid:
    """Conv stem then per-scale (conv, GELU, pool) token grids.

    Levels are ordered finest first: with S scales the i-th level lives on an
    (H, W) / 2^(i+2) grid, so token counts drop by 4x per level. Input dims
    must divide 2^(S+1).
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"garment image must be 3 x H x W, got {image.shape}")
    scales = 0
    while f"{prefix}.conv{scales}.w" in params:
        scales += 1
    if scales == 0:
        raise ContractError(f"no local-encoder conv parameters under {prefix!r}")
    _, h, w = image.shape
    factor = 2 ** (scales + 1)
    if h % factor or w % factor:
        raise ContractError(f"local encoder needs H, W divisible by {factor}, got {h}x{w}")
    x = nn.conv_layer(params, f"{prefix}.stem", image, pad=1)
    x = num.gelu(x)
    x = num.avg_pool2d(x, 2)
    levels: list[Tensor] = []
    grids: list[tuple[int, int]] = []
    for i in range(scales):
        x = nn.conv_layer(params, f"{prefix}.conv{i}", x, pad=1)
        x = num.gelu(x)
        x = num.avg_pool2d(x, 2)
        c, gh, gw = x.shape
        levels.append(num.transpose(num.reshape(x, (c, gh * gw))))
        grids.append((gh, gw))
    return LocalFeaturePyramid(levels, grids)


# ---------------------------------------------------------------------------
# token-grid resampling


def resample_tokens(tokens: Tensor, grid: tuple[int, int], out_grid: tuple[int, int]) -> Tensor:
    """Bilinearly resample a row-major (n, d) token grid to another grid size."""
    gh, gw = grid
    if tokens.ndim != 2 or tokens.shape[0] != gh * gw:
        raise DimensionError(f"tokens {tokens.shape} do not tile grid {grid}")
    if (gh, gw) == tuple(out_grid):
        return tokens
    d = tokens.shape[1]
    spatial = num.reshape(num.transpose(tokens), (d, gh, gw))
    resized = num.bilinear_resize(spatial, out_grid)
    oh, ow = out_grid
    return num.transpose(num.reshape(resized, (d, oh * ow)))


def resample_embedding(emb: PoseEmbedding, out_grid: tuple[int, int]) -> PoseEmbedding:
    return PoseEmbedding(resample_tokens(emb.tokens, emb.grid, out_grid), tuple(out_grid))


# ---------------------------------------------------------------------------
# soft selection


def soft_select(c_f_i: Tensor, c_b_i: Tensor, emb_h: PoseEmbedding,
                emb_f: PoseEmbedding, emb_b: PoseEmbedding,
                block: SoftSelectionBlock) -> Tensor:
    """Pose-similarity weighting of front/back garment tokens at one scale.

    Both garment views are aggregated onto the person-pose token grid:
    weights = softmax(P_h P_f^T / sqrt(d)) over garment tokens, modulated
    features = weights @ C_f, and the front/back results are concatenated
    along channels, giving (n_person, 2d).
    """
    for name, emb, feats in (("front", emb_f, c_f_i), ("back", emb_b, c_b_i)):
        if feats.ndim != 2:
            raise ContractError(f"{name} garment features must be 2-d tokens, got {feats.shape}")
        if emb.tokens.shape[0] != feats.shape[0]:
            raise ContractError(
                f"{name} garment token count {feats.shape[0]} != pose token count "
                f"{emb.tokens.shape[0]}")
    p_h = nn.linear(block.w_h, emb_h.tokens)
    d = p_h.shape[1]
    halves = []
    for emb, feats in ((emb_f, c_f_i), (emb_b, c_b_i)):
        p_g = nn.linear(block.w_f, emb.tokens)
        c_g = nn.linear(block.w_c, feats)
        scores = num.scale(num.matmul(p_h, num.transpose(p_g)), 1.0 / math.sqrt(d))
        weights = num.softmax(scores, axis=1)
        halves.append(num.matmul(weights, c_g))
    return num.concat(halves, axis=1)


def soft_selection_weights(emb_h: PoseEmbedding, emb_g: PoseEmbedding,
                           block: SoftSelectionBlock) -> Tensor:
    """The selection-weight matrix for one garment view (rows sum to 1)."""
    p_h = nn.linear(block.w_h, emb_h.tokens)
    p_g = nn.linear(block.w_f, emb_g.tokens)
    d = p_h.shape[1]
    return num.softmax(num.scale(num.matmul(p_h, num.transpose(p_g)), 1.0 / math.sqrt(d)), axis=1)


# ---------------------------------------------------------------------------
# joint attention


def joint_attention_spec(prefix: str, d_i: int, d_g: int) -> list[ParamSpec]:
    specs: list[ParamSpec] = []
    specs += nn.layernorm_spec(f"{prefix}.ln1", d_i)
    specs += nn.layernorm_spec(f"{prefix}.ln2", d_i)
    for name in ("sq", "sk", "sv"):
        specs += nn.linear_spec(f"{prefix}.{name}", d_i, d_i)
    specs += nn.linear_spec(f"{prefix}.qg", d_i, d_i)
    specs += nn.linear_spec(f"{prefix}.kg", d_i, d_g)
    specs += nn.linear_spec(f"{prefix}.vg", d_i, d_g)
    specs += nn.linear_spec(f"{prefix}.ql", d_i, d_i)
    specs += nn.linear_spec(f"{prefix}.kl", d_i, d_i)
    specs += nn.linear_spec(f"{prefix}.vl", d_i, d_i)
    specs.append(ParamSpec(f"{prefix}.lam", (d_i,), init="zeros"))
    return specs


def joint_attention(f_in: Tensor, c_g, c_l_i: Tensor, params: ParamStore,
                    lam: Tensor, prefix: str) -> Tensor:
    """Self-attention plus a fused double cross-attention over garment features.

    Pre-norm residual form: h = f_in + selfattn(LN(f_in)), then
    out = h + crossattn_global(LN(h), c_g) + lam * crossattn_local(LN(h), c_l).
    ``lam`` scales the local branch channel-wise; zero lam reproduces the
    global-only pathway exactly.
    """
    d_i = f_in.shape[1]
    if lam.ndim != 1 or lam.shape[0] != d_i:
        raise ContractError(f"fusion vector length {lam.shape} != feature dim {d_i}")
    cg_tokens = c_g.token if isinstance(c_g, GlobalCondition) else c_g
    lin = lambda name, x: nn.linear(LinearLayer.from_store(params, f"{prefix}.{name}"), x)

    h0 = num.layernorm(f_in, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    h = num.add(f_in, nn.attention(lin("sq", h0), lin("sk", h0), lin("sv", h0)))
    h1 = num.layernorm(h, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    global_branch = nn.attention(lin("qg", h1), lin("kg", cg_tokens), lin("vg", cg_tokens))
    local_branch = nn.attention(lin("ql", h1), lin("kl", c_l_i), lin("vl", c_l_i))
    fused = num.add(global_branch, num.mul_vec(local_branch, lam, axis=1))
    return num.add(h, fused)


__all__ = [
    "GarmentPair", "GlobalCondition", "LocalFeaturePyramid", "SoftSelectionBlock",
    "soft_selection_spec", "global_encoder_spec", "global_encode",
    "local_encoder_spec", "local_encode",
    "resample_tokens", "resample_embedding",
    "soft_select", "soft_selection_weights",
    "joint_attention_spec", "joint_attention",
]
