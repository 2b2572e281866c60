"""Noise schedule, forward process, conditional inpainting U-Net, and sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as num
from . import nn
from .conditioning import (
    GarmentPair,
    GlobalCondition,
    SoftSelectionBlock,
    global_encode,
    global_encoder_spec,
    joint_attention,
    joint_attention_spec,
    local_encode,
    local_encoder_spec,
    resample_embedding,
    resample_tokens,
    soft_select,
    soft_selection_spec,
)
from .data import MvgSample, TryOnSample, make_tryon_sample
from .errors import ContractError, SingularityError
from .nn import LinearLayer, ParamSpec, ParamStore
from .numerics import Tensor
from .pose import PoseSkeleton, ViewChoice, hard_select_or_front, pose_encode, pose_encoder_spec, render_skeleton


# ---------------------------------------------------------------------------
# schedule and forward process


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule: betas and their cumulative signal products."""

    T: int
    betas: np.ndarray
    alphas_bar: np.ndarray

    def __post_init__(self):
        if self.T < 1 or self.betas.shape != (self.T,) or self.alphas_bar.shape != (self.T,):
            raise ContractError("schedule arrays must have length T >= 1")
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ContractError("betas must lie in (0, 1)")
        if not ((self.alphas_bar > 0) & (self.alphas_bar < 1)).all():
            raise ContractError("alphas_bar must lie in (0, 1)")
        if not (np.diff(self.alphas_bar) < 0).all():
            raise ContractError("alphas_bar must be strictly decreasing")

    def alpha_bar(self, t: int) -> float:
        """Cumulative product for step t in [0, T]; t = 0 is the clean image."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ContractError(f"step {t} outside [1, {self.T}]")
        return float(self.alphas_bar[t - 1])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ContractError(f"need T >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ContractError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T)
    return NoiseSchedule(T=T, betas=betas, alphas_bar=np.cumprod(1.0 - betas))


def _check_step(sched, t: int) -> None:
    if not 1 <= int(t) <= sched.T:
        raise ContractError(f"step {t} outside [1, {sched.T}]")


def forward_diffuse(z0: Tensor, t: int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if z0.shape != eps.shape:
        raise ContractError(f"noise shape {eps.shape} != signal shape {z0.shape}")
    _check_step(sched, t)
    ab = sched.alpha_bar(int(t))
    return num.add(num.scale(z0, math.sqrt(ab)), num.scale(eps, math.sqrt(1.0 - ab)))


def reconstruct_x0(z_t: Tensor, eps_hat: Tensor, t: int, sched: NoiseSchedule) -> Tensor:
    """Invert the forward process: x0 = (z_t - sqrt(1 - abar) eps_hat) / sqrt(abar)."""
    if z_t.shape != eps_hat.shape:
        raise ContractError(f"prediction shape {eps_hat.shape} != latent shape {z_t.shape}")
    _check_step(sched, t)
    ab = sched.alpha_bar(int(t))
    if ab <= 0.0:
        raise SingularityError(f"alpha_bar({t}) = 0 cannot be inverted")
    diff = num.sub(z_t, num.scale(eps_hat, math.sqrt(1.0 - ab)))
    return num.scale(diff, 1.0 / math.sqrt(ab))


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class BackboneConfig:
    """Widths and sizes shared by the backbone and its condition encoders."""

    image_hw: tuple[int, int] = (64, 48)
    base_width: int = 16
    scale_count: int = 2
    d_g: int = 32
    d_p: int = 16
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        h, w = self.image_hw
        if h % 16 or w % 16:
            raise ContractError(f"image dims must divide 16, got {h}x{w}")
        if self.scale_count != 2:
            raise ContractError("the backbone is built for exactly 2 scales")

    @property
    def widths(self) -> tuple[int, int, int]:
        return (self.base_width, 2 * self.base_width, 4 * self.base_width)

    @property
    def local_widths(self) -> tuple[int, int]:
        # garment pyramid channel dims, finest level first
        return (self.base_width, 2 * self.base_width)

    @property
    def global_widths(self) -> tuple[int, int, int, int]:
        b = self.base_width
        return (max(4, b // 2), b, b + b // 2, 2 * b)

    @property
    def latent_channels(self) -> int:
        return 3

    @property
    def spatial_channels(self) -> int:
        return 2 * self.latent_channels + 1

    @property
    def pose_grid(self) -> tuple[int, int]:
        return (self.image_hw[0] // 8, self.image_hw[1] // 8)

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class SpatialInput:
    """Channel stack fed to the backbone: latent, encoded agnostic, mask."""

    channels: Tensor
    latent_channels: int = 3

    @classmethod
    def assemble(cls, z_t: Tensor, encoded_agnostic: Tensor, mask: Tensor) -> "SpatialInput":
        d_z = z_t.shape[0]
        if encoded_agnostic.shape != z_t.shape:
            raise ContractError(
                f"agnostic shape {encoded_agnostic.shape} != latent shape {z_t.shape}")
        if mask.ndim != 3 or mask.shape[0] != 1 or mask.shape[1:] != z_t.shape[1:]:
            raise ContractError(f"mask must be 1 x H x W matching the latent, got {mask.shape}")
        if mask.data.min() < 0.0 or mask.data.max() > 1.0:
            raise ContractError("mask values must lie in [0, 1]")
        return cls(num.concat([z_t, encoded_agnostic, mask], axis=0), latent_channels=d_z)

    @property
    def shape(self):
        return self.channels.shape


@dataclass
class LocalConditions:
    """Soft-selected garment tokens per decoder scale, finest scale first.

    Every level is indexed by the person-pose token grid ``grid``; the
    backbone resamples each level onto its decoder resolution.
    """

    levels: list[Tensor]
    grid: tuple[int, int]


# ---------------------------------------------------------------------------
# backbone


def _block_spec(prefix: str, in_ch: int, out_ch: int, temb_dim: int) -> list[ParamSpec]:
    specs = nn.layernorm_spec(f"{prefix}.ln1", in_ch)
    specs += nn.conv_spec(f"{prefix}.conv1", out_ch, in_ch)
    specs += nn.linear_spec(f"{prefix}.temb", out_ch, temb_dim)
    specs += nn.layernorm_spec(f"{prefix}.ln2", out_ch)
    specs += nn.conv_spec(f"{prefix}.conv2", out_ch, out_ch)
    return specs


def backbone_spec(cfg: BackboneConfig, prefix: str = "unet") -> list[ParamSpec]:
    w0, w1, w2 = cfg.widths
    l0, l1 = cfg.local_widths
    specs = nn.conv_spec(f"{prefix}.conv_in", w0, cfg.spatial_channels)
    specs += _block_spec(f"{prefix}.enc0", w0, w0, w0)
    specs += _block_spec(f"{prefix}.enc1", w0, w1, w0)
    specs += _block_spec(f"{prefix}.mid", w1, w2, w0)
    specs += _block_spec(f"{prefix}.dec1", w2 + w1, w1, w0)
    specs += nn.linear_spec(f"{prefix}.dec1.cond", w1, 2 * l1)
    specs += joint_attention_spec(f"{prefix}.dec1.jab", w1, cfg.d_g)
    specs += _block_spec(f"{prefix}.dec0", w1 + w1, w0, w0)
    specs += nn.linear_spec(f"{prefix}.dec0.cond", w0, 2 * l0)
    specs += joint_attention_spec(f"{prefix}.dec0.jab", w0, cfg.d_g)
    specs += _block_spec(f"{prefix}.out", w0 + w0, w0, w0)
    specs += nn.conv_spec(f"{prefix}.conv_out", cfg.latent_channels, w0, init="zeros")
    return specs


def sinusoidal_embedding(t: int, dim: int) -> Tensor:
    """Standard transformer-style embedding of an integer timestep."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(1, half))
    ang = float(t) * freqs
    vec = np.concatenate([np.sin(ang), np.cos(ang)])
    if dim % 2:
        vec = np.concatenate([vec, np.zeros(1)])
    return Tensor(vec.reshape(1, dim))


def _unet_block(params: ParamStore, prefix: str, x: Tensor, temb: Tensor) -> Tensor:
    h = nn.channel_layernorm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    h = nn.conv_layer(params, f"{prefix}.conv1", h, pad=1)
    tproj = nn.linear(LinearLayer.from_store(params, f"{prefix}.temb"), temb)
    h = num.add_vec(h, num.reshape(tproj, (tproj.shape[1],)), axis=0)
    h = num.gelu(h)
    h = nn.channel_layernorm(h, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = nn.conv_layer(params, f"{prefix}.conv2", h, pad=1)
    return num.gelu(h)


def _decoder_attention(params: ParamStore, prefix: str, x: Tensor, c_g,
                       level: Tensor, grid: tuple[int, int]) -> Tensor:
    c, h, w = x.shape
    tokens = num.transpose(num.reshape(x, (c, h * w)))
    cond = resample_tokens(level, grid, (h, w))
    cond = nn.linear(LinearLayer.from_store(params, f"{prefix}.cond"), cond)
    out = joint_attention(tokens, c_g, cond, params, params[f"{prefix}.jab.lam"],
                          prefix=f"{prefix}.jab")
    return num.reshape(num.transpose(out), (c, h, w))


def predict_noise(inp: SpatialInput, t: int, c_g, c_l: LocalConditions,
                  params: ParamStore, cfg: BackboneConfig, prefix: str = "unet") -> Tensor:
    """Run the conditional U-Net: 2 down scales, bottleneck, 2 up scales.

    Joint attention conditions enter at the two decoder scales; the output
    has the latent's shape.
    """
    x = inp.channels
    if x.shape[0] != cfg.spatial_channels:
        raise ContractError(
            f"spatial input has {x.shape[0]} channels, config expects {cfg.spatial_channels}")
    if len(c_l.levels) != cfg.scale_count:
        raise ContractError(
            f"{len(c_l.levels)} condition levels for {cfg.scale_count} decoder scales")
    if not 1 <= int(t) <= cfg.T:
        raise ContractError(f"step {t} outside [1, {cfg.T}]")
    _, h, w = x.shape
    if h % 4 or w % 4:
        raise ContractError(f"latent dims must divide 4, got {h}x{w}")

    temb = sinusoidal_embedding(int(t), cfg.base_width)
    x = nn.conv_layer(params, f"{prefix}.conv_in", x, pad=1)
    b0 = _unet_block(params, f"{prefix}.enc0", x, temb)
    d0 = num.avg_pool2d(b0, 2)
    b1 = _unet_block(params, f"{prefix}.enc1", d0, temb)
    d1 = num.avg_pool2d(b1, 2)
    mid = _unet_block(params, f"{prefix}.mid", d1, temb)

    u = _unet_block(params, f"{prefix}.dec1", num.concat([mid, d1], axis=0), temb)
    u = _decoder_attention(params, f"{prefix}.dec1", u, c_g, c_l.levels[1], c_l.grid)
    u = num.upsample2(u)
    u = _unet_block(params, f"{prefix}.dec0", num.concat([u, b1], axis=0), temb)
    u = _decoder_attention(params, f"{prefix}.dec0", u, c_g, c_l.levels[0], c_l.grid)
    u = num.upsample2(u)
    u = _unet_block(params, f"{prefix}.out", num.concat([u, b0], axis=0), temb)
    return nn.conv_layer(params, f"{prefix}.conv_out", u, pad=1)


# ---------------------------------------------------------------------------
# sampling


def ddim_steps(T: int, steps: int) -> list[int]:
    """Monotone subsample of [1, T], ending at T."""
    if steps < 1 or steps > T:
        raise ContractError(f"need 1 <= steps <= T, got steps={steps}, T={T}")
    return [T * (i + 1) // steps for i in range(steps)]


def ddim_sample(eps_fn: Callable[[np.ndarray, int], np.ndarray], agnostic: np.ndarray,
                mask: np.ndarray, sched: NoiseSchedule, steps: int, seed: int) -> Tensor:
    """Deterministic DDIM trajectory with per-step re-imposition of known content.

    ``eps_fn(z_t, t)`` assembles the spatial input for the current latent and
    returns the predicted noise; conditions are baked into the closure.
    ``mask`` is 1 where content is generated; elsewhere the (noised) agnostic
    content is re-imposed every step and the clean agnostic pixels are written
    back exactly at the end. The result is clamped to [-1, 1].
    """
    agnostic = np.asarray(agnostic, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != agnostic.shape[1:]:
        raise ContractError(f"mask shape {mask.shape} != image grid {agnostic.shape[1:]}")
    schedule = ddim_steps(sched.T, steps)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(agnostic.shape)
    keep = mask < 0.5
    for idx in range(len(schedule) - 1, -1, -1):
        t = schedule[idx]
        ab = sched.alpha_bar(t)
        known = math.sqrt(ab) * agnostic + math.sqrt(1.0 - ab) * rng.standard_normal(agnostic.shape)
        z = mask * z + (1.0 - mask) * known
        eps_hat = eps_fn(z, t)
        x0 = np.clip((z - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab), -1.0, 1.0)
        ab_prev = sched.alpha_bar(schedule[idx - 1]) if idx > 0 else 1.0
        z = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps_hat
    out = np.clip(z, -1.0, 1.0)
    out[:, keep] = agnostic[:, keep]
    return Tensor(out)


def paste_prewarp(agnostic: Tensor, mask: np.ndarray, garments: GarmentPair,
                  choice: ViewChoice) -> Tensor:
    """Affine-fit the selected garment to the mask bounding box and paste it.

    The garment frame is scaled and translated onto the tight bounding box of
    the mask, then written only where the mask is set; everything outside the
    mask keeps the agnostic content.
    """
    mask = np.asarray(mask, dtype=np.float64) > 0.5
    if not mask.any():
        raise ContractError("cannot paste into an empty mask")
    if mask.shape != agnostic.shape[1:]:
        raise ContractError(f"mask shape {mask.shape} != agnostic grid {agnostic.shape[1:]}")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    garment = garments.image(choice)
    fitted = num.bilinear_resize(garment.detach(), (r1 - r0 + 1, c1 - c0 + 1)).data
    out = agnostic.data.copy()
    sub = mask[r0:r1 + 1, c0:c1 + 1]
    region = out[:, r0:r1 + 1, c0:c1 + 1]
    region[:, sub] = fitted[:, sub]
    return Tensor(out)


# ---------------------------------------------------------------------------
# assembled model


def tryon_model_spec(cfg: BackboneConfig) -> list[ParamSpec]:
    specs = pose_encoder_spec(cfg.d_p)
    specs += global_encoder_spec(cfg.d_g, widths=cfg.global_widths)
    specs += local_encoder_spec(cfg.local_widths)
    for i, d_c in enumerate(cfg.local_widths):
        specs += soft_selection_spec(f"soft{i}", d_c, cfg.d_p, d_c)
    specs += backbone_spec(cfg)
    return specs


@dataclass
class TryOnModel:
    """Trained parameters plus the wiring from samples to generated images."""

    cfg: BackboneConfig
    params: ParamStore
    sched: NoiseSchedule
    use_hard: bool = True
    use_soft: bool = True

    @classmethod
    def create(cls, cfg: BackboneConfig, seed: int, use_hard: bool = True,
               use_soft: bool = True) -> "TryOnModel":
        params = nn.init_params(tryon_model_spec(cfg), seed)
        return cls(cfg=cfg, params=params, sched=cfg.schedule(),
                   use_hard=use_hard, use_soft=use_soft)

    def select_view(self, person_pose: PoseSkeleton) -> ViewChoice:
        """Hard selection with FRONT fallback; disabled selection is always FRONT."""
        if not self.use_hard:
            return ViewChoice.FRONT
        return hard_select_or_front(person_pose)

    def garment_conditions(self, garments: GarmentPair, person_pose: PoseSkeleton):
        """Encode garments and pose into the backbone's conditions.

        Returns (global condition, local conditions). Without hard selection
        the global condition is the stacked front+back token pair; without
        soft selection the local levels are plain front/back concatenations
        resampled onto the pose grid.
        """
        h, w = self.cfg.image_hw
        params = self.params
        emb_h = pose_encode(render_skeleton(person_pose, h, w), params)
        emb_f = pose_encode(render_skeleton(garments.front_pose, h, w), params)
        emb_b = pose_encode(render_skeleton(garments.back_pose, h, w), params)
        pyr_f = local_encode(garments.front_image, params)
        pyr_b = local_encode(garments.back_image, params)

        if self.use_hard:
            c_g = global_encode(garments.image(self.select_view(person_pose)), params)
        else:
            front = global_encode(garments.front_image, params).token
            back = global_encode(garments.back_image, params).token
            c_g = num.concat([front, back], axis=0)

        levels = []
        for i in range(self.cfg.scale_count):
            if self.use_soft:
                block = SoftSelectionBlock.from_store(params, f"soft{i}", scale=i)
                e_f = resample_embedding(emb_f, pyr_f.grids[i])
                e_b = resample_embedding(emb_b, pyr_b.grids[i])
                levels.append(soft_select(pyr_f.levels[i], pyr_b.levels[i],
                                          emb_h, e_f, e_b, block))
            else:
                c_f = resample_tokens(pyr_f.levels[i], pyr_f.grids[i], emb_h.grid)
                c_b = resample_tokens(pyr_b.levels[i], pyr_b.grids[i], emb_h.grid)
                levels.append(num.concat([c_f, c_b], axis=1))
        return c_g, LocalConditions(levels, emb_h.grid)

    def eps(self, inp: SpatialInput, t: int, c_g, c_l: LocalConditions) -> Tensor:
        return predict_noise(inp, t, c_g, c_l, self.params, self.cfg)

    def sample_tryon(self, item: TryOnSample, seed: int = 0, steps: int = 20) -> np.ndarray:
        """Full inference for one sample: select, paste, condition, DDIM."""
        choice = self.select_view(item.pose)
        pasted = paste_prewarp(Tensor(item.agnostic), item.mask, item.garments, choice)
        c_g, c_l = self.garment_conditions(item.garments, item.pose)
        mask_latent = Tensor(item.mask_latent.reshape(1, *item.mask_latent.shape))

        def eps_fn(z: np.ndarray, t: int) -> np.ndarray:
            inp = SpatialInput.assemble(Tensor(z), pasted, mask_latent)
            return self.eps(inp, t, c_g, c_l).data

        out = ddim_sample(eps_fn, item.agnostic, item.mask, self.sched, steps, seed)
        return out.data

    def render_tryon(self, sample: MvgSample, view: int, garments: GarmentPair,
                     seed: int = 0, steps: int = 20) -> np.ndarray:
        item = make_tryon_sample(sample, view, garments=garments)
        return self.sample_tryon(item, seed=seed, steps=steps)


__all__ = [
    "NoiseSchedule", "make_schedule", "forward_diffuse", "reconstruct_x0",
    "BackboneConfig", "SpatialInput", "LocalConditions",
    "backbone_spec", "sinusoidal_embedding", "predict_noise",
    "ddim_steps", "ddim_sample", "paste_prewarp",
    "tryon_model_spec", "TryOnModel",
]
