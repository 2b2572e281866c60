"""Desk-scale multi-view virtual try-on.

Library layout mirrors the pipeline: ``numerics`` (autodiff tensors),
``nn`` (layers/checkpoints), ``pose`` (skeletons, hard selection),
``conditioning`` (garment encoders, soft selection, joint attention),
``diffusion`` (schedule, backbone, sampler), ``losses``, ``data``
(dataset + synthetic generator), ``metrics``, and ``cli``.
"""

from .numerics import Tensor, Tape, backward
from .nn import ParamSpec, ParamStore, init_params, save_checkpoint, load_checkpoint
from .pose import PoseSkeleton, ViewChoice, hard_select, render_skeleton
from .conditioning import GarmentPair, soft_select, joint_attention
from .data import MvgSample, TryOnSample, make_agnostic, synth_generate, load_dataset
from .diffusion import (
    BackboneConfig,
    NoiseSchedule,
    TryOnModel,
    ddim_sample,
    forward_diffuse,
    make_schedule,
    predict_noise,
    reconstruct_x0,
)
from .losses import LossWeights, PerceptualNet, l1_loss, ldm_loss, perceptual_loss, total_loss
from .metrics import FeatureExtractor, evaluate, fid_proxy, kid_proxy, lpips_proxy, ssim

__version__ = "0.1.0"
