"""Training losses: noise-prediction MSE, pixel L1, perceptual proxy, and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as num
from .errors import ContractError, DimensionError
from .numerics import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_1: float = 0.1
    lambda_perc: float = 1e-4

    def __post_init__(self):
        if self.lambda_1 < 0 or self.lambda_perc < 0:
            raise ContractError("loss weights must be nonnegative")


def ldm_loss(eps: Tensor, eps_hat: Tensor) -> Tensor:
    """Mean squared error between true and predicted noise."""
    if eps.shape != eps_hat.shape:
        raise DimensionError(f"noise shapes differ: {eps.shape} vs {eps_hat.shape}")
    return num.tmean(num.square(num.sub(eps, eps_hat)))


def l1_loss(x_hat: Tensor, x: Tensor) -> Tensor:
    """Mean absolute error between reconstruction and target."""
    if x.shape != x_hat.shape:
        raise DimensionError(f"image shapes differ: {x_hat.shape} vs {x.shape}")
    return num.tmean(num.absolute(num.sub(x_hat, x)))


class PerceptualNet:
    """Five frozen (conv, GELU, pool) stages with a tap after each stage.

    Weights are drawn once from the seed and never receive gradients; the
    taps are an accepted random-feature stand-in for pretrained perceptual
    features, and the stem is shared with the metrics feature extractor.
    """

    N_STAGES = 5

    def __init__(self, seed: int = 2024, widths: tuple[int, ...] = (8, 12, 16, 20, 24),
                 in_channels: int = 3):
        if len(widths) != self.N_STAGES:
            raise ContractError(f"need {self.N_STAGES} stage widths, got {len(widths)}")
        self.seed = seed
        self.widths = tuple(widths)
        rng = np.random.default_rng(seed)
        self.kernels: list[Tensor] = []
        c_in = in_channels
        for w in widths:
            bound = 1.0 / np.sqrt(c_in * 9)
            self.kernels.append(Tensor(rng.uniform(-bound, bound, size=(w, c_in, 3, 3))))
            c_in = w

    def taps(self, image: Tensor) -> list[Tensor]:
        """Feature maps after each stage; image dims must survive 5 halvings."""
        if image.ndim != 3:
            raise ContractError(f"perceptual input must be C x H x W, got {image.shape}")
        h, w = image.shape[1], image.shape[2]
        for _ in range(self.N_STAGES):
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ContractError(
                    f"image {image.shape} too small for {self.N_STAGES} poolings")
        x = image
        outs = []
        for kernel in self.kernels:
            x = num.conv2d(x, kernel, pad=1)
            x = num.gelu(x)
            x = num.avg_pool2d(x, 2)
            outs.append(x)
        return outs


def perceptual_loss(x_hat: Tensor, x: Tensor, net: PerceptualNet) -> Tensor:
    """Sum over the five taps of the mean absolute feature difference."""
    if x.shape != x_hat.shape:
        raise DimensionError(f"image shapes differ: {x_hat.shape} vs {x.shape}")
    taps_hat = net.taps(x_hat)
    taps_ref = net.taps(x)
    total = None
    for a, b in zip(taps_hat, taps_ref):
        term = num.tmean(num.absolute(num.sub(a, b)))
        total = term if total is None else num.add(total, term)
    return total


def total_loss(l_ldm: Tensor, l_1: Tensor, l_perc: Tensor, w: LossWeights) -> Tensor:
    """l_ldm + lambda_1 * l_1 + lambda_perc * l_perc."""
    weighted = num.add(num.scale(l_1, w.lambda_1), num.scale(l_perc, w.lambda_perc))
    return num.add(l_ldm, weighted)


__all__ = ["LossWeights", "ldm_loss", "l1_loss", "PerceptualNet", "perceptual_loss", "total_loss"]
