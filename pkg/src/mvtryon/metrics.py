"""Image-quality metrics and the paired/unpaired evaluation protocol.

All learned-feature metrics run on frozen seeded extractors, so every name
carries a ``_proxy`` suffix: the numbers are self-consistent within this
package but not comparable to published Inception/VGG-based scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conditioning import GarmentPair
from .data import MvgSample, VIEW_ANGLES
from .errors import ContractError, DimensionError
from .losses import PerceptualNet
from .numerics import Tensor


class FeatureExtractor:
    """Frozen seeded conv net mapping an image to a d_f-dim descriptor.

    Shares the PerceptualNet stem; the descriptor is the global average pool
    of the deepest tap.
    """

    def __init__(self, seed: int = 2024, widths: tuple[int, ...] = (8, 12, 16, 20, 24)):
        self.net = PerceptualNet(seed=seed, widths=widths)

    @property
    def d_f(self) -> int:
        return self.net.widths[-1]

    def taps(self, image: np.ndarray) -> list[np.ndarray]:
        return [t.data for t in self.net.taps(Tensor(np.asarray(image, dtype=np.float64)))]

    def features(self, image: np.ndarray) -> np.ndarray:
        return self.taps(image)[-1].mean(axis=(1, 2))

    def features_batch(self, images) -> np.ndarray:
        return np.stack([self.features(img) for img in images])


# ---------------------------------------------------------------------------
# SSIM


def _box_mean_valid(img: np.ndarray, k: int) -> np.ndarray:
    """Mean over every fully-contained k x k window (integral-image trick)."""
    padded = np.pad(img, ((1, 0), (1, 0)))
    c = padded.cumsum(axis=0).cumsum(axis=1)
    total = c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]
    return total / (k * k)


def ssim(x: np.ndarray, y: np.ndarray, window: int = 7, value_range: float = 2.0) -> float:
    """Windowed SSIM over the grayscale images, uniform window, valid positions.

    Inputs are (3, H, W) or (H, W) arrays sharing one nominal value range
    (2.0 for [-1, 1] images); channel images are averaged to grayscale first.
    Window statistics are population moments.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"ssim: shapes differ {x.shape} vs {y.shape}")
    if x.ndim == 3:
        x, y = x.mean(axis=0), y.mean(axis=0)
    if x.ndim != 2:
        raise ContractError(f"ssim expects images, got {x.shape}")
    if x.shape[0] < window or x.shape[1] < window:
        raise ContractError(f"image {x.shape} smaller than the {window}x{window} window")
    c1 = (0.01 * value_range) ** 2
    c2 = (0.03 * value_range) ** 2
    mx = _box_mean_valid(x, window)
    my = _box_mean_valid(y, window)
    var_x = _box_mean_valid(x * x, window) - mx * mx
    var_y = _box_mean_valid(y * y, window) - my * my
    cov = _box_mean_valid(x * y, window) - mx * my
    score = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (var_x + var_y + c2))
    return float(score.mean())


# ---------------------------------------------------------------------------
# LPIPS proxy


def lpips_proxy(x: np.ndarray, y: np.ndarray, fx: FeatureExtractor) -> float:
    """Mean over taps of the mean squared distance between unit-normalized features.

    Each spatial position's channel vector is L2-normalized before comparing,
    mirroring the perceptual-patch-similarity recipe on frozen features.
    """
    if np.asarray(x).shape != np.asarray(y).shape:
        raise DimensionError(f"lpips: shapes differ {np.shape(x)} vs {np.shape(y)}")
    dists = []
    for fa, fb in zip(fx.taps(x), fx.taps(y)):
        na = fa / np.sqrt((fa * fa).sum(axis=0, keepdims=True) + 1e-12)
        nb = fb / np.sqrt((fb * fb).sum(axis=0, keepdims=True) + 1e-12)
        dists.append(((na - nb) ** 2).mean())
    return float(np.mean(dists))


# ---------------------------------------------------------------------------
# Frechet distance proxy


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)) on feature rows.

    Covariances get a small ridge when a set is too small for full rank;
    negative eigenvalues from the symmetric square roots are clamped to zero.
    """
    feats_a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    feats_b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    d = feats_a.shape[1]
    if feats_b.shape[1] != d:
        raise DimensionError("feature dims differ between sets")
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    cov_a = np.cov(feats_a, rowvar=False) if feats_a.shape[0] > 1 else np.zeros((d, d))
    cov_b = np.cov(feats_b, rowvar=False) if feats_b.shape[0] > 1 else np.zeros((d, d))
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    for feats, cov in ((feats_a, cov_a), (feats_b, cov_b)):
        if feats.shape[0] < d + 1:
            cov += np.eye(d) * 1e-6 * (np.trace(cov) / d + 1.0)
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    inner = (inner + inner.T) / 2.0
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)).sum()
    dist = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(dist, 0.0)


def fid_proxy(set_a, set_b, fx: FeatureExtractor) -> float:
    if len(set_a) == 0 or len(set_b) == 0:
        raise ContractError("fid_proxy needs nonempty image sets")
    return frechet_distance(fx.features_batch(set_a), fx.features_batch(set_b))


# ---------------------------------------------------------------------------
# KID proxy


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(x . y / d + 1)^3 gram matrix between feature rows."""
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = x.shape[0], y.shape[0]
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sum_xx + sum_yy - 2.0 * kxy.mean())


def kid_proxy(set_a, set_b, fx: FeatureExtractor, n_subsets: int = 10,
              max_subset: int = 100, seed: int = 0) -> float:
    """Unbiased polynomial-kernel MMD^2 averaged over seeded subsets."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise ContractError("kid_proxy needs at least 2 images per set")
    fa = fx.features_batch(set_a)
    fb = fx.features_batch(set_b)
    m = min(max_subset, fa.shape[0], fb.shape[0])
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_subsets):
        ia = rng.choice(fa.shape[0], size=m, replace=False)
        ib = rng.choice(fb.shape[0], size=m, replace=False)
        vals.append(mmd2_unbiased(fa[ia], fb[ib]))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# evaluation protocol


def _item_seed(base: int, sample_idx: int, view: int) -> int:
    return int(np.random.SeedSequence((base, sample_idx, view)).generate_state(1)[0])


def evaluate(protocol: str, model, samples: list[MvgSample], *, seed: int = 0,
             steps: int = 20, fx: FeatureExtractor | None = None,
             views: tuple[int, ...] | None = None, max_samples: int | None = None) -> dict:
    """Run the paired or unpaired protocol over the dataset.

    ``model`` must expose ``render_tryon(sample, view, garments, seed, steps)``
    returning a (3, H, W) image. Paired keeps each sample's own garments and
    reports {lpips_proxy, ssim, fid_proxy, kid_proxy}; unpaired shuffles the
    garment pairs across identities with a recorded seed and reports
    {fid_u_proxy, kid_u_proxy} only.
    """
    if protocol not in ("paired", "unpaired"):
        raise ContractError(f"unknown protocol {protocol!r}")
    if not samples:
        raise ContractError("evaluate needs a nonempty dataset")
    fx = fx or FeatureExtractor()
    if max_samples is not None:
        samples = samples[:max_samples]
    view_ids = views if views is not None else tuple(range(len(VIEW_ANGLES)))

    if protocol == "unpaired":
        perm = np.random.default_rng(seed).permutation(len(samples))
        garments = [samples[j].garments for j in perm]
    else:
        garments = [s.garments for s in samples]

    outputs, truths = [], []
    ssim_vals, lpips_vals = [], []
    for i, sample in enumerate(samples):
        for v in view_ids:
            out = model.render_tryon(sample, v, garments[i],
                                     seed=_item_seed(seed, i, v), steps=steps)
            outputs.append(out)
            truths.append(sample.views[v])
            if protocol == "paired":
                ssim_vals.append(ssim(out, sample.views[v]))
                lpips_vals.append(lpips_proxy(out, sample.views[v], fx))

    if protocol == "paired":
        metrics = {
            "lpips_proxy": float(np.mean(lpips_vals)),
            "ssim": float(np.mean(ssim_vals)),
            "fid_proxy": fid_proxy(outputs, truths, fx),
            "kid_proxy": kid_proxy(outputs, truths, fx, seed=seed),
        }
        shuffle_seed = None
    else:
        metrics = {
            "fid_u_proxy": fid_proxy(outputs, truths, fx),
            "kid_u_proxy": kid_proxy(outputs, truths, fx, seed=seed),
        }
        shuffle_seed = seed

    return {
        "protocol": protocol,
        "metrics": metrics,
        "count": len(outputs),
        "shuffle_seed": shuffle_seed,
    }


def write_report(report: dict, out_prefix) -> tuple[Path, Path]:
    """Emit the report as flat key=value text plus machine-readable JSON."""
    out_prefix = Path(out_prefix)
    txt_path = out_prefix.with_suffix(".txt")
    json_path = out_prefix.with_suffix(".json")
    lines = [f"protocol={report['protocol']}", f"count={report['count']}"]
    if report.get("shuffle_seed") is not None:
        lines.append(f"shuffle_seed={report['shuffle_seed']}")
    for key, value in report["metrics"].items():
        lines.append(f"{key}={value:.8f}")
    txt_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    json_path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return txt_path, json_path


__all__ = [
    "FeatureExtractor", "ssim", "lpips_proxy",
    "frechet_distance", "fid_proxy",
    "polynomial_kernel", "mmd2_unbiased", "kid_proxy",
    "evaluate", "write_report",
]
