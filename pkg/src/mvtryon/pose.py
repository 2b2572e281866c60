"""Skeleton handling: rasterization, the pose encoder, and view hard-selection."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import numerics as num
from . import nn
from .errors import ContractError, FormatError, SelectionError
from .nn import ParamSpec, ParamStore
from .numerics import Tensor

N_KEYPOINTS = 18

# COCO-18 order as produced by common 2-d keypoint detectors.
KEYPOINT_NAMES = [
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
]

RIGHT_ARM = (2, 3, 4)
LEFT_ARM = (5, 6, 7)

# joint-index pairs drawn as limbs, each with a fixed color
LIMBS = [
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10), (1, 11), (11, 12), (12, 13),
    (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
]

LIMB_COLORS = np.array([
    (1.00, 0.00, 0.00), (1.00, 0.33, 0.00), (1.00, 0.66, 0.00),
    (1.00, 1.00, 0.00), (0.66, 1.00, 0.00), (0.33, 1.00, 0.00),
    (0.00, 1.00, 0.00), (0.00, 1.00, 0.33), (0.00, 1.00, 0.66),
    (0.00, 1.00, 1.00), (0.00, 0.66, 1.00), (0.00, 0.33, 1.00),
    (0.00, 0.00, 1.00), (0.33, 0.00, 1.00), (0.66, 0.00, 1.00),
    (1.00, 0.00, 1.00), (1.00, 0.00, 0.66),
])

# left/right joint pairs swapped when a skeleton is mirrored
_MIRROR_PAIRS = [(2, 5), (3, 6), (4, 7), (8, 11), (9, 12), (10, 13), (14, 15), (16, 17)]


class ViewChoice(Enum):
    FRONT = "front"
    BACK = "back"


@dataclass
class PoseSkeleton:
    """18 keypoints as (x, y, confidence) rows, all clamped into [0, 1].

    Confidence 0 marks a missing joint; its coordinates are ignored.
    """

    keypoints: np.ndarray

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64)
        if kp.shape != (N_KEYPOINTS, 3):
            raise FormatError(f"skeleton needs {N_KEYPOINTS} (x, y, conf) rows, got {kp.shape}")
        self.keypoints = np.clip(kp, 0.0, 1.0)

    def visible(self, idx: int) -> bool:
        return self.keypoints[idx, 2] > 0.0

    def mirrored(self) -> "PoseSkeleton":
        """Mirror-image relabeling: flip x -> 1-x and swap left/right labels.

        This is what a keypoint detector would report on a flipped photo;
        the label swap cancels the coordinate flip for arm-order tests, so
        hard selection is invariant under it.
        """
        kp = self.keypoints.copy()
        kp[:, 0] = 1.0 - kp[:, 0]
        for a, b in _MIRROR_PAIRS:
            kp[[a, b]] = kp[[b, a]]
        return PoseSkeleton(kp)

    def turned_around(self) -> "PoseSkeleton":
        """Flip x -> 1-x keeping joint labels: the same pose seen from behind.

        Swaps the left/right arm order in the image, so it flips hard
        selection for any non-tied skeleton.
        """
        kp = self.keypoints.copy()
        kp[:, 0] = 1.0 - kp[:, 0]
        return PoseSkeleton(kp)

    def translated(self, dx: float, dy: float = 0.0) -> "PoseSkeleton":
        kp = self.keypoints.copy()
        kp[:, 0] += dx
        kp[:, 1] += dy
        return PoseSkeleton(kp)

    def to_record(self) -> dict:
        return {"keypoints": [[float(v) for v in row] for row in self.keypoints]}

    @classmethod
    def from_record(cls, record: dict) -> "PoseSkeleton":
        if not isinstance(record, dict) or "keypoints" not in record:
            raise FormatError("pose record must be an object with a 'keypoints' field")
        return cls(np.asarray(record["keypoints"], dtype=np.float64))


def write_pose_jsonl(skeletons: list[PoseSkeleton], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in skeletons:
            fh.write(json.dumps(s.to_record()) + "\n")


def read_pose_jsonl(path) -> list[PoseSkeleton]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"bad JSON in {path}: {exc}") from exc
            out.append(PoseSkeleton.from_record(record))
    return out


# ---------------------------------------------------------------------------
# rasterization


def render_skeleton(skel: PoseSkeleton, height: int, width: int) -> Tensor:
    """Draw the skeleton's limbs as anti-aliased colored segments.

    Returns a 3 x H x W raster in [0, 1] with zero background. Pixel
    intensity falls off linearly with distance from the limb segment and
    is zero beyond one pixel. Limbs touching a confidence-0 joint are
    skipped entirely.
    """
    if height < 8 or width < 8 or height % 8 or width % 8:
        raise ContractError(f"raster dims must be >= 8 and divisible by 8, got {height}x{width}")
    img = np.zeros((3, height, width), dtype=np.float64)
    kp = skel.keypoints
    for limb_idx, (a, b) in enumerate(LIMBS):
        if kp[a, 2] <= 0.0 or kp[b, 2] <= 0.0:
            continue
        ax, ay = kp[a, 0] * (width - 1), kp[a, 1] * (height - 1)
        bx, by = kp[b, 0] * (width - 1), kp[b, 1] * (height - 1)
        r0 = max(0, int(np.floor(min(ay, by))) - 1)
        r1 = min(height - 1, int(np.ceil(max(ay, by))) + 1)
        c0 = max(0, int(np.floor(min(ax, bx))) - 1)
        c1 = min(width - 1, int(np.ceil(max(ax, bx))) + 1)
        ys, xs = np.mgrid[r0:r1 + 1, c0:c1 + 1]
        dx, dy = bx - ax, by - ay
        seg_len2 = dx * dx + dy * dy
        if seg_len2 < 1e-12:
            dist = np.hypot(xs - ax, ys - ay)
        else:
            t = np.clip(((xs - ax) * dx + (ys - ay) * dy) / seg_len2, 0.0, 1.0)
            dist = np.hypot(xs - (ax + t * dx), ys - (ay + t * dy))
        coverage = np.clip(1.0 - dist, 0.0, 1.0)
        color = LIMB_COLORS[limb_idx]
        for ch in range(3):
            patch = img[ch, r0:r1 + 1, c0:c1 + 1]
            np.maximum(patch, coverage * color[ch], out=patch)
    return Tensor(img)


# ---------------------------------------------------------------------------
# pose encoder


@dataclass
class PoseEmbedding:
    """Token grid produced by the pose encoder: (n_p, d_p) over an (h, w) grid."""

    tokens: Tensor
    grid: tuple[int, int]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


def pose_encoder_spec(d_p: int, prefix: str = "pose_enc") -> list[ParamSpec]:
    specs: list[ParamSpec] = []
    in_ch = 3
    for i in range(3):
        specs += nn.conv_spec(f"{prefix}.conv{i}", d_p, in_ch)
        in_ch = d_p
    specs += nn.layernorm_spec(f"{prefix}.ln", d_p)
    return specs


def pose_encode(raster: Tensor, params: ParamStore, prefix: str = "pose_enc") -> PoseEmbedding:
    """Three (conv3x3, GELU, 2x average-pool) blocks then channel layernorm.

    The H x W raster becomes (H/8)*(W/8) tokens of width d_p.
    """
    if raster.ndim != 3 or raster.shape[0] != 3:
        raise ContractError(f"pose raster must be 3 x H x W, got {raster.shape}")
    d_p = params[f"{prefix}.conv0.w"].shape[0]
    for i in range(3):
        w = params[f"{prefix}.conv{i}.w"]
        expect_in = 3 if i == 0 else d_p
        if w.shape[1] != expect_in or w.shape[0] != d_p:
            raise ContractError(f"pose encoder conv{i} weight shape {w.shape} inconsistent")
    x = raster
    for i in range(3):
        x = nn.conv_layer(params, f"{prefix}.conv{i}", x, pad=1)
        x = num.gelu(x)
        x = num.avg_pool2d(x, 2)
    c, h, w = x.shape
    tokens = num.transpose(num.reshape(x, (c, h * w)))
    tokens = num.layernorm(tokens, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
    return PoseEmbedding(tokens, (h, w))


# ---------------------------------------------------------------------------
# hard selection


def _arm_mean_x(skel: PoseSkeleton, joints: tuple[int, ...]) -> float | None:
    kp = skel.keypoints
    xs = [kp[j, 0] for j in joints if kp[j, 2] > 0.0]
    if not xs:
        return None
    return float(np.mean(xs))


def hard_select(p_h: PoseSkeleton) -> ViewChoice:
    """Pick the garment view whose pose matches the person's skeleton.

    The person faces the camera when their right arm sits left of their left
    arm in image coordinates, so: mean x of visible right-arm joints strictly
    greater than the left-arm mean selects BACK, anything else (including the
    exact tie) selects FRONT.
    """
    right = _arm_mean_x(p_h, RIGHT_ARM)
    left = _arm_mean_x(p_h, LEFT_ARM)
    if right is None or left is None:
        missing = "right" if right is None else "left"
        raise SelectionError(f"cannot hard-select: {missing} arm has no visible joints")
    return ViewChoice.BACK if right > left else ViewChoice.FRONT


def hard_select_or_front(p_h: PoseSkeleton) -> ViewChoice:
    """hard_select with the documented FRONT fallback for unusable skeletons."""
    try:
        return hard_select(p_h)
    except SelectionError:
        return ViewChoice.FRONT


__all__ = [
    "N_KEYPOINTS", "KEYPOINT_NAMES", "LIMBS", "LIMB_COLORS", "RIGHT_ARM", "LEFT_ARM",
    "ViewChoice", "PoseSkeleton", "PoseEmbedding",
    "write_pose_jsonl", "read_pose_jsonl",
    "render_skeleton", "pose_encoder_spec", "pose_encode",
    "hard_select", "hard_select_or_front",
]
