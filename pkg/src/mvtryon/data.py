"""Dataset layout, agnostic-image synthesis, and the procedural sample generator.

On-disk layout, one directory per identity::

    root/<id>/view_{0,45,90,135,180}.png      person images, RGB
    root/<id>/parse_{0,45,90,135,180}.png     parsing label rasters, 8-bit
    root/<id>/pose_{0,45,90,135,180}.jsonl    person skeleton, one record
    root/<id>/garment_front.png               frontal garment product shot
    root/<id>/garment_back.png                back garment product shot
    root/<id>/pose_garment_front.jsonl        garment skeletons, one record each
    root/<id>/pose_garment_back.jsonl

Pose records are JSON objects ``{"keypoints": [[x, y, conf] * 18]}`` in the
COCO-18 order documented in :mod:`mvtryon.pose`. Images are 8-bit PNG mapped
linearly from [-1, 1]. Unknown extra files (e.g. dense-label maps) are
ignored. Parsing labels:

    0 background, 1 hair, 2 face, 3 upper-garment, 4 left-arm,
    5 right-arm, 6 lower-body
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .conditioning import GarmentPair
from .errors import ContractError, FormatError
from .numerics import Tensor
from .pose import PoseSkeleton, read_pose_jsonl, write_pose_jsonl

log = logging.getLogger(__name__)

VIEW_ANGLES = (0, 45, 90, 135, 180)

LABEL_BACKGROUND = 0
LABEL_HAIR = 1
LABEL_FACE = 2
LABEL_UPPER_GARMENT = 3
LABEL_LEFT_ARM = 4
LABEL_RIGHT_ARM = 5
LABEL_LOWER_BODY = 6
KNOWN_LABELS = frozenset(range(7))

MASK_LABELS = (LABEL_UPPER_GARMENT, LABEL_LEFT_ARM, LABEL_RIGHT_ARM)


# ---------------------------------------------------------------------------
# image io


def save_image(path, img: np.ndarray) -> None:
    """Write a 3 x H x W image in [-1, 1] as 8-bit RGB PNG."""
    arr = np.clip((np.asarray(img) + 1.0) * 127.5, 0.0, 255.0)
    Image.fromarray(np.round(arr).astype(np.uint8).transpose(1, 2, 0)).save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 127.5 - 1.0


def save_parsing(path, parsing: np.ndarray) -> None:
    Image.fromarray(np.asarray(parsing, dtype=np.uint8), mode="L").save(path)


def load_parsing(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.int64)


# ---------------------------------------------------------------------------
# sample containers


@dataclass
class MvgSample:
    """One identity: five posed views with parsing maps plus its garment pair."""

    identity: str
    views: list[np.ndarray]
    parsings: list[np.ndarray]
    poses: list[PoseSkeleton]
    garments: GarmentPair

    def __post_init__(self):
        if not (len(self.views) == len(self.parsings) == len(self.poses) == len(VIEW_ANGLES)):
            raise FormatError(f"sample {self.identity!r} must carry exactly "
                              f"{len(VIEW_ANGLES)} views")


@dataclass
class TryOnSample:
    """The unit of training/evaluation: one person view plus its garments."""

    x: np.ndarray            # person image, 3 x H x W in [-1, 1]
    mask: np.ndarray         # inpainting mask M, H x W in {0, 1}
    agnostic: np.ndarray     # x with the masked region filled neutral
    mask_latent: np.ndarray  # M area-averaged onto the latent grid
    pose: PoseSkeleton
    garments: GarmentPair

    @property
    def z0(self) -> np.ndarray:
        # identity latent codec: the target latent is the image itself
        return self.x


# ---------------------------------------------------------------------------
# agnostic synthesis


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy * yy + xx * xx) <= r * r


def downsample_mask(mask: np.ndarray, latent_hw: tuple[int, int]) -> np.ndarray:
    """Area-average a mask onto an integer-divisor grid (mass preserving)."""
    h, w = mask.shape
    lh, lw = latent_hw
    if lh < 1 or lw < 1 or h % lh or w % lw:
        raise ContractError(f"latent grid {latent_hw} must divide mask grid {mask.shape}")
    fh, fw = h // lh, w // lw
    return np.asarray(mask, dtype=np.float64).reshape(lh, fh, lw, fw).mean(axis=(1, 3))


def make_agnostic(x: np.ndarray, parsing: np.ndarray, dilate_radius: int = 2,
                  latent_hw: tuple[int, int] | None = None):
    """Build (M, a, m): dilated garment+arm mask, neutral-filled image, latent mask."""
    if parsing.shape != x.shape[1:]:
        raise ContractError(f"parsing grid {parsing.shape} != image grid {x.shape[1:]}")
    labels = set(np.unique(parsing).tolist())
    unknown = labels - KNOWN_LABELS
    if unknown:
        raise FormatError(f"unknown parsing label ids {sorted(unknown)}")
    region = np.isin(parsing, MASK_LABELS)
    if dilate_radius > 0 and region.any():
        region = ndimage.binary_dilation(region, structure=_disk(dilate_radius))
    mask = region.astype(np.float64)
    agnostic = np.array(x, dtype=np.float64, copy=True)
    agnostic[:, region] = 0.0
    m = downsample_mask(mask, latent_hw or mask.shape)
    return mask, agnostic, m


def make_tryon_sample(sample: MvgSample, view: int,
                      garments: GarmentPair | None = None) -> TryOnSample:
    x = sample.views[view]
    mask, agnostic, m = make_agnostic(x, sample.parsings[view])
    return TryOnSample(x=x, mask=mask, agnostic=agnostic, mask_latent=m,
                       pose=sample.poses[view], garments=garments or sample.garments)


# ---------------------------------------------------------------------------
# disk round trip


def save_dataset(samples: list[MvgSample], root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        d = root / s.identity
        d.mkdir(parents=True, exist_ok=True)
        for angle, view, parsing, skel in zip(VIEW_ANGLES, s.views, s.parsings, s.poses):
            save_image(d / f"view_{angle}.png", view)
            save_parsing(d / f"parse_{angle}.png", parsing)
            write_pose_jsonl([skel], d / f"pose_{angle}.jsonl")
        save_image(d / "garment_front.png", s.garments.front_image.data)
        save_image(d / "garment_back.png", s.garments.back_image.data)
        write_pose_jsonl([s.garments.front_pose], d / "pose_garment_front.jsonl")
        write_pose_jsonl([s.garments.back_pose], d / "pose_garment_back.jsonl")


def _required_files(d: Path) -> list[Path]:
    names = []
    for angle in VIEW_ANGLES:
        names += [f"view_{angle}.png", f"parse_{angle}.png", f"pose_{angle}.jsonl"]
    names += ["garment_front.png", "garment_back.png",
              "pose_garment_front.jsonl", "pose_garment_back.jsonl"]
    return [d / n for n in names]


def _read_single_pose(path: Path) -> PoseSkeleton:
    poses = read_pose_jsonl(path)
    if len(poses) != 1:
        raise FormatError(f"{path} must hold exactly one pose record, found {len(poses)}")
    return poses[0]


def load_dataset(root) -> list[MvgSample]:
    """Parse every complete sample directory under ``root``.

    Samples with missing files are skipped with a warning; malformed pose
    records raise FormatError. Images come back normalized to [-1, 1].
    """
    root = Path(root)
    samples: list[MvgSample] = []
    if not root.exists():
        raise ContractError(f"dataset root {root} does not exist")
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        missing = [p.name for p in _required_files(d) if not p.exists()]
        if missing:
            log.warning("skipping sample %s: missing %s", d.name, ", ".join(missing))
            continue
        views = [load_image(d / f"view_{a}.png") for a in VIEW_ANGLES]
        parsings = [load_parsing(d / f"parse_{a}.png") for a in VIEW_ANGLES]
        poses = [_read_single_pose(d / f"pose_{a}.jsonl") for a in VIEW_ANGLES]
        garments = GarmentPair(
            front_image=Tensor(load_image(d / "garment_front.png")),
            back_image=Tensor(load_image(d / "garment_back.png")),
            front_pose=_read_single_pose(d / "pose_garment_front.jsonl"),
            back_pose=_read_single_pose(d / "pose_garment_back.jsonl"),
        )
        samples.append(MvgSample(identity=d.name, views=views, parsings=parsings,
                                 poses=poses, garments=garments))
    log.info("loaded %d samples from %s", len(samples), root)
    return samples


# ---------------------------------------------------------------------------
# procedural generator
#
# A person is a textured cylinder torso plus arm/leg/head primitives viewed
# orthographically at the five standard angles. The garment texture wraps the
# cylinder: body azimuths within +-90 degrees of the front center show the
# frontal pattern, the rest show the back pattern, so intermediate views
# expose a mix of both faces.

_FRONT_PALETTE = [
    ((0.90, 0.10, 0.10), (0.97, 0.97, 0.97)),
    ((0.10, 0.35, 0.90), (0.95, 0.85, 0.15)),
    ((0.05, 0.65, 0.30), (0.98, 0.98, 0.98)),
    ((0.95, 0.55, 0.05), (0.10, 0.10, 0.12)),
]
_BACK_PALETTE = [
    ((0.55, 0.10, 0.60), (0.95, 0.95, 0.30)),
    ((0.05, 0.08, 0.45), (0.60, 0.90, 0.95)),
    ((0.50, 0.30, 0.08), (0.92, 0.88, 0.60)),
    ((0.08, 0.55, 0.55), (0.95, 0.60, 0.75)),
]
_TEX_CELLS = 24  # texture resolution the stripe indices are computed in


def _to_signed(color) -> np.ndarray:
    return np.asarray(color, dtype=np.float64) * 2.0 - 1.0


@dataclass
class _Appearance:
    torso_halfwidth: float
    skin: np.ndarray
    hair: np.ndarray
    pants: np.ndarray
    background: np.ndarray
    front_colors: tuple[np.ndarray, np.ndarray]
    back_colors: tuple[np.ndarray, np.ndarray]
    front_accent: np.ndarray
    back_accent: np.ndarray
    front_period: int
    back_period: int

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "_Appearance":
        fa, fb = _FRONT_PALETTE[int(rng.integers(len(_FRONT_PALETTE)))]
        ba, bb = _BACK_PALETTE[int(rng.integers(len(_BACK_PALETTE)))]
        return cls(
            torso_halfwidth=float(rng.uniform(0.15, 0.19)),
            skin=_to_signed((0.88, 0.72, 0.60)) + rng.uniform(-0.05, 0.05, 3),
            hair=_to_signed((0.15, 0.10, 0.05)) + rng.uniform(-0.05, 0.05, 3),
            pants=_to_signed((0.20, 0.20, 0.30)) + rng.uniform(-0.05, 0.05, 3),
            background=_to_signed((0.10, 0.10, 0.10)),
            front_colors=(_to_signed(fa), _to_signed(fb)),
            back_colors=(_to_signed(ba), _to_signed(bb)),
            front_accent=_to_signed((1.0, 1.0, 1.0)) if rng.random() < 0.5
            else _to_signed((0.0, 0.0, 0.0)),
            back_accent=_to_signed((0.9, 0.9, 0.9)),
            front_period=int(rng.integers(3, 6)),
            back_period=int(rng.integers(3, 6)),
        )

    def front_pattern(self, s: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Horizontal stripes plus a vertical accent band; s, y in [-1,1]x[0,1]."""
        band = (np.floor(y * _TEX_CELLS / self.front_period).astype(int) % 2).astype(bool)
        out = np.where(band[None], self.front_colors[0][:, None], self.front_colors[1][:, None])
        accent = np.abs(s) < 0.18
        out = np.where(accent[None], self.front_accent[:, None], out)
        return out

    def back_pattern(self, s: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Vertical stripes plus a horizontal accent band."""
        cols = (s + 1.0) / 2.0 * _TEX_CELLS
        band = (np.floor(cols / self.back_period).astype(int) % 2).astype(bool)
        out = np.where(band[None], self.back_colors[0][:, None], self.back_colors[1][:, None])
        accent = np.abs(y - 0.5) < 0.06
        out = np.where(accent[None], self.back_accent[:, None], out)
        return out


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return (a + np.pi) % (2.0 * np.pi) - np.pi


_TORSO_TOP, _TORSO_BOT = 0.30, 0.62
_ARM_BOT = 0.58


def _synth_skeleton(theta_deg: float, app: _Appearance) -> PoseSkeleton:
    th = math.radians(theta_deg)
    c = math.cos(th)
    r_sh = app.torso_halfwidth + 0.02
    r_hip = 0.6 * app.torso_halfwidth
    kp = np.zeros((18, 3))
    kp[:, 2] = 1.0
    nose_x = 0.5 + 0.05 * math.sin(th) * (1 if theta_deg <= 90 else -1)
    kp[0] = (nose_x, 0.17, 1.0)                      # nose
    kp[1] = (0.5, 0.28, 1.0)                         # neck
    for sign, sh, el, wr, hip, knee, ank in ((-1, 2, 3, 4, 8, 9, 10), (+1, 5, 6, 7, 11, 12, 13)):
        x_arm = 0.5 + sign * r_sh * c
        kp[sh] = (x_arm, _TORSO_TOP, 1.0)
        kp[el] = (x_arm + sign * 0.01 * c, 0.45, 1.0)
        kp[wr] = (x_arm + sign * 0.02 * c, _ARM_BOT, 1.0)
        kp[hip] = (0.5 + sign * r_hip * c, _TORSO_BOT, 1.0)
        kp[knee] = (0.5 + sign * r_hip * c, 0.78, 1.0)
        kp[ank] = (0.5 + sign * r_hip * c, 0.93, 1.0)
    eye_conf = 1.0 if theta_deg <= 90 else 0.0       # eyes hidden from behind
    kp[14] = (nose_x - 0.02, 0.155, eye_conf)
    kp[15] = (nose_x + 0.02, 0.155, eye_conf)
    kp[16] = (0.5 - 0.045, 0.165, 1.0)
    kp[17] = (0.5 + 0.045, 0.165, 1.0)
    return PoseSkeleton(kp)


def _render_view(theta_deg: float, app: _Appearance, hw_px: tuple[int, int]):
    h, w = hw_px
    yy = (np.arange(h) + 0.5) / h
    xx = (np.arange(w) + 0.5) / w
    X, Y = np.meshgrid(xx, yy)
    img = np.tile(app.background[:, None, None], (1, h, w))
    parsing = np.full((h, w), LABEL_BACKGROUND, dtype=np.int64)

    def paint(mask, color, label):
        img[:, mask] = np.broadcast_to(np.asarray(color, dtype=np.float64).reshape(3, -1),
                                       (3, int(mask.sum())))
        parsing[mask] = label

    th = math.radians(theta_deg)

    # legs
    legs = (np.abs(X - 0.5) <= 0.10) & (np.abs(X - 0.5) >= 0.015) & (Y > _TORSO_BOT) & (Y <= 0.95)
    paint(legs, app.pants[:, None], LABEL_LOWER_BODY)

    # torso with wrapped garment texture
    halfw = app.torso_halfwidth * (0.30 + 0.70 * abs(math.cos(th)))
    torso = (Y >= _TORSO_TOP) & (Y <= _TORSO_BOT) & (np.abs(X - 0.5) <= halfw)
    if torso.any():
        u = np.clip((X[torso] - 0.5) / halfw, -1.0, 1.0)
        psi = _wrap_angle(th + np.arcsin(u))
        y_norm = (Y[torso] - _TORSO_TOP) / (_TORSO_BOT - _TORSO_TOP)
        front_face = np.abs(psi) < np.pi / 2
        colors = np.empty((3, psi.shape[0]))
        if front_face.any():
            s = psi[front_face] / (np.pi / 2)
            colors[:, front_face] = app.front_pattern(s, y_norm[front_face])
        if (~front_face).any():
            s = _wrap_angle(psi[~front_face] - np.pi) / (np.pi / 2)
            colors[:, ~front_face] = app.back_pattern(s, y_norm[~front_face])
        img[:, torso] = colors
        parsing[torso] = LABEL_UPPER_GARMENT

    # arms drawn over the torso; left/right labels follow the person, not the screen
    r_arm = app.torso_halfwidth + 0.02
    c = math.cos(th)
    for sign, label in ((-1, LABEL_RIGHT_ARM), (+1, LABEL_LEFT_ARM)):
        x_arm = 0.5 + sign * r_arm * c
        arm = (np.abs(X - x_arm) <= 0.022) & (Y >= _TORSO_TOP) & (Y <= _ARM_BOT)
        paint(arm, app.skin[:, None], label)

    # head: face plus view-dependent hair coverage
    cx = 0.5 + 0.04 * math.sin(th) * (1 if theta_deg <= 90 else -1)
    cy, radius = 0.17, 0.075
    head = (X - cx) ** 2 + ((Y - cy) * (h / w)) ** 2 <= radius ** 2
    paint(head, app.skin[:, None], LABEL_FACE)
    hair_frac = {0: 0.45, 45: 0.5, 90: 0.65, 135: 1.0, 180: 1.0}[int(theta_deg)]
    hair = head & (Y <= cy - radius + 2 * radius * hair_frac)
    paint(hair, app.hair[:, None], LABEL_HAIR)

    return img, parsing


def _render_garment(app: _Appearance, hw_px: tuple[int, int], face: str) -> np.ndarray:
    h, w = hw_px
    img = np.tile(_to_signed((0.85, 0.85, 0.85))[:, None, None], (1, h, w))
    r0, r1 = int(0.12 * h), int(0.92 * h)
    c0, c1 = int(0.15 * w), int(0.85 * w)
    rows = np.arange(r0, r1)
    cols = np.arange(c0, c1)
    C, R = np.meshgrid(cols, rows)
    s = 2.0 * (C - c0) / max(1, (c1 - 1 - c0)) - 1.0
    y = (R - r0) / max(1, (r1 - 1 - r0))
    pattern = app.front_pattern if face == "front" else app.back_pattern
    img[:, r0:r1, c0:c1] = pattern(s.ravel(), y.ravel()).reshape(3, r1 - r0, c1 - c0)
    return img


def synth_generate(seed: int, n: int, image_hw: tuple[int, int] = (64, 48)) -> list[MvgSample]:
    """Generate ``n`` procedural identities with consistent geometry.

    By construction the 0/45 degree skeletons hard-select FRONT and the
    135/180 ones BACK; ground-truth images show the garment face(s) actually
    visible at each angle.
    """
    if n < 1:
        raise ContractError(f"need n >= 1, got {n}")
    children = np.random.SeedSequence(seed).spawn(n)
    samples = []
    for i in range(n):
        rng = np.random.default_rng(children[i])
        app = _Appearance.draw(rng)
        views, parsings, poses = [], [], []
        for angle in VIEW_ANGLES:
            img, parsing = _render_view(angle, app, image_hw)
            views.append(img)
            parsings.append(parsing)
            poses.append(_synth_skeleton(angle, app))
        garments = GarmentPair(
            front_image=Tensor(_render_garment(app, image_hw, "front")),
            back_image=Tensor(_render_garment(app, image_hw, "back")),
            front_pose=_synth_skeleton(0, app),
            back_pose=_synth_skeleton(180, app),
        )
        samples.append(MvgSample(identity=f"{i:04d}", views=views, parsings=parsings,
                                 poses=poses, garments=garments))
    return samples


__all__ = [
    "VIEW_ANGLES", "KNOWN_LABELS", "MASK_LABELS",
    "LABEL_BACKGROUND", "LABEL_HAIR", "LABEL_FACE", "LABEL_UPPER_GARMENT",
    "LABEL_LEFT_ARM", "LABEL_RIGHT_ARM", "LABEL_LOWER_BODY",
    "save_image", "load_image", "save_parsing", "load_parsing",
    "MvgSample", "TryOnSample", "downsample_mask", "make_agnostic", "make_tryon_sample",
    "save_dataset", "load_dataset", "synth_generate",
]
