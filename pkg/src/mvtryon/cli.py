"""Command-line entry points: mvtryon synth | train | sample | eval.

Run configuration is a flat key=value text file; command-line flags override
individual keys and every run writes the fully resolved config back to its
output directory, which together with the per-step seeding scheme
(SeedSequence over (global seed, step)) makes runs reproducible and
restartable.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as num
from .conditioning import GarmentPair
from .data import (
    MvgSample,
    TryOnSample,
    load_dataset,
    load_image,
    load_parsing,
    make_agnostic,
    make_tryon_sample,
    save_dataset,
    save_image,
    synth_generate,
)
from .diffusion import (
    BackboneConfig,
    SpatialInput,
    TryOnModel,
    forward_diffuse,
    paste_prewarp,
    reconstruct_x0,
)
from .errors import ContractError, FormatError, MvtError, UsageError
from .losses import LossWeights, PerceptualNet, l1_loss, ldm_loss, perceptual_loss, total_loss
from .metrics import evaluate, write_report
from .nn import ParamStore, load_checkpoint, save_checkpoint
from .numerics import Tensor, backward
from .pose import read_pose_jsonl


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    image_h: int = 64
    image_w: int = 48
    scales: int = 2
    base_width: int = 16
    d_g: int = 32
    d_p: int = 16
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lambda_1: float = 0.1
    lambda_perc: float = 1e-4
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 4
    epochs: int = 2
    seed: int = 0
    sample_steps: int = 20
    use_hard: bool = True
    use_soft: bool = True
    data_root: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.lambda_1 < 0 or self.lambda_perc < 0:
            raise ContractError("lambda weights must be nonnegative")
        for name in ("image_h", "image_w", "base_width", "T", "batch_size", "epochs",
                     "sample_steps"):
            if getattr(self, name) < 1:
                raise ContractError(f"config field {name} must be positive")
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")

    @property
    def widths(self) -> tuple[int, int, int]:
        return (self.base_width, 2 * self.base_width, 4 * self.base_width)

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            image_hw=(self.image_h, self.image_w),
            base_width=self.base_width,
            scale_count=self.scales,
            d_g=self.d_g,
            d_p=self.d_p,
            T=self.T,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_1=self.lambda_1, lambda_perc=self.lambda_perc)

    def to_lines(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name}={getattr(self, f.name)}")
        lines.append(f"widths={','.join(str(w) for w in self.widths)}")
        return "\n".join(lines) + "\n"


def _parse_value(field_type, raw: str):
    if field_type is bool:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise FormatError(f"cannot parse boolean from {raw!r}")
    return field_type(raw)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values: dict = {}
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    concrete = {"image_h": int, "image_w": int, "scales": int, "base_width": int,
                "d_g": int, "d_p": int, "T": int, "beta_start": float, "beta_end": float,
                "lambda_1": float, "lambda_perc": float, "lr": float, "weight_decay": float,
                "batch_size": int, "epochs": int, "seed": int, "sample_steps": int,
                "use_hard": bool, "use_soft": bool, "data_root": str, "out_dir": str}
    if path:
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"bad config line {raw!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            if key == "widths":
                continue  # derived field, echoed for the record only
            if key not in concrete:
                raise FormatError(f"unknown config key {key!r}")
            values[key] = _parse_value(concrete[key], val)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        values[key] = val
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam moments with decoupled weight decay (betas 0.9 / 0.999)."""

    def __init__(self, params: ParamStore, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)

    def state_store(self) -> ParamStore:
        store = ParamStore(rng_seed=0)
        store.add("step", Tensor(np.asarray([float(self.t)])))
        for name in self.m:
            store.add(f"m.{name}", Tensor(self.m[name]))
            store.add(f"v.{name}", Tensor(self.v[name]))
        return store

    def load_state(self, store: ParamStore) -> None:
        self.t = int(store["step"].data[0])
        for name in self.m:
            self.m[name] = store[f"m.{name}"].data.copy()
            self.v[name] = store[f"v.{name}"].data.copy()


# ---------------------------------------------------------------------------
# training loop


class TrainingDiverged(MvtError, RuntimeError):
    """Raised when the loss leaves the finite range; carries the step seed."""

    def __init__(self, step: int, seed_key):
        super().__init__(
            f"non-finite loss at step {step}; offending batch seed key {seed_key}")
        self.step = step
        self.seed_key = seed_key


def step_rng(global_seed: int, step: int) -> np.random.Generator:
    """Per-step generator derived from (global seed, step) — restart-stable."""
    return np.random.default_rng(np.random.SeedSequence((global_seed, step)))


def build_train_items(samples: list[MvgSample], model: TryOnModel):
    """Precompute (sample, pasted agnostic) pairs; paste follows the model's selection."""
    items = []
    for s in samples:
        for v in range(len(s.views)):
            item = make_tryon_sample(s, v)
            choice = model.select_view(item.pose)
            pasted = paste_prewarp(Tensor(item.agnostic), item.mask, item.garments, choice)
            items.append((item, pasted))
    return items


def train_step(model: TryOnModel, items, step: int, *, lossw: LossWeights,
               batch_size: int, seed: int, perc: PerceptualNet) -> dict:
    """One optimization step's forward/backward; returns the loss parts."""
    rng = step_rng(seed, step)
    sched = model.sched
    total = None
    parts = {"ldm": 0.0, "l1": 0.0, "perc": 0.0}
    for _ in range(batch_size):
        idx = int(rng.integers(len(items)))
        t = int(rng.integers(1, sched.T + 1))
        item, pasted = items[idx]
        eps = Tensor(rng.standard_normal(item.z0.shape))
        z0 = Tensor(item.z0)
        z_t = forward_diffuse(z0, t, eps, sched)
        mask_latent = Tensor(item.mask_latent.reshape(1, *item.mask_latent.shape))
        inp = SpatialInput.assemble(z_t, pasted, mask_latent)
        c_g, c_l = model.garment_conditions(item.garments, item.pose)
        eps_hat = model.eps(inp, t, c_g, c_l)
        x_hat = reconstruct_x0(z_t, eps_hat, t, sched)
        l_ldm = ldm_loss(eps, eps_hat)
        l_1 = l1_loss(x_hat, z0)
        l_p = perceptual_loss(x_hat, z0, perc)
        loss = total_loss(l_ldm, l_1, l_p, lossw)
        parts["ldm"] += l_ldm.item() / batch_size
        parts["l1"] += l_1.item() / batch_size
        parts["perc"] += l_p.item() / batch_size
        total = loss if total is None else num.add(total, loss)
    loss_step = num.scale(total, 1.0 / batch_size)
    value = loss_step.item()
    if not math.isfinite(value):
        raise TrainingDiverged(step, (seed, step))
    backward(loss_step)
    parts["total"] = value
    return parts


def train_model(model: TryOnModel, samples: list[MvgSample], steps: int, *,
                lossw: LossWeights | None = None, lr: float = 1e-4,
                weight_decay: float = 0.01, batch_size: int = 1, seed: int = 0,
                opt: AdamW | None = None, start_step: int = 0,
                on_step=None, perc: PerceptualNet | None = None) -> tuple[list[float], AdamW]:
    """Run the training loop for ``steps`` total steps, resuming at ``start_step``."""
    lossw = lossw or LossWeights()
    perc = perc or PerceptualNet()
    opt = opt or AdamW(model.params, lr=lr, weight_decay=weight_decay)
    items = build_train_items(samples, model)
    losses = []
    for step in range(start_step, steps):
        model.params.zero_grads()
        parts = train_step(model, items, step, lossw=lossw, batch_size=batch_size,
                           seed=seed, perc=perc)
        opt.step()
        losses.append(parts["total"])
        if on_step is not None:
            on_step(step, parts)
    model.params.zero_grads()
    return losses, opt


def _atomic_save(store: ParamStore, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    save_checkpoint(store, tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# commands


def _resolve_seed(seed_arg) -> int:
    if seed_arg is not None:
        return int(seed_arg)
    env = os.environ.get("MVTRYON_SEED")
    return int(env) if env else 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise UsageError(f"refusing to write into non-empty directory {out}")
    seed = _resolve_seed(args.seed)
    samples = synth_generate(seed, args.count, image_hw=(args.height, args.width))
    save_dataset(samples, out)
    print(f"wrote {len(samples)} samples ({len(samples) * 5} views) to {out}")
    return 0


def cmd_train(args) -> int:
    overrides = {
        "data_root": args.data, "out_dir": args.out, "seed": args.seed,
        "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
        "use_hard": args.use_hard, "use_soft": args.use_soft,
    }
    cfg = load_config(args.config, overrides)
    if not cfg.data_root:
        raise UsageError("train needs a dataset root (--data or config data_root)")
    if not cfg.out_dir:
        raise UsageError("train needs an output directory (--out or config out_dir)")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(cfg.to_lines(), encoding="utf-8")

    samples = load_dataset(cfg.data_root)
    if not samples:
        raise UsageError(f"no usable samples under {cfg.data_root}")
    model = TryOnModel.create(cfg.backbone(), cfg.seed,
                              use_hard=cfg.use_hard, use_soft=cfg.use_soft)
    opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    start_step = 0
    if args.resume:
        ckpt = Path(args.resume)
        model.params = load_checkpoint(ckpt)
        opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        opt.load_state(load_checkpoint(ckpt.with_suffix(".opt.mvtc")))
        start_step = opt.t
        print(f"resuming from {ckpt} at step {start_step}")

    n_items = len(samples) * 5
    steps_per_epoch = max(1, math.ceil(n_items / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    log_path = out / "loss_log.txt"
    log_fh = open(log_path, "a", encoding="utf-8")

    def on_step(step, parts):
        log_fh.write(f"step={step} total={parts['total']:.6f} ldm={parts['ldm']:.6f} "
                     f"l1={parts['l1']:.6f} perc={parts['perc']:.6f}\n")

    try:
        start_epoch = start_step // steps_per_epoch
        for epoch in range(start_epoch, cfg.epochs):
            end = (epoch + 1) * steps_per_epoch
            train_model(model, samples, end, lossw=cfg.loss_weights(), lr=cfg.lr,
                        weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
                        seed=cfg.seed, opt=opt, start_step=max(start_step, epoch * steps_per_epoch),
                        on_step=on_step)
            log_fh.flush()
            ckpt = out / f"ckpt_epoch{epoch + 1:03d}.mvtc"
            _atomic_save(model.params, ckpt)
            _atomic_save(opt.state_store(), ckpt.with_suffix(".opt.mvtc"))
            print(f"epoch {epoch + 1}/{cfg.epochs} done, checkpoint {ckpt}")
    finally:
        log_fh.close()
    print(f"trained {total_steps} steps; log at {log_path}")
    return 0


def _load_pose_sidecar(image_path: Path):
    pose_path = image_path.with_suffix(".pose.jsonl")
    if not pose_path.exists():
        raise UsageError(f"missing pose sidecar {pose_path}")
    poses = read_pose_jsonl(pose_path)
    if len(poses) != 1:
        raise FormatError(f"{pose_path} must hold exactly one pose record")
    return poses[0]


def _config_near_checkpoint(args) -> RunConfig:
    if args.config:
        return load_config(args.config)
    sibling = Path(args.checkpoint).parent / "resolved_config.txt"
    if sibling.exists():
        return load_config(sibling)
    raise UsageError("no --config given and no resolved_config.txt next to the checkpoint")


def cmd_sample(args) -> int:
    cfg = _config_near_checkpoint(args)
    person_path = Path(args.person)
    parse_path = person_path.with_suffix(".parse.png")
    if not parse_path.exists():
        raise UsageError(f"missing parsing sidecar {parse_path}")
    person = load_image(person_path)
    parsing = load_parsing(parse_path)
    person_pose = _load_pose_sidecar(person_path)
    garments = GarmentPair(
        front_image=Tensor(load_image(args.garment_front)),
        back_image=Tensor(load_image(args.garment_back)),
        front_pose=_load_pose_sidecar(Path(args.garment_front)),
        back_pose=_load_pose_sidecar(Path(args.garment_back)),
    )
    mask, agnostic, m = make_agnostic(person, parsing)
    item = TryOnSample(x=person, mask=mask, agnostic=agnostic, mask_latent=m,
                       pose=person_pose, garments=garments)
    model = TryOnModel(cfg=cfg.backbone(), params=load_checkpoint(args.checkpoint),
                       sched=cfg.backbone().schedule(),
                       use_hard=cfg.use_hard, use_soft=cfg.use_soft)
    seed = _resolve_seed(args.seed)
    out_img = model.sample_tryon(item, seed=seed, steps=args.steps or cfg.sample_steps)
    save_image(args.out, out_img)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_near_checkpoint(args)
    samples = load_dataset(args.data)
    if not samples:
        raise UsageError(f"no usable samples under {args.data}")
    model = TryOnModel(cfg=cfg.backbone(), params=load_checkpoint(args.checkpoint),
                       sched=cfg.backbone().schedule(),
                       use_hard=cfg.use_hard, use_soft=cfg.use_soft)
    seed = _resolve_seed(args.seed)
    report = evaluate(args.protocol, model, samples, seed=seed,
                      steps=args.steps or cfg.sample_steps,
                      max_samples=args.max_samples)
    out_prefix = Path(args.out or ".") / f"report_{args.protocol}"
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    txt, _ = write_report(report, out_prefix)
    print(txt.read_text(encoding="utf-8"), end="")
    if any(not math.isfinite(v) for v in report["metrics"].values()):
        print("error: metric produced a non-finite value", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_bool_flag(parser, name, dest):
    group = parser.add_mutually_exclusive_group()
    group.add_argument(f"--{name}", dest=dest, action="store_true", default=None)
    group.add_argument(f"--no-{name}", dest=dest, action="store_false", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvtryon",
                                     description="Desk-scale multi-view try-on toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=48)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--resume", default=None)
    _add_bool_flag(p, "hard-selection", "use_hard")
    _add_bool_flag(p, "soft-selection", "use_soft")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="run try-on inference for one person")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--person", required=True)
    p.add_argument("--garment-front", required=True)
    p.add_argument("--garment-back", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=["paired", "unpaired"], required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--max-samples", type=int, default=None)
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except MvtError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
