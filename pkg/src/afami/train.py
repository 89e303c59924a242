"""Patch sampling, Mixup, Adam and the training loop."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .afa import AfaConfig, afa_training_loss
from .losses import LossConfig, logits_loss
from .rng import stream
from .segnet import NetConfig, SegNet, build, check_spatial, save_checkpoint
from .volume import LabelVolume, Manifest, Volume, normalize_intensity, read_manifest, read_volume, resample

log = logging.getLogger(__name__)

TARGET_SPACING = (2.0, 2.0, 3.0)


@dataclass
class TrainConfig:
    manifest: str = "data/manifest.json"
    output_dir: str = "runs/train"
    patch_size: tuple[int, int, int] = (16, 32, 32)  # (z, y, x) voxels
    patches_per_scan: int = 4
    scans_per_batch: int = 1
    iterations: int = 1500
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    mixup_alpha: float = 0.2
    loss: LossConfig = field(default_factory=LossConfig)
    net: NetConfig = field(default_factory=NetConfig)
    afa: AfaConfig | None = None
    seed: int = 0
    checkpoint_interval: int = 500
    target_spacing: tuple[float, float, float] = TARGET_SPACING

    def __post_init__(self) -> None:
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.betas = tuple(float(b) for b in self.betas)
        self.target_spacing = tuple(float(s) for s in self.target_spacing)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.net, dict):
            self.net = NetConfig(**self.net)
        if isinstance(self.afa, dict):
            self.afa = AfaConfig(**self.afa)
        self.validate()

    def validate(self) -> None:
        check_spatial(self.patch_size, self.net.depth)
        if self.mixup_alpha < 0:
            raise ValueError(f"mixup_alpha must be non-negative, got {self.mixup_alpha}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.patches_per_scan < 1 or self.scans_per_batch < 1:
            raise ValueError("batch composition counts must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        if self.afa is not None:
            self.afa.layer(self.net.depth)


@dataclass
class Batch:
    images: np.ndarray  # (B, 1, Z, Y, X)
    targets: np.ndarray  # (B, C, Z, Y, X)

    def __post_init__(self) -> None:
        if self.images.shape[0] != self.targets.shape[0] or self.images.shape[2:] != self.targets.shape[2:]:
            raise ValueError(f"images {self.images.shape} and targets {self.targets.shape} disagree")

    def take(self, idx) -> "Batch":
        return Batch(self.images[idx], self.targets[idx])


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(..., Z, Y, X) integer labels -> (..., C, Z, Y, X) one-hot."""
    eye = np.eye(num_classes, dtype=dtype)
    return np.moveaxis(eye[labels], -1, -4)


# ---------------------------------------------------------------------------
# data


@dataclass
class Case:
    sample_id: str
    image: Volume  # resampled + normalized
    labels: LabelVolume  # resampled
    original_labels: LabelVolume
    original_image: Volume


def load_case(manifest: Manifest, image_path, label_path, target_spacing=TARGET_SPACING) -> Case:
    image = read_volume(image_path)
    labels = read_volume(label_path)
    if image.dims != labels.dims:
        raise ValueError(f"{image_path}: image dims {image.dims} differ from labels {labels.dims}")
    norm = normalize_intensity(resample(image, target_spacing), manifest.intensity)
    return Case(Path(image_path).stem, norm, resample(labels, target_spacing), labels, image)


def load_split(manifest: Manifest, split: str, target_spacing=TARGET_SPACING) -> list[Case]:
    return [load_case(manifest, a, b, target_spacing) for a, b in manifest.split(split)]


def sample_patches(v: Volume, labels: LabelVolume, n: int, patch_size, rng: np.random.Generator):
    """``n`` random (image patch (1,Z,Y,X), one-hot patch (C,Z,Y,X)) pairs and their corners."""
    ps = tuple(patch_size)
    if any(d < p for d, p in zip(v.dims, ps)):
        raise ValueError(f"volume {v.dims} is smaller than patch {ps}")
    out, corners = [], []
    for _ in range(n):
        c = tuple(int(rng.integers(0, d - p + 1)) for d, p in zip(v.dims, ps))
        sl = tuple(slice(a, a + p) for a, p in zip(c, ps))
        out.append((v.data[sl][None], one_hot(labels.labels[sl], labels.num_classes)))
        corners.append(c)
    return out, corners


def mixup(a: Batch, b: Batch, alpha: float, rng: np.random.Generator | None = None, coef: float | None = None) -> Batch:
    """Convex combination ``coef * a + (1 - coef) * b`` with ``coef ~ Beta(alpha, alpha)``."""
    if a.images.shape != b.images.shape or a.targets.shape != b.targets.shape:
        raise ValueError("mixup needs batches of identical shape")
    if coef is None:
        coef = float(rng.beta(alpha, alpha))
    dt = a.images.dtype
    c = dt.type(coef)
    one_minus = dt.type(1.0 - coef)
    return Batch(c * a.images + one_minus * b.images, c * a.targets + one_minus * b.targets)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def optimizer_step(params, grads, state: AdamState, lr: float, decays=(0.9, 0.999), guard: float = 1e-8) -> AdamState:
    """Adam update of ``params`` (name -> Node) in place."""
    b1, b2 = decays
    state.t += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.value.shape:
            raise ValueError(f"{name}: gradient {g.shape} does not match parameter {p.value.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.value))
        v = state.v.setdefault(name, np.zeros_like(p.value))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**state.t)
        v_hat = v / (1 - b2**state.t)
        p.value = p.value - (lr * m_hat / (np.sqrt(v_hat) + guard)).astype(p.value.dtype)
    return state


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    losses: list[float]
    wall_seconds: float


def make_batch(cases: list[Case], cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    images, targets = [], []
    for idx in rng.integers(0, len(cases), size=cfg.scans_per_batch):
        patches, _ = sample_patches(cases[idx].image, cases[idx].labels, cfg.patches_per_scan, cfg.patch_size, rng)
        images += [p[0] for p in patches]
        targets += [p[1] for p in patches]
    batch = Batch(np.stack(images), np.stack(targets))
    if cfg.mixup_alpha > 0:
        batch = mixup(batch, batch.take(rng.permutation(len(images))), cfg.mixup_alpha, rng)
    return batch


def train_step(net: SegNet, batch: Batch, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    net.zero_grad()
    if cfg.afa is None:
        total = logits_loss(net.forward_clean(batch.images), batch.targets, cfg.loss)
        record = {"total_loss": total.item(), "L_clean": total.item()}
    else:
        afa = replace(cfg.afa, loss=cfg.loss)
        total, diag = afa_training_loss(net, batch.images, batch.targets, afa, rng)
        record = {
            "total_loss": total.item(),
            "L_clean": diag.clean_loss,
            "L_k": {repr(k): v for k, v in diag.adv_losses.items()},
            "grad_l1_norm": diag.grad_l1_norm,
        }
    ad.backward(total)
    return record


def train(cfg: TrainConfig) -> TrainResult:
    manifest = read_manifest(cfg.manifest)
    cases = load_split(manifest, "train", cfg.target_spacing)
    num_classes = cases[0].labels.num_classes
    # the run seed drives initialization too, so one number fixes every draw
    net_cfg = replace(cfg.net, num_classes=num_classes, patch_size=cfg.patch_size, seed=cfg.seed)
    net = build(net_cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    state = AdamState()
    losses = []
    start = time.perf_counter()
    with open(log_path, "w") as fh:
        for step in range(1, cfg.iterations + 1):
            t0 = time.perf_counter()
            rng = stream(cfg.seed, "train", step)
            batch = make_batch(cases, cfg, rng)
            record = train_step(net, batch, cfg, rng)
            grads = {name: p.grad for name, p in net.parameters()}
            optimizer_step(net.params, grads, state, cfg.lr, cfg.betas, cfg.adam_eps)
            losses.append(record["total_loss"])
            record = {"step": step, **record, "wall_ms": round(1e3 * (time.perf_counter() - t0), 3)}
            fh.write(json.dumps(record) + "\n")
            fh.flush()
            if step % cfg.checkpoint_interval == 0 and step != cfg.iterations:
                save_checkpoint(net, out / f"checkpoint_{step:06d}.ckpt", step)
            if step % 50 == 0:
                log.info("step %d loss %.4f", step, record["total_loss"])
    final = out / "checkpoint_final.ckpt"
    save_checkpoint(net, final, cfg.iterations)
    return TrainResult(final, log_path, losses, time.perf_counter() - start)


def read_log(path: str | os.PathLike) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
