"""Synthetic abdominal phantoms and additive Gaussian noise.

A phantom is an elliptic "body" cylinder surrounded by air, with an optional
bright spine column and a set of non-overlapping ellipsoidal organs inside the
body. Only organs carry foreground labels.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream
from .volume import LabelVolume, Manifest, Volume, dataset_intensity_range, write_manifest, write_volume

TRAIN_FRACTION = 0.8


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class OrganSpec:
    label: int
    intensity: tuple[float, float]
    # (min, max) semi-axis length in voxels, per array axis (z, y, x)
    semi_axes: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]
    count: int = 1


def default_organs() -> list[OrganSpec]:
    # contrast steps of ~0.005 put test noise of std 0.005-0.01 in the range where it hurts
    return [
        OrganSpec(1, (0.004, 0.005), ((5, 8), (7, 10), (8, 11))),
        OrganSpec(2, (0.009, 0.010), ((4, 6), (5, 7), (5, 7))),
        OrganSpec(3, (0.014, 0.015), ((3, 5), (4, 6), (4, 6))),
    ]


@dataclass
class PhantomConfig:
    dims: tuple[int, int, int] = (24, 48, 48)
    spacing_mm: tuple[float, float, float] = (2.0, 2.0, 3.0)
    organ_specs: list[OrganSpec] = field(default_factory=default_organs)
    # background spread std (0.0017 / sqrt(3)) matches the organ texture std
    background_intensity: tuple[float, float] = (-0.0017, 0.0017)
    texture_noise_std: float = 0.001
    seed: int = 0
    num_classes: int | None = None
    # None disables the air surround / spine column
    air_intensity: float | None = -1.0
    bone_intensity: float | None = 1.0
    body_fraction: tuple[float, float] = (0.9, 0.94)
    max_retries: int = 50

    def __post_init__(self) -> None:
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.organ_specs = [s if isinstance(s, OrganSpec) else _organ_from_dict(s) for s in self.organ_specs]
        if self.num_classes is None:
            self.num_classes = 1 + max((s.label for s in self.organ_specs), default=0)
        self.validate()

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive counts, got {self.dims}")
        if min(self.spacing_mm) <= 0:
            raise ValueError("spacing must be positive")
        labels = [s.label for s in self.organ_specs]
        if len(set(labels)) != len(labels):
            raise ValueError(f"organ labels must be distinct, got {labels}")
        for s in self.organ_specs:
            if not 1 <= s.label < self.num_classes:
                raise ValueError(f"organ label {s.label} outside [1, {self.num_classes - 1}]")
            lo, hi = s.intensity
            if not -1.0 <= lo <= hi <= 1.0:
                raise ValueError(f"organ {s.label}: intensity interval {s.intensity} not within [-1, 1]")
            for (amin, amax), n in zip(s.semi_axes, self.dims):
                if not 1 <= amin <= amax or 2 * amax + 1 > n:
                    raise ValueError(f"organ {s.label}: semi-axes {s.semi_axes} do not fit dims {self.dims}")
            if s.count < 0:
                raise ValueError("organ count must be non-negative")
        lo, hi = self.background_intensity
        if not -1.0 <= lo <= hi <= 1.0:
            raise ValueError(f"background interval {self.background_intensity} not within [-1, 1]")
        if self.texture_noise_std < 0:
            raise ValueError("texture_noise_std must be non-negative")


def _organ_from_dict(d: dict) -> OrganSpec:
    unknown = set(d) - {"label", "intensity", "semi_axes", "count"}
    if unknown:
        raise ValueError(f"unknown organ spec keys: {sorted(unknown)}")
    return OrganSpec(
        label=int(d["label"]),
        intensity=tuple(d["intensity"]),
        semi_axes=tuple(tuple(a) for a in d["semi_axes"]),
        count=int(d.get("count", 1)),
    )


def _ellipsoid(dims, center, axes) -> np.ndarray:
    z, y, x = np.ogrid[: dims[0], : dims[1], : dims[2]]
    r = ((z - center[0]) / axes[0]) ** 2 + ((y - center[1]) / axes[1]) ** 2 + ((x - center[2]) / axes[2]) ** 2
    return r <= 1.0


def _body_masks(cfg: PhantomConfig) -> tuple[np.ndarray, np.ndarray]:
    nz, ny, nx = cfg.dims
    _, y, x = np.ogrid[:nz, :ny, :nx]
    cy, cx = (ny - 1) / 2, (nx - 1) / 2
    ay, ax = cfg.body_fraction[0] * ny / 2, cfg.body_fraction[1] * nx / 2
    body = (((y - cy) / ay) ** 2 + ((x - cx) / ax) ** 2 <= 1.0) & np.ones((nz, 1, 1), bool)
    if cfg.air_intensity is None:
        body = np.ones(cfg.dims, bool)
    spine = np.zeros(cfg.dims, bool)
    if cfg.bone_intensity is not None:
        r = max(1.5, 0.07 * min(ny, nx))
        sy = cy + 0.6 * ay
        spine = (((y - sy) / r) ** 2 + ((x - cx) / r) ** 2 <= 1.0) & np.ones((nz, 1, 1), bool)
    return body, spine


def _place(rng, cfg, spec, free) -> tuple[np.ndarray, tuple]:
    axes = [rng.uniform(a, b) for a, b in spec.semi_axes]
    while True:
        for _ in range(cfg.max_retries):
            center = []
            for a, n in zip(axes, cfg.dims):
                lo, hi = math.ceil(a), math.floor(n - 1 - a)
                center.append(int(rng.integers(lo, hi + 1)) if hi >= lo else (n - 1) // 2)
            mask = _ellipsoid(cfg.dims, center, axes)
            if not (mask & ~free).any():
                return mask, tuple(center)
        if min(axes) <= 1.0:
            raise PlacementError(f"organ {spec.label}: no free position after {cfg.max_retries} retries at minimum size")
        axes = [max(1.0, 0.9 * a) for a in axes]


def generate_phantom(cfg: PhantomConfig, sample_index: int) -> tuple[Volume, LabelVolume]:
    rng = stream(cfg.seed, "phantom", sample_index)
    body, spine = _body_masks(cfg)
    labels = np.zeros(cfg.dims, np.uint8)
    image = rng.uniform(*cfg.background_intensity, size=cfg.dims)

    # organs keep a one-voxel gap to each other and stay clear of the spine
    free = body & ~spine
    for spec in cfg.organ_specs:
        for _ in range(spec.count):
            mask, _ = _place(rng, cfg, spec, free)
            labels[mask] = spec.label
            n = int(mask.sum())
            # one base intensity per organ instance; texture is the only per-voxel variation
            image[mask] = rng.uniform(*spec.intensity) + rng.normal(0.0, cfg.texture_noise_std, size=n)
            grown = mask.copy()
            for axis in range(3):
                grown |= np.roll(mask, 1, axis) | np.roll(mask, -1, axis)
            free &= ~grown
    if cfg.air_intensity is not None:
        image[~body] = cfg.air_intensity
    if cfg.bone_intensity is not None:
        image[spine] = cfg.bone_intensity

    tag = f"phantom seed={cfg.seed} index={sample_index}"
    return (
        Volume(image.astype(np.float32), cfg.spacing_mm, tag),
        LabelVolume(labels, cfg.spacing_mm, cfg.num_classes, tag),
    )


def split_point(n: int) -> int:
    return int(math.floor(TRAIN_FRACTION * n))


def generate_dataset(cfg: PhantomConfig, n: int, out_dir: str | os.PathLike) -> Manifest:
    if n < 2:
        raise ValueError(f"a dataset needs at least 2 samples, got {n}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    train_images = []
    n_train = split_point(n)
    for i in range(n):
        image, labels = generate_phantom(cfg, i)
        img_name, lab_name = f"image_{i:03d}.mivol", f"label_{i:03d}.mivol"
        write_volume(image, out / img_name)
        write_volume(labels, out / lab_name)
        samples.append((img_name, lab_name))
        if i < n_train:
            train_images.append(image)
    manifest = Manifest(samples, n_train, dataset_intensity_range(train_images), root=out)
    write_manifest(manifest, out / "manifest.json")
    return manifest


def add_gaussian_noise(v: Volume, mean: float, std: float, seed: int, stream_id: int = 0) -> Volume:
    """``v + n`` with ``n ~ Normal(mean, std)`` i.i.d. per voxel; no clamping."""
    if std < 0:
        raise ValueError(f"noise std must be non-negative, got {std}")
    if std == 0 and mean == 0:
        return Volume(v.data.copy(), v.spacing, v.provenance)
    noise = stream(seed, "noise", stream_id).normal(mean, std, size=v.dims)
    return Volume((v.data.astype(np.float64) + noise).astype(np.float32), v.spacing, v.provenance)
