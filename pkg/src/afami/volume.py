"""Spacing-aware 3D volumes: file I/O, resampling and intensity normalization.

Arrays are stored z-slowest / x-fastest, i.e. ``data.shape == (nz, ny, nx)``,
while spacing is given in (sx, sy, sz) millimeters.

File layout::

    bytes 0-7     magic b"MIVOL001"
    bytes 8-11    uint32 LE header length H
    bytes 12..    UTF-8 JSON header (H bytes)
    remainder     raw little-endian payload
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

MAGIC = b"MIVOL001"

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Raised for malformed volume files or invalid volume contents."""


def _check_geometry(shape: tuple[int, ...], spacing: Sequence[float]) -> None:
    if len(shape) != 3 or min(shape) < 1:
        raise VolumeFormatError(f"dims must be three positive counts, got {shape}")
    if len(spacing) != 3 or min(spacing) <= 0:
        raise VolumeFormatError(f"spacing must be three positive values, got {tuple(spacing)}")


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float]
    provenance: str = ""

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(self.data.shape, self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)


@dataclass
class LabelVolume:
    labels: np.ndarray
    spacing: tuple[float, float, float]
    num_classes: int
    provenance: str = ""

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise VolumeFormatError(
                f"label values must lie in [0, {self.num_classes - 1}], "
                f"found [{labels.min()}, {labels.max()}]"
            )
        if not 1 <= self.num_classes <= 256:
            raise VolumeFormatError(f"num_classes must be in [1, 256], got {self.num_classes}")
        self.labels = labels.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(self.labels.shape, self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
        )


AnyVolume = Union[Volume, LabelVolume]


@dataclass(frozen=True)
class IntensityRange:
    global_min: float
    global_max: float

    def __post_init__(self) -> None:
        if not self.global_min < self.global_max:
            raise ValueError(f"degenerate intensity range [{self.global_min}, {self.global_max}]")


# ---------------------------------------------------------------------------
# I/O


def write_volume(v: AnyVolume, path: str | os.PathLike) -> None:
    if isinstance(v, LabelVolume):
        header = {
            "kind": "labels",
            "dims": list(v.dims),
            "spacing_mm": list(v.spacing),
            "dtype": "u8",
            "num_classes": v.num_classes,
        }
        payload = v.labels.astype(_DTYPES["u8"]).tobytes(order="C")
    elif isinstance(v, Volume):
        header = {"kind": "image", "dims": list(v.dims), "spacing_mm": list(v.spacing), "dtype": "f32"}
        payload = v.data.astype(_DTYPES["f32"]).tobytes(order="C")
    else:
        raise TypeError(f"cannot write {type(v).__name__}")
    if v.provenance:
        header["provenance"] = v.provenance
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(payload)


def read_volume(path: str | os.PathLike) -> AnyVolume:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {blob[:8]!r}")
    (hlen,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: unreadable header") from exc
    dims = tuple(int(d) for d in header["dims"])
    spacing = tuple(float(s) for s in header["spacing_mm"])
    _check_geometry(dims, spacing)
    dtype = _DTYPES.get(header.get("dtype"))
    if dtype is None:
        raise VolumeFormatError(f"{path}: unknown dtype {header.get('dtype')!r}")
    payload = blob[12 + hlen :]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    provenance = header.get("provenance", "")
    if header["kind"] == "labels":
        return LabelVolume(arr.copy(), spacing, int(header["num_classes"]), provenance)
    if header["kind"] == "image":
        return Volume(arr.astype(np.float32), spacing, provenance)
    raise VolumeFormatError(f"{path}: unknown kind {header['kind']!r}")


# ---------------------------------------------------------------------------
# resampling


def _source_coords(n_out: int, n_in: int, scale: float) -> np.ndarray:
    # voxel centers aligned: out center j sits at physical (j + 0.5) * target
    coords = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    return np.clip(coords, 0.0, n_in - 1)


def _linear_axis(a: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, a.shape[axis] - 1)
    w = coords - lo
    shape = [1] * a.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - w) + np.take(a, hi, axis=axis) * w


def resample(v: AnyVolume, target_spacing: Sequence[float]) -> AnyVolume:
    """Resample to ``target_spacing`` (sx, sy, sz) mm.

    Images use trilinear interpolation, label maps nearest neighbour. Samples
    falling outside the source grid take the nearest border voxel.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or min(target) <= 0:
        raise ValueError(f"target spacing must be three positive values, got {target}")
    if target == v.spacing:
        return v
    # array axes are (z, y, x); spacing is (sx, sy, sz)
    dims = [max(1, int(round(n * s / t))) for n, s, t in zip(v.dims, v.spacing[::-1], target[::-1])]
    return resample_to_grid(v, dims, target)


def resample_to_grid(v: AnyVolume, dims: Sequence[int], spacing: Sequence[float]) -> AnyVolume:
    """Resample onto an explicit (nz, ny, nx) grid with the given spacing."""
    spacing = tuple(float(t) for t in spacing)
    dims = tuple(int(d) for d in dims)
    _check_geometry(dims, spacing)
    if dims == v.dims and spacing == v.spacing:
        return v
    coords = [
        _source_coords(m, n, t / s) for m, n, s, t in zip(dims, v.dims, v.spacing[::-1], spacing[::-1])
    ]
    if isinstance(v, LabelVolume):
        idx = [np.minimum(np.floor(c + 0.5).astype(np.int64), n - 1) for c, n in zip(coords, v.dims)]
        return LabelVolume(v.labels[np.ix_(*idx)], spacing, v.num_classes, v.provenance)
    a = v.data.astype(np.float64)
    for axis, c in enumerate(coords):
        a = _linear_axis(a, c, axis)
    return Volume(a.astype(np.float32), spacing, v.provenance)


# ---------------------------------------------------------------------------
# intensity


def normalize_intensity(v: Volume, r: IntensityRange) -> Volume:
    """Affine map of [global_min, global_max] onto [-1, 1], then clamp."""
    scaled = 2.0 * (v.data.astype(np.float64) - r.global_min) / (r.global_max - r.global_min) - 1.0
    return Volume(np.clip(scaled, -1.0, 1.0).astype(np.float32), v.spacing, v.provenance)


def dataset_intensity_range(volumes: Iterable[str | os.PathLike | Volume]) -> IntensityRange:
    lo, hi = np.inf, -np.inf
    count = 0
    for item in volumes:
        v = item if isinstance(item, Volume) else read_volume(item)
        if not isinstance(v, Volume):
            raise VolumeFormatError(f"{item}: expected an image volume")
        lo = min(lo, float(v.data.min()))
        hi = max(hi, float(v.data.max()))
        count += 1
    if count == 0:
        raise ValueError("intensity range needs at least one volume")
    return IntensityRange(lo, hi)


# ---------------------------------------------------------------------------
# preprocessing manifest


@dataclass
class Manifest:
    """Ordered (image, label) pairs with a first-80% train / rest test split.

    Paths are stored relative to the manifest file so datasets can be moved.
    """

    samples: list[tuple[str, str]]
    n_train: int
    intensity: IntensityRange
    root: Path = field(default=Path("."), compare=False)

    @property
    def train(self) -> list[tuple[str, str]]:
        return self.samples[: self.n_train]

    @property
    def test(self) -> list[tuple[str, str]]:
        return self.samples[self.n_train :]

    def split(self, name: str) -> list[tuple[Path, Path]]:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return [(self.root / a, self.root / b) for a, b in getattr(self, name)]

    def to_json(self) -> dict:
        pair = lambda s: {"image": s[0], "label": s[1]}  # noqa: E731
        return {
            "train": [pair(s) for s in self.train],
            "test": [pair(s) for s in self.test],
            "global_min": self.intensity.global_min,
            "global_max": self.intensity.global_max,
        }


def write_manifest(m: Manifest, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(m.to_json(), indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | os.PathLike) -> Manifest:
    path = Path(path)
    raw = json.loads(path.read_text())
    train = [(s["image"], s["label"]) for s in raw["train"]]
    test = [(s["image"], s["label"]) for s in raw["test"]]
    return Manifest(
        samples=train + test,
        n_train=len(train),
        intensity=IntensityRange(float(raw["global_min"]), float(raw["global_max"])),
        root=path.parent,
    )
