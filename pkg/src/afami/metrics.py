"""Evaluation metrics: Dice overlap, Hausdorff distance, Mann-Whitney U test."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .volume import LabelVolume

EXACT_MAX_N = 16


@dataclass(frozen=True)
class MetricsRecord:
    sample_id: str
    organ: int
    dsc: float
    hd_mm: float | None  # None: undefined (an empty mask)
    noise_std: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.dsc <= 1.0:
            raise ValueError(f"dsc must lie in [0, 1], got {self.dsc}")
        if self.hd_mm is not None and self.hd_mm < 0:
            raise ValueError(f"hd_mm must be non-negative, got {self.hd_mm}")


def _masks(pred: LabelVolume, gt: LabelVolume, organ: int) -> tuple[np.ndarray, np.ndarray]:
    if pred.dims != gt.dims:
        raise ValueError(f"prediction dims {pred.dims} differ from ground truth {gt.dims}")
    return pred.labels == organ, gt.labels == organ


def dsc_metric(pred: LabelVolume, gt: LabelVolume, organ: int) -> float:
    p, g = _masks(pred, gt, organ)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one of 6 face neighbours outside the mask.

    Positions beyond the volume border count as outside.
    """
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask)
    core = (slice(1, -1),) * 3
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[core]
    return mask & ~interior


def hausdorff_mm(pred: LabelVolume, gt: LabelVolume, organ: int) -> float | None:
    """Symmetric (100th percentile) Hausdorff distance between organ surfaces in mm.

    Returns None when either mask is empty.
    """
    if pred.spacing != gt.spacing:
        raise ValueError(f"prediction spacing {pred.spacing} differs from ground truth {gt.spacing}")
    p, g = _masks(pred, gt, organ)
    if not p.any() or not g.any():
        return None
    sp, sg = surface_voxels(p), surface_voxels(g)
    sampling = pred.spacing[::-1]  # array axes are (z, y, x)
    to_g = ndimage.distance_transform_edt(~sg, sampling=sampling)
    to_p = ndimage.distance_transform_edt(~sp, sampling=sampling)
    return float(max(to_g[sp].max(), to_p[sg].max()))


# ---------------------------------------------------------------------------
# Mann-Whitney U


@lru_cache(maxsize=None)
def _u_counts(n1: int, n2: int) -> tuple[int, ...]:
    """Number of rank assignments giving each U value in 0..n1*n2."""
    if n1 == 0 or n2 == 0:
        return (1,)
    # placing the largest rank in sample 1 adds n2 to U, in sample 2 adds 0
    with_a = _u_counts(n1 - 1, n2)
    with_b = _u_counts(n1, n2 - 1)
    out = [0] * (n1 * n2 + 1)
    for u, c in enumerate(with_a):
        out[u + n2] += c
    for u, c in enumerate(with_b):
        out[u] += c
    return tuple(out)


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def mann_whitney_u(a: Sequence[float], b: Sequence[float], alternative: str = "two-sided") -> tuple[float, float]:
    """U statistic of ``a`` and its p-value.

    Exact (full enumeration of rank assignments) for tie-free samples with
    ``len(a) + len(b) <= 16``; otherwise a normal approximation with tie and
    continuity correction. ``alternative="greater"`` tests whether ``a``
    tends to exceed ``b``.
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    n1, n2 = a.size, b.size
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    ranks = rankdata(np.concatenate([a, b]))
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2)
    _, tie_sizes = np.unique(ranks, return_counts=True)
    has_ties = bool((tie_sizes > 1).any())

    if n1 + n2 <= EXACT_MAX_N and not has_ties:
        counts = np.array(_u_counts(n1, n2), dtype=np.float64)
        total = counts.sum()
        k = int(round(u))
        p_le = counts[: k + 1].sum() / total
        p_ge = counts[k:].sum() / total
        if alternative == "greater":
            return u, float(p_ge)
        if alternative == "less":
            return u, float(p_le)
        return u, float(min(1.0, 2.0 * min(p_le, p_ge)))

    N = n1 + n2
    mu = n1 * n2 / 2.0
    tie_term = float((tie_sizes**3 - tie_sizes).sum()) / (N * (N - 1))
    var = n1 * n2 / 12.0 * ((N + 1) - tie_term)
    if var <= 0:
        return u, 1.0
    sd = math.sqrt(var)
    if alternative == "greater":
        return u, _normal_sf((u - mu - 0.5) / sd)
    if alternative == "less":
        return u, _normal_sf((mu - u - 0.5) / sd)
    z = max(0.0, abs(u - mu) - 0.5) / sd
    return u, float(min(1.0, 2.0 * _normal_sf(z)))


# ---------------------------------------------------------------------------
# CSV

CSV_FIELDS = ["sample_id", "organ", "noise_std", "dsc", "hd_mm"]


def write_records(records: Iterable[MetricsRecord], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([r.sample_id, r.organ, repr(r.noise_std), repr(r.dsc), "" if r.hd_mm is None else repr(r.hd_mm)])


def read_records(path: str | os.PathLike) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != set(CSV_FIELDS):
        raise ValueError(f"{path}: expected columns {CSV_FIELDS}, got {list(rows[0])}")
    return [
        MetricsRecord(
            sample_id=row["sample_id"],
            organ=int(row["organ"]),
            dsc=float(row["dsc"]),
            hd_mm=float(row["hd_mm"]) if row["hd_mm"] else None,
            noise_std=float(row["noise_std"]),
        )
        for row in rows
    ]
