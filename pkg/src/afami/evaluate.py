"""Sliding-window inference, dataset evaluation and paired model comparison."""

from __future__ import annotations

import csv
import json
import math
import os
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import MetricsRecord, dsc_metric, hausdorff_mm, mann_whitney_u
from .phantom import add_gaussian_noise
from .segnet import SegNet
from .train import TARGET_SPACING, Case, load_split
from .volume import LabelVolume, Manifest, Volume, resample_to_grid

NOISE_LADDER = (0.0, 0.0005, 0.001, 0.005, 0.01)


@dataclass
class SweepConfig:
    noise_stds: tuple[float, ...] = NOISE_LADDER
    noise_mean: float = 0.0
    seed: int = 0
    window: tuple[int, int, int] = (16, 32, 32)
    overlap: float = 0.8
    batch_size: int = 8

    def __post_init__(self) -> None:
        self.noise_stds = tuple(float(s) for s in self.noise_stds)
        self.window = tuple(int(w) for w in self.window)
        if any(s < 0 for s in self.noise_stds):
            raise ValueError(f"noise stds must be non-negative, got {self.noise_stds}")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")


@dataclass
class ProbabilityVolume:
    probs: np.ndarray  # (C, nz, ny, nx)
    spacing: tuple[float, float, float]


# ---------------------------------------------------------------------------
# inference


def window_starts(dim: int, window: int, overlap: float) -> list[int]:
    """Window corners along one axis; the last window is snapped to the far edge."""
    if window > dim:
        raise ValueError(f"window {window} larger than axis length {dim}")
    stride = max(1, math.floor((1.0 - overlap) * window + 0.5))
    starts = list(range(0, dim - window + 1, stride))
    if starts[-1] != dim - window:
        starts.append(dim - window)
    return starts


def window_placements(dims, window, overlap) -> list[tuple[int, int, int]]:
    axes = [window_starts(d, w, overlap) for d, w in zip(dims, window)]
    return [(z, y, x) for z in axes[0] for y in axes[1] for x in axes[2]]


def _softmax(logits: np.ndarray) -> np.ndarray:
    logits = logits.astype(np.float64)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def sliding_window_predict(
    net: SegNet, v: Volume, window: Sequence[int], overlap: float = 0.8, batch_size: int = 8
) -> ProbabilityVolume:
    """Per-voxel class probabilities averaged uniformly over covering windows."""
    window = tuple(int(w) for w in window)
    dims = v.dims
    # volumes smaller than the window are edge-padded, then cropped back
    pad = [(0, max(0, w - d)) for d, w in zip(dims, window)]
    data = np.pad(v.data, pad, mode="edge") if any(p[1] for p in pad) else v.data
    placements = window_placements(data.shape, window, overlap)
    C = net.cfg.num_classes
    acc = np.zeros((C,) + data.shape, dtype=np.float64)
    count = np.zeros(data.shape, dtype=np.int32)
    for start in range(0, len(placements), batch_size):
        chunk = placements[start : start + batch_size]
        x = np.stack([data[z : z + window[0], y : y + window[1], xx : xx + window[2]] for z, y, xx in chunk])
        probs = _softmax(net.forward_clean(x[:, None].astype(np.float32)).value)
        for (z, y, xx), p in zip(chunk, probs):
            sl = (slice(z, z + window[0]), slice(y, y + window[1]), slice(xx, xx + window[2]))
            acc[(slice(None),) + sl] += p
            count[sl] += 1
    probs = acc / count
    probs = probs[:, : dims[0], : dims[1], : dims[2]]
    return ProbabilityVolume(probs, v.spacing)


def predict_labels(pv: ProbabilityVolume) -> LabelVolume:
    """Per-voxel argmax; ties resolve to the lower class index."""
    return LabelVolume(np.argmax(pv.probs, axis=0).astype(np.uint8), pv.spacing, pv.probs.shape[0])


def predict_case(net: SegNet, image: Volume, sweep: SweepConfig) -> LabelVolume:
    return predict_labels(sliding_window_predict(net, image, sweep.window, sweep.overlap, sweep.batch_size))


# ---------------------------------------------------------------------------
# evaluation


def noise_stream_id(sample_id: str, std: float) -> int:
    """Stream id shared by every model evaluated on this (sample, std)."""
    return zlib.crc32(f"{sample_id}|{std!r}".encode())


def score(pred: LabelVolume, gt: LabelVolume, sample_id: str, std: float) -> list[MetricsRecord]:
    return [
        MetricsRecord(sample_id, organ, dsc_metric(pred, gt, organ), hausdorff_mm(pred, gt, organ), std)
        for organ in range(1, gt.num_classes)
    ]


def evaluate_cases(net: SegNet, cases: list[Case], noise_std: float, sweep: SweepConfig) -> list[MetricsRecord]:
    records = []
    for case in cases:
        noisy = add_gaussian_noise(case.image, sweep.noise_mean, noise_std, sweep.seed, noise_stream_id(case.sample_id, noise_std))
        pred = predict_case(net, noisy, sweep)
        gt = case.original_labels
        pred = resample_to_grid(pred, gt.dims, gt.spacing)
        records += score(pred, gt, case.sample_id, noise_std)
    return records


def evaluate_dataset(
    net: SegNet,
    manifest: Manifest,
    split: str = "test",
    noise_std: float = 0.0,
    sweep: SweepConfig | None = None,
    target_spacing=TARGET_SPACING,
) -> list[MetricsRecord]:
    sweep = sweep or SweepConfig()
    return evaluate_cases(net, load_split(manifest, split, target_spacing), noise_std, sweep)


def run_sweep(net: SegNet, manifest: Manifest, sweep: SweepConfig, split: str = "test", target_spacing=TARGET_SPACING):
    cases = load_split(manifest, split, target_spacing)
    records = []
    for std in sweep.noise_stds:
        records += evaluate_cases(net, cases, std, sweep)
    return records


# ---------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonRow:
    noise_std: float
    organ: str  # organ label, or "average"
    dsc_a: tuple[float, float]  # mean, std
    dsc_b: tuple[float, float]
    hd_a: tuple[float, float] | None
    hd_b: tuple[float, float] | None
    improvement: float  # mean DSC a - mean DSC b
    p_value: float | None
    hd_p_value: float | None = None


@dataclass
class MetricsTable:
    model_a: str
    model_b: str
    rows: list[ComparisonRow] = field(default_factory=list)

    def row(self, noise_std: float, organ) -> ComparisonRow:
        for r in self.rows:
            if r.noise_std == noise_std and r.organ == str(organ):
                return r
        raise KeyError((noise_std, organ))


def _mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def compare_models(records_a, records_b, model_a: str = "A", model_b: str = "B") -> MetricsTable:
    """Per (noise std, organ) means, DSC improvement of A over B, two-sided U-test p-values."""
    key = lambda r: (r.noise_std, r.organ, r.sample_id)  # noqa: E731
    index_a = {key(r): r for r in records_a}
    index_b = {key(r): r for r in records_b}
    if set(index_a) != set(index_b):
        missing = sorted(set(index_a) ^ set(index_b))[:5]
        raise ValueError(f"record sets cover different (std, organ, sample) keys, e.g. {missing}")
    groups = defaultdict(list)
    for k in sorted(index_a):
        groups[k[:2]].append(k)

    table = MetricsTable(model_a, model_b)
    by_std = defaultdict(list)
    for (std, organ), keys in sorted(groups.items()):
        da = [index_a[k].dsc for k in keys]
        db = [index_b[k].dsc for k in keys]
        ha = [index_a[k].hd_mm for k in keys if index_a[k].hd_mm is not None]
        hb = [index_b[k].hd_mm for k in keys if index_b[k].hd_mm is not None]
        hd_p = mann_whitney_u(ha, hb)[1] if ha and hb else None
        row = ComparisonRow(
            noise_std=std,
            organ=str(organ),
            dsc_a=_mean_std(da),
            dsc_b=_mean_std(db),
            hd_a=_mean_std(ha) if ha else None,
            hd_b=_mean_std(hb) if hb else None,
            improvement=float(np.mean(da) - np.mean(db)),
            p_value=mann_whitney_u(da, db)[1],
            hd_p_value=hd_p,
        )
        table.rows.append(row)
        by_std[std].append(row)
    for std, rows in by_std.items():
        ma = float(np.mean([r.dsc_a[0] for r in rows]))
        mb = float(np.mean([r.dsc_b[0] for r in rows]))
        table.rows.append(ComparisonRow(std, "average", (ma, float("nan")), (mb, float("nan")), None, None, ma - mb, None))
    return table


REPORT_FIELDS = [
    "noise_std", "organ",
    "dsc_mean_a", "dsc_std_a", "dsc_mean_b", "dsc_std_b",
    "improvement", "p_value",
    "hd_mean_a", "hd_std_a", "hd_mean_b", "hd_std_b", "hd_p_value",
]


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "N/A"
    return f"{v:.6g}"


def write_report(table: MetricsTable, out_dir: str | os.PathLike) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "comparison.csv", out / "comparison.json"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in table.rows:
            hd_a = r.hd_a or (None, None)
            hd_b = r.hd_b or (None, None)
            w.writerow([
                repr(r.noise_std), r.organ,
                _fmt(r.dsc_a[0]), _fmt(r.dsc_a[1]), _fmt(r.dsc_b[0]), _fmt(r.dsc_b[1]),
                _fmt(r.improvement), _fmt(r.p_value),
                _fmt(hd_a[0]), _fmt(hd_a[1]), _fmt(hd_b[0]), _fmt(hd_b[1]), _fmt(r.hd_p_value),
            ])
    summary = {"model_a": table.model_a, "model_b": table.model_b, "per_std": {}}
    for r in table.rows:
        entry = summary["per_std"].setdefault(repr(r.noise_std), {"improvement": {}, "p_value": {}})
        if r.organ == "average":
            entry["average"] = {"dsc_a": r.dsc_a[0], "dsc_b": r.dsc_b[0], "improvement": r.improvement}
        else:
            entry["improvement"][r.organ] = r.improvement
            entry["p_value"][r.organ] = r.p_value
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
