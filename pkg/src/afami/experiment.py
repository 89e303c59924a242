"""Desk-scale baseline vs AFA-MI experiment with on-disk caching.

Each (model, seed) run lives in its own directory holding the checkpoint,
the training log, the sweep records and a ``run.json`` that stores the
config it was produced from. A run is reused only when that config matches.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluate import NOISE_LADDER, SweepConfig, compare_models, run_sweep, write_report
from .metrics import MetricsRecord, mann_whitney_u, read_records, write_records
from .phantom import PhantomConfig, generate_dataset
from .segnet import NetConfig, load_checkpoint
from .train import TrainConfig, train
from .volume import read_manifest

log = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    root: str = "runs/desk"
    num_samples: int = 20
    data_seed: int = 42
    iterations: int = 1500
    train_seeds: tuple[int, ...] = (0, 1, 2)
    noise_stds: tuple[float, ...] = NOISE_LADDER
    focus_std: float = 0.01
    net: NetConfig = field(default_factory=lambda: NetConfig(depth=3, base_channels=8))

    def train_config(self, model: str, seed: int) -> TrainConfig:
        return TrainConfig(
            manifest=str(Path(self.root) / "data" / "manifest.json"),
            output_dir=str(Path(self.root) / f"{model}_seed{seed}"),
            iterations=self.iterations,
            net=dataclasses.replace(self.net),
            afa={} if model == "afa" else None,
            seed=seed,
        )


def _signature(obj) -> str:
    return json.dumps(dataclasses.asdict(obj), sort_keys=True, default=str)


def ensure_data(cfg: DeskConfig) -> Path:
    data = Path(cfg.root) / "data"
    manifest = data / "manifest.json"
    phantom = PhantomConfig(seed=cfg.data_seed)
    stamp = data / "phantom.json"
    sig = json.dumps({"phantom": _signature(phantom), "n": cfg.num_samples})
    if not (manifest.is_file() and stamp.is_file() and stamp.read_text() == sig):
        generate_dataset(phantom, cfg.num_samples, data)
        stamp.write_text(sig)
    return manifest


def ensure_run(cfg: DeskConfig, model: str, seed: int) -> dict:
    """Train and sweep one model unless a matching cached run exists."""
    tcfg = cfg.train_config(model, seed)
    out = Path(tcfg.output_dir)
    meta_path = out / "run.json"
    sig = {"train": _signature(tcfg), "noise_stds": list(cfg.noise_stds)}
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text())
        if meta["signature"] == sig and (out / "sweep.csv").is_file():
            return meta
    log.info("training %s seed %d", model, seed)
    res = train(tcfg)
    net, _ = load_checkpoint(res.checkpoint)
    t0 = time.perf_counter()
    records = run_sweep(net, read_manifest(tcfg.manifest), SweepConfig(noise_stds=cfg.noise_stds), "test")
    write_records(records, out / "sweep.csv")
    meta = {
        "signature": sig,
        "model": model,
        "seed": seed,
        "train_wall_seconds": res.wall_seconds,
        "eval_wall_seconds": time.perf_counter() - t0,
        "checkpoint": str(res.checkpoint),
    }
    meta_path.write_text(json.dumps(meta, indent=2))
    return meta


def mean_dsc(records: list[MetricsRecord], std: float) -> float:
    return float(np.mean([r.dsc for r in records if r.noise_std == std]))


def summarize(cfg: DeskConfig) -> dict:
    """Per-seed mean DSC, the seed-wise win count and a pooled one-sided test."""
    root = Path(cfg.root)
    runs = {}
    for model in ("baseline", "afa"):
        for seed in cfg.train_seeds:
            out = Path(cfg.train_config(model, seed).output_dir)
            meta = json.loads((out / "run.json").read_text())
            runs[model, seed] = (meta, read_records(out / "sweep.csv"))
    per_seed = {}
    for seed in cfg.train_seeds:
        (mb, rb), (ma, ra) = runs["baseline", seed], runs["afa", seed]
        per_seed[str(seed)] = {
            "baseline": {str(s): mean_dsc(rb, s) for s in cfg.noise_stds},
            "afa": {str(s): mean_dsc(ra, s) for s in cfg.noise_stds},
            "baseline_train_wall_seconds": mb["train_wall_seconds"],
            "afa_train_wall_seconds": ma["train_wall_seconds"],
        }
        write_report(compare_models(ra, rb, "afa", "baseline"), root / f"compare_seed{seed}")
    focus = str(cfg.focus_std)
    pooled_afa = [r.dsc for s in cfg.train_seeds for r in runs["afa", s][1] if r.noise_std == cfg.focus_std]
    pooled_base = [r.dsc for s in cfg.train_seeds for r in runs["baseline", s][1] if r.noise_std == cfg.focus_std]
    summary = {
        "per_seed": per_seed,
        "focus_std": cfg.focus_std,
        "afa_wins": sum(v["afa"][focus] >= v["baseline"][focus] for v in per_seed.values()),
        "pooled_p_greater": mann_whitney_u(pooled_afa, pooled_base, "greater")[1],
    }
    (root / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def run(cfg: DeskConfig, models=("baseline", "afa")) -> dict:
    ensure_data(cfg)
    for seed in cfg.train_seeds:
        for model in models:
            ensure_run(cfg, model, seed)
    return summarize(cfg)
