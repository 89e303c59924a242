"""Statistical invariants checked on the cached desk experiment (see test_acceptance)."""

from pathlib import Path

import numpy as np
import pytest

from afami.experiment import DeskConfig, run
from afami.metrics import read_records
from test_acceptance import DESK_ROOT


@pytest.fixture(scope="module")
def baseline_records():
    cfg = DeskConfig(root=str(DESK_ROOT))
    run(cfg)
    recs = []
    for seed in cfg.train_seeds:
        recs += [(seed, r) for r in read_records(Path(cfg.train_config("baseline", seed).output_dir) / "sweep.csv")]
    return cfg, recs


def paired(recs, std):
    return {(seed, r.sample_id, r.organ): r.dsc for seed, r in recs if r.noise_std == std}


def test_no_significant_rise_along_noise_ladder(baseline_records):
    # paired over (seed, sample, organ): a step up the ladder may not raise DSC
    # by more than two standard errors of the mean paired difference
    cfg, recs = baseline_records
    stds = sorted(cfg.noise_stds)
    for lo, hi in zip(stds, stds[1:]):
        a, b = paired(recs, lo), paired(recs, hi)
        diff = np.array([b[k] - a[k] for k in a])
        se = diff.std(ddof=1) / np.sqrt(diff.size)
        assert diff.mean() <= 2 * se, (lo, hi, diff.mean(), se)


def test_largest_noise_costs_accuracy(baseline_records):
    cfg, recs = baseline_records
    clean, noisy = paired(recs, 0.0), paired(recs, max(cfg.noise_stds))
    assert np.mean(list(noisy.values())) < np.mean(list(clean.values())) - 0.02
