"""Train baseline and AFA-MI desk models for three seeds and compare them.

Usage: python scripts/run_desk_experiment.py [--root runs/desk] [--iterations 1500]

Results are cached per run; rerunning only redoes runs whose config changed.
The acceptance suite reads ``<root>/summary.json`` and the per-run metadata.
"""

import argparse
import json
import logging

from threadpoolctl import threadpool_limits

from afami.experiment import DeskConfig, run


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("--root", default="runs/desk")
    p.add_argument("--iterations", type=int, default=1500)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = DeskConfig(root=args.root, iterations=args.iterations, train_seeds=tuple(args.seeds))
    with threadpool_limits(limits=1):
        summary = run(cfg)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
