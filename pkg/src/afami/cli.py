"""Command-line entry point: ``afami <subcommand> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Worker threads for BLAS come from ``AFAMI_THREADS`` (default 1).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import gradcheck
from .afa import AfaConfig
from .evaluate import SweepConfig, compare_models, evaluate_dataset, predict_case, run_sweep, write_report
from .losses import LossConfig
from .metrics import read_records, write_records
from .phantom import PhantomConfig, generate_dataset
from .segnet import NetConfig, load_checkpoint
from .train import TARGET_SPACING, TrainConfig, train
from .volume import normalize_intensity, read_manifest, read_volume, resample, resample_to_grid, write_volume

THREADS_ENV = "AFAMI_THREADS"
RUN_KEYS = {"seed", "output_dir", "manifest", "num_samples", "phantom", "train", "sweep"}
NESTED = {
    TrainConfig: {"net": NetConfig, "loss": LossConfig, "afa": AfaConfig},
    AfaConfig: {"loss": LossConfig},
}

log = logging.getLogger("afami")


class ConfigError(Exception):
    pass


def check_keys(cls, data, where: str) -> None:
    """Reject keys that are not fields of ``cls``, recursing into nested sections."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{where}: unknown key {key!r}")
        sub = NESTED.get(cls, {}).get(key)
        if sub is not None and value is not None:
            check_keys(sub, value, f"{where}.{key}")


def make(cls, data: dict, where: str):
    check_keys(cls, data, where)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_run_config(path: str | os.PathLike) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(raw) - RUN_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown key {unknown[0]!r}")
    return raw


def _seeded(section: dict, raw: dict) -> dict:
    # one run seed feeds every module unless a section sets its own
    section = dict(section)
    if "seed" in raw:
        section.setdefault("seed", raw["seed"])
    return section


def _output_dir(raw: dict, default: str) -> Path:
    out = Path(raw.get("output_dir", default))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest_path(raw: dict, arg: str | None) -> Path:
    path = Path(arg or raw.get("manifest") or raw.get("train", {}).get("manifest", ""))
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    return path


def _sweep(raw: dict) -> SweepConfig:
    return make(SweepConfig, _seeded(raw.get("sweep", {}), raw), "sweep")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    raw = load_run_config(args.config)
    cfg = make(PhantomConfig, _seeded(raw.get("phantom", {}), raw), "phantom")
    n = int(raw.get("num_samples", 20))
    out = _output_dir(raw, "data")
    m = generate_dataset(cfg, n, out)
    print(f"wrote {n} phantoms ({len(m.train)} train / {len(m.test)} test) to {out}")
    return 0


def cmd_train(args) -> int:
    raw = load_run_config(args.config)
    section = _seeded(raw.get("train", {}), raw)
    if "output_dir" in raw:
        section.setdefault("output_dir", raw["output_dir"])
    check_keys(TrainConfig, section, "train")
    section["manifest"] = str(_manifest_path(raw, section.get("manifest")))
    cfg = make(TrainConfig, section, "train")
    res = train(cfg)
    print(f"checkpoint {res.checkpoint}\nlog {res.log_path}\nwall {res.wall_seconds:.1f} s")
    return 0


def _load_net(path: str):
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)[0]


def cmd_predict(args) -> int:
    raw = load_run_config(args.config)
    sweep = _sweep(raw)
    net = _load_net(args.checkpoint)
    manifest = read_manifest(_manifest_path(raw, args.manifest))
    out = _output_dir(raw, "runs/predict")
    image = read_volume(args.image)
    spacing = tuple(raw.get("train", {}).get("target_spacing", TARGET_SPACING))
    pred = predict_case(net, normalize_intensity(resample(image, spacing), manifest.intensity), sweep)
    pred = resample_to_grid(pred, image.dims, image.spacing)
    target = out / f"{Path(args.image).stem}_pred.mivol"
    write_volume(pred, target)
    print(target)
    return 0


def cmd_eval(args) -> int:
    raw = load_run_config(args.config)
    sweep = _sweep(raw)
    net = _load_net(args.checkpoint)
    manifest = read_manifest(_manifest_path(raw, args.manifest))
    out = _output_dir(raw, "runs/eval")
    records = evaluate_dataset(net, manifest, args.split, args.std, sweep)
    write_records(records, out / "metrics.csv")
    print(out / "metrics.csv")
    return 0


def cmd_sweep(args) -> int:
    raw = load_run_config(args.config)
    sweep = _sweep(raw)
    net = _load_net(args.checkpoint)
    manifest = read_manifest(_manifest_path(raw, args.manifest))
    out = _output_dir(raw, "runs/sweep")
    write_records(run_sweep(net, manifest, sweep, args.split), out / "sweep.csv")
    print(out / "sweep.csv")
    return 0


def cmd_compare(args) -> int:
    for p in (args.records_a, args.records_b):
        if not Path(p).is_file():
            raise ConfigError(f"records file not found: {p}")
    table = compare_models(read_records(args.records_a), read_records(args.records_b), args.name_a, args.name_b)
    csv_path, json_path = write_report(table, args.output_dir)
    print(f"{csv_path}\n{json_path}")
    return 0


def cmd_grad_check(args) -> int:
    report = gradcheck.run_suite(range(args.seeds))
    width = max(map(len, report))
    ok = True
    for op, err in report.items():
        passed = err <= gradcheck.TOLERANCE
        ok &= passed
        print(f"{op:<{width}}  max_rel_error {err:.3e}  {'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


def grad_check(seeds: int = 10) -> int:
    return cmd_grad_check(argparse.Namespace(seeds=seeds))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="afami", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="subcommand")
    sub.required = True

    s = sub.add_parser("gen-data", help="generate a phantom dataset and manifest")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="train a baseline or AFA-MI model")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("predict", help="sliding-window prediction for one image")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--manifest")
    s.set_defaults(fn=cmd_predict)

    for name, fn, help_ in (("eval", cmd_eval, "score one split at one noise level"), ("sweep", cmd_sweep, "score one split over the noise ladder")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--manifest")
        s.add_argument("--split", default="test", choices=["train", "test"])
        if name == "eval":
            s.add_argument("--std", type=float, default=0.0)
        s.set_defaults(fn=fn)

    s = sub.add_parser("compare", help="paired comparison of two records files")
    s.add_argument("records_a")
    s.add_argument("records_b")
    s.add_argument("--name-a", default="A")
    s.add_argument("--name-b", default="B")
    s.add_argument("--output-dir", default="runs/compare")
    s.set_defaults(fn=cmd_compare)

    s = sub.add_parser("grad-check", help="finite-difference check of every differentiable op")
    s.add_argument("--seeds", type=int, default=10)
    s.set_defaults(fn=cmd_grad_check)
    return p


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=_threads()):
            return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
