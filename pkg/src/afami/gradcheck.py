"""Finite-difference gradient suite over every differentiable op, in float64.

Each case builds random inputs from a seed and a function from input arrays
to an output node. The output is reduced to a scalar with a fixed random
projection, so every output element contributes to the checked gradient.
Inputs to rectifier-like ops are pushed at least ``KINK_MARGIN`` away from
the non-differentiable point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .losses import LossConfig, cross_entropy_loss, dice_loss, logits_loss, seg_loss
from .rng import stream

TOLERANCE = 1e-4
STEP = 1e-3
KINK_MARGIN = 1e-2
MAX_REDRAWS = 200

Builder = Callable[[np.random.Generator], tuple[list[np.ndarray], Callable[..., ad.Node]]]


def _away_from(x: np.ndarray, point: float = 0.0) -> np.ndarray:
    d = x - point
    return np.where(np.abs(d) < KINK_MARGIN, point + np.copysign(KINK_MARGIN, d) + d, x)


def _act(rng, shape=(2, 3, 2, 3, 2)):
    return rng.standard_normal(shape)


def _probs(rng, shape=(2, 3, 2, 3, 2)):
    # kept well inside the simplex so log's curvature does not swamp the O(h^2) term
    e = np.exp(0.5 * rng.standard_normal(shape))
    return e / e.sum(axis=1, keepdims=True)


def _onehot(rng, shape=(2, 3, 2, 3, 2)):
    lab = rng.integers(0, shape[1], size=(shape[0],) + shape[2:])
    return np.moveaxis(np.eye(shape[1])[lab], -1, 1)


def _conv_case(stride, padding):
    def build(rng):
        x = rng.standard_normal((2, 2, 5, 4, 5))
        w = rng.standard_normal((3, 2, 3, 3, 3)) * 0.3
        b = rng.standard_normal(3)
        return [x, w, b], lambda x, w, b: ad.conv3d(x, w, b, stride=stride, padding=padding)

    return build


def _tiny_net_case(rng):
    # imported lazily: segnet depends on this module's siblings only
    from .segnet import NetConfig, build

    cfg = NetConfig(depth=2, base_channels=2, num_classes=3, seed=int(rng.integers(1 << 30)))
    net = build(cfg, dtype=np.float64)
    x = rng.standard_normal((1, 1, 4, 4, 4))
    target = _onehot(rng, (1, 3, 4, 4, 4))
    names = [n for n, _ in net.parameters()]
    values = [net.params[n].value.copy() for n in names]

    def f(x, *ps):
        for n, p in zip(names, ps):
            net.params[n] = p
        return logits_loss(net.forward_clean(x), target, LossConfig(0.5))

    return [x] + values, f


def _inject_case(rng):
    from .afa import inject_moments

    f_clean = np.abs(rng.standard_normal((2, 3, 2, 3, 2))) + 0.1
    f_adv = f_clean + rng.standard_normal(f_clean.shape) * 0.5
    return [f_clean], lambda f: inject_moments(f, f_adv, 1e-6)


def _diamond_case(rng):
    # x feeds two consumers that meet again: adjoints must add up
    x = rng.standard_normal((3, 4))
    return [x], lambda x: ad.mul(ad.add(ad.mul(x, x), ad.scale(x, 3.0)), ad.add(x, 1.0))


CASES: dict[str, Builder] = {
    "add": lambda r: ([_act(r), _act(r, (1, 3, 1, 1, 1))], ad.add),
    "sub": lambda r: ([_act(r), _act(r, (1, 3, 1, 1, 1))], ad.sub),
    "mul": lambda r: ([_act(r), _act(r, (1, 3, 1, 1, 1))], ad.mul),
    "div": lambda r: ([_act(r), np.abs(_act(r, (1, 3, 1, 1, 1))) + 0.5], ad.div),
    "scale": lambda r: ([_act(r)], lambda a: ad.scale(a, -1.7)),
    "log": lambda r: ([np.abs(_act(r)) + 0.5], ad.log),
    "sqrt": lambda r: ([np.abs(_act(r)) + 0.5], ad.sqrt),
    "relu": lambda r: ([_away_from(_act(r))], ad.relu),
    "clamp_min": lambda r: ([_away_from(_act(r), 0.2)], lambda a: ad.clamp_min(a, 0.2)),
    "sum": lambda r: ([_act(r)], lambda a: ad.sum(a, (0, 2, 3, 4))),
    "mean": lambda r: ([_act(r)], lambda a: ad.mean(a, (0, 2, 3, 4), keepdims=True)),
    "concat_channels": lambda r: ([_act(r), _act(r, (2, 2, 2, 3, 2))], ad.concat_channels),
    "upsample_nearest": lambda r: ([_act(r)], ad.upsample_nearest),
    "softmax_channels": lambda r: ([_act(r)], ad.softmax_channels),
    "conv3d_s1_p1": _conv_case(1, 1),
    "conv3d_s1_p0": _conv_case(1, 0),
    "conv3d_s2_p1": _conv_case(2, 1),
    "conv3d_s2_p0": _conv_case(2, 0),
    "dice_loss": lambda r: ([_probs(r)], lambda p, t=_onehot(r): dice_loss(p, t)),
    "cross_entropy_loss": lambda r: ([_probs(r)], lambda p, t=_onehot(r): cross_entropy_loss(p, t)),
    "seg_loss": lambda r: ([_probs(r)], lambda p, t=_onehot(r): seg_loss(p, t, LossConfig(0.5))),
    "inject_moments": _inject_case,
    "diamond_graph": _diamond_case,
    "tiny_net_seg_loss": _tiny_net_case,
}


def _kink_distance(out: ad.Node) -> float:
    """Smallest |input| over every rectifier in the graph below ``out``."""
    best, seen, todo = np.inf, set(), [out]
    while todo:
        n = todo.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        if n.op == "relu":
            best = min(best, float(np.abs(n.parents[0].value).min()))
        todo.extend(n.parents)
    return best


@dataclass
class CaseResult:
    op: str
    seed: int
    max_rel_error: float  # worst over the case's inputs


def check_case(op: str, seed: int, h: float = STEP) -> CaseResult:
    rng = stream(seed, "gradcheck", op)
    # redraw until no rectifier sits within KINK_MARGIN of its kink
    for _ in range(MAX_REDRAWS):
        inputs, fn = CASES[op](rng)
        inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
        out = fn(*[ad.constant(a) for a in inputs])
        if _kink_distance(out) >= KINK_MARGIN:
            break
    else:
        raise RuntimeError(f"{op}: no kink-free draw in {MAX_REDRAWS} attempts")
    proj = rng.standard_normal(out.shape)

    def scalar(*arrays):
        return ad.sum(ad.mul(fn(*arrays), proj))

    leaves = [ad.param(a.copy()) for a in inputs]
    ad.backward(scalar(*leaves))
    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(inputs[k])

        def f_k(v, k=k):
            args = [ad.constant(a) for a in inputs]
            args[k] = ad.constant(v)
            return scalar(*args).item()

        numeric = ad.finite_difference_gradient(f_k, inputs[k], h)
        worst = max(worst, ad.relative_error(analytic, numeric))
    return CaseResult(op, seed, worst)


def run_suite(seeds=range(10), ops=None, h: float = STEP) -> dict[str, float]:
    """Max relative error per op over ``seeds``."""
    report = {}
    for op in ops or CASES:
        report[op] = max(check_case(op, s, h).max_rel_error for s in seeds)
    return report
