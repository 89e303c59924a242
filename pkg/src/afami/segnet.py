"""Miniature U-shaped encoder-decoder with feature tap and feature injection.

Encoder block ``e{i}`` is a 3x3x3 conv + ReLU producing the block feature
``f_i`` (``base * 2**(i-1)`` channels at ``1 / 2**(i-1)`` resolution); every
block but the last then halves resolution with a stride-2 conv + ReLU that
feeds block ``i+1``. Decoder block ``d{j}`` upsamples, concatenates ``f_j``
and applies conv + ReLU. A 1x1x1 head maps to class logits.

``f_i`` is the tap/injection point: a replacement feeds both the downsampling
conv of block ``i`` and the skip connection into ``d{i}``.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .rng import stream

CKPT_MAGIC = b"MICKPT01"


@dataclass
class NetConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 1
    num_classes: int = 4
    kernel_size: int = 3
    seed: int = 0
    patch_size: tuple[int, int, int] | None = None

    def __post_init__(self) -> None:
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.patch_size is not None:
            self.patch_size = tuple(int(p) for p in self.patch_size)
            check_spatial(self.patch_size, self.depth)

    def channels(self, i: int) -> int:
        return self.base_channels * 2 ** (i - 1)

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """(name, shape) of every parameter in declared block order."""
        k = self.kernel_size
        shapes = []
        for i in range(1, self.depth + 1):
            cin = self.in_channels if i == 1 else self.channels(i - 1)
            shapes += [(f"e{i}.conv.w", (self.channels(i), cin, k, k, k)), (f"e{i}.conv.b", (self.channels(i),))]
            if i < self.depth:
                c = self.channels(i)
                shapes += [(f"e{i}.down.w", (c, c, k, k, k)), (f"e{i}.down.b", (c,))]
        for j in range(self.depth - 1, 0, -1):
            cin = self.channels(j + 1) + self.channels(j)
            shapes += [(f"d{j}.conv.w", (self.channels(j), cin, k, k, k)), (f"d{j}.conv.b", (self.channels(j),))]
        shapes += [("head.w", (self.num_classes, self.channels(1), 1, 1, 1)), ("head.b", (self.num_classes,))]
        return shapes


def check_spatial(dims, depth: int) -> None:
    f = 2 ** (depth - 1)
    if any(d % f for d in dims):
        raise ValueError(f"spatial dims {tuple(dims)} must be divisible by {f} for depth {depth}")


class SegNet:
    def __init__(self, cfg: NetConfig, params: dict[str, Node]) -> None:
        self.cfg = cfg
        self.params = params

    @property
    def depth(self) -> int:
        return self.cfg.depth

    def parameters(self) -> list[tuple[str, Node]]:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def tap_shape(self, x_shape, i: int) -> tuple[int, ...]:
        f = 2 ** (i - 1)
        B, _, Z, Y, X = x_shape
        return (B, self.cfg.channels(i), Z // f, Y // f, X // f)

    def _conv(self, name: str, h: Node, stride: int = 1) -> Node:
        w, b = self.params[f"{name}.w"], self.params[f"{name}.b"]
        return ad.conv3d(h, w, b, stride=stride, padding=w.shape[-1] // 2)

    def _check_input(self, x: Node) -> None:
        if x.value.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected input (B, {self.cfg.in_channels}, Z, Y, X), got {x.shape}")
        check_spatial(x.shape[2:], self.depth)

    def _check_block(self, i: int) -> None:
        if not 1 <= i <= self.depth:
            raise ValueError(f"block index must be in [1, {self.depth}], got {i}")

    def encode(self, x: Node, inject: tuple[int, Node] | None = None, cached: list[Node] | None = None) -> list[Node]:
        """Block features f_1..f_L, with f_i replaced when ``inject=(i, node)``."""
        stop = inject[0] if inject is not None else None
        feats: list[Node] = []
        h = x
        for i in range(1, self.depth + 1):
            if i == stop:
                f = inject[1]
            elif stop is not None and i < stop and cached is not None:
                f = cached[i - 1]
            else:
                f = ad.relu(self._conv(f"e{i}.conv", h))
            feats.append(f)
            if i == self.depth:
                break
            # the downsampled output only feeds e{i+1}.conv
            if stop is None or i + 1 > stop or (i + 1 < stop and cached is None):
                h = ad.relu(self._conv(f"e{i}.down", f, stride=2))
        return feats

    def decode(self, feats: list[Node]) -> Node:
        d = feats[-1]
        for j in range(self.depth - 1, 0, -1):
            d = ad.concat_channels(ad.upsample_nearest(d, 2), feats[j - 1])
            d = ad.relu(self._conv(f"d{j}.conv", d))
        return self._conv("head", d)

    def forward_clean(self, x) -> Node:
        x = ad.constant(x)
        self._check_input(x)
        return self.decode(self.encode(x))

    def forward_with_tap(self, x, i: int, return_features: bool = False):
        """Clean logits plus block feature f_i tagged for gradient capture."""
        x = ad.constant(x)
        self._check_input(x)
        self._check_block(i)
        feats = self.encode(x)
        ad.tap(feats[i - 1], f"f{i}")
        logits = self.decode(feats)
        if return_features:
            return logits, feats[i - 1], feats
        return logits, feats[i - 1]

    def forward_with_injection(self, x, i: int, replacement, cached: list[Node] | None = None) -> Node:
        """Logits with ``replacement`` substituted for f_i.

        ``cached`` may hold block features from a clean pass on the same ``x``;
        features of blocks before ``i`` are then reused instead of recomputed.
        """
        x = ad.constant(x)
        self._check_input(x)
        self._check_block(i)
        rep = ad.constant(replacement)
        expected = self.tap_shape(x.shape, i)
        if rep.shape != expected:
            raise ValueError(f"replacement for f{i} must have shape {expected}, got {rep.shape}")
        return self.decode(self.encode(x, inject=(i, rep), cached=cached))


def build(cfg: NetConfig, dtype=np.float32) -> SegNet:
    rng = stream(cfg.seed, "init")
    params = {}
    for name, shape in cfg.layer_shapes():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        else:
            value = np.zeros(shape)
        params[name] = ad.param(value.astype(dtype), tag=name)
    return SegNet(cfg, params)


def default_attack_layer(depth: int) -> int:
    return math.ceil(depth / 2)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: SegNet, path: str | os.PathLike, step: int) -> None:
    header = {
        "net": asdict(net.cfg),
        "step": int(step),
        "params": [[name, list(p.shape)] for name, p in net.parameters()],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for _, p in net.parameters():
            fh.write(p.value.astype("<f4").tobytes(order="C"))


def load_checkpoint(path: str | os.PathLike, dtype=np.float32) -> tuple[SegNet, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {blob[:8]!r})")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12 : 12 + hlen])
    cfg = NetConfig(**header["net"])
    offset = 12 + hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
        params[name] = ad.param(arr.astype(dtype), tag=name)
        offset += 4 * n
    if offset != len(blob):
        raise ValueError(f"{path}: payload length does not match header")
    expected = [n for n, _ in cfg.layer_shapes()]
    if list(params) != expected:
        raise ValueError(f"{path}: parameter list does not match the network config")
    return SegNet(cfg, params), header
