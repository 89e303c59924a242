"""Segmentation training losses on softmax probabilities (B, C, Z, Y, X)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.5
    smooth_eps: float = 1e-5

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.smooth_eps <= 0:
            raise ValueError(f"smooth_eps must be positive, got {self.smooth_eps}")


def _check(probs: Node, target: np.ndarray) -> None:
    if probs.shape != target.shape:
        raise ValueError(f"probabilities {probs.shape} and target {target.shape} differ in shape")
    if probs.value.ndim != 5 or probs.shape[1] < 2:
        raise ValueError(f"expected (B, C>=2, Z, Y, X) probabilities, got {probs.shape}")


def dice_loss(probs: Node, target: np.ndarray, smooth_eps: float = 1e-5) -> Node:
    """Mean over foreground classes of ``1 - (2 sum(p g) + eps) / (sum p + sum g + eps)``.

    Sums run over batch and all spatial positions; class 0 is excluded.
    """
    target = np.asarray(target, dtype=probs.dtype)
    _check(probs, target)
    axes = (0, 2, 3, 4)
    C = probs.shape[1]
    inter = ad.sum(ad.mul(probs, target), axes)
    denom = ad.add(ad.sum(probs, axes), target.sum(axis=axes) + smooth_eps)
    ratio = ad.div(ad.add(ad.scale(inter, 2.0), np.asarray(smooth_eps, probs.dtype)), denom)
    fg = np.ones(C, dtype=probs.dtype)
    fg[0] = 0
    mean_ratio = ad.scale(ad.sum(ad.mul(ratio, fg)), 1.0 / (C - 1))
    return ad.sub(np.ones((), probs.dtype), mean_ratio)


def cross_entropy_loss(probs: Node, target: np.ndarray) -> Node:
    """Mean over voxels of ``-sum_c g_c log p_c``; probabilities floored at 1e-12."""
    target = np.asarray(target, dtype=probs.dtype)
    _check(probs, target)
    logp = ad.log(ad.clamp_min(probs, PROB_FLOOR))
    per_voxel = ad.sum(ad.mul(logp, target), axis=1)
    return ad.scale(ad.mean(per_voxel), -1.0)


def seg_loss(probs: Node, target: np.ndarray, cfg: LossConfig = LossConfig()) -> Node:
    """``gamma * dice + (1 - gamma) * cross-entropy``."""
    if cfg.gamma == 1.0:
        return dice_loss(probs, target, cfg.smooth_eps)
    if cfg.gamma == 0.0:
        return cross_entropy_loss(probs, target)
    return ad.add(
        ad.scale(dice_loss(probs, target, cfg.smooth_eps), cfg.gamma),
        ad.scale(cross_entropy_loss(probs, target), 1.0 - cfg.gamma),
    )


def logits_loss(logits: Node, target: np.ndarray, cfg: LossConfig = LossConfig()) -> Node:
    return seg_loss(ad.softmax_channels(logits), target, cfg)
