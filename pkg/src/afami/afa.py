"""Adversarial feature augmentation on an intermediate encoder feature.

One training step:

1. clean forward with a tap on block feature ``f_i``; backward of the clean
   segmentation loss to the tap gives ``grad``;
2. a Gaussian draw ``lam`` (mean 0, std 1, same shape as ``f_i``);
3. for every constraint ratio ``k``: FGSM step
   ``clamp_k(f_i + lam + eps * sign(grad))``, then moment injection (the clean
   feature re-normalized to the adversarial per-channel mean/std), then a
   forward pass with the injected feature in place of ``f_i``;
4. ``total = clean_weight * L_clean + adv_weight * mean_k L_k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .losses import LossConfig, logits_loss
from .segnet import SegNet

CLAMP_RATIOS = (0.1, 0.05, 0.025, 0.0125)


@dataclass
class AfaConfig:
    attack_layer: int | None = None  # None: ceil(depth / 2)
    epsilon: float = 0.003
    ratios: tuple[float, ...] = CLAMP_RATIOS
    loss: LossConfig = field(default_factory=LossConfig)
    sigma_eps: float = 1e-6
    clean_weight: float = 1.0
    adv_weight: float = 1.0
    lambda_per_ratio: bool = False
    lambda_scale: float = 1.0

    def __post_init__(self) -> None:
        self.ratios = tuple(float(r) for r in self.ratios)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if any(r <= 0 for r in self.ratios):
            raise ValueError(f"constraint ratios must be positive, got {self.ratios}")
        if self.sigma_eps <= 0:
            raise ValueError("sigma_eps must be positive")

    def layer(self, depth: int) -> int:
        i = self.attack_layer if self.attack_layer is not None else -(-depth // 2)
        if not 1 <= i <= depth:
            raise ValueError(f"attack layer {i} invalid for a depth-{depth} network")
        return i


@dataclass(frozen=True)
class Moments:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class AttackDraw:
    lam: np.ndarray
    grad: np.ndarray
    adv_features: dict[float, np.ndarray]
    clean_moments: Moments
    adv_moments: dict[float, Moments]


_STAT_AXES = (0, 2, 3, 4)


def compute_moments(f: np.ndarray) -> Moments:
    """Per-channel mean and population std over batch and spatial axes."""
    f = np.asarray(f)
    mu = f.mean(axis=_STAT_AXES, dtype=np.float64)
    sigma = np.sqrt(((f - mu[None, :, None, None, None]) ** 2).mean(axis=_STAT_AXES, dtype=np.float64))
    return Moments(mu, sigma)


def feature_gradient(net: SegNet, x: np.ndarray, g: np.ndarray, i: int, loss_cfg: LossConfig = LossConfig()):
    """Clean tap value, loss gradient at the tap, and the clean loss value."""
    logits, f = net.forward_with_tap(x, i)
    loss = logits_loss(logits, g, loss_cfg)
    ad.backward(loss, inputs=[f])
    return f.value, f.grad, loss.item()


def clamp_sr(f: np.ndarray, f_clean: np.ndarray, r: float) -> np.ndarray:
    """Clamp to ``[(1 - r) * min(f_clean), (1 + r) * max(f_clean)]``."""
    if f.shape != f_clean.shape:
        raise ValueError(f"shape mismatch {f.shape} vs {f_clean.shape}")
    if r <= 0:
        raise ValueError(f"ratio must be positive, got {r}")
    lo = (1.0 - r) * f_clean.min()
    hi = (1.0 + r) * f_clean.max()
    return np.clip(f, lo, hi)


def fgsm_feature(f_clean: np.ndarray, grad: np.ndarray, lam: np.ndarray, eps: float, r: float) -> np.ndarray:
    if not f_clean.shape == grad.shape == lam.shape:
        raise ValueError(f"shape mismatch: feature {f_clean.shape}, grad {grad.shape}, lambda {lam.shape}")
    dtype = f_clean.dtype
    # np.sign maps 0 to 0
    step = f_clean + lam.astype(dtype) + dtype.type(eps) * np.sign(grad).astype(dtype)
    return clamp_sr(step, f_clean, r).astype(dtype)


def inject_moments(f_clean, f_adv: np.ndarray, sigma_eps: float = 1e-6):
    """Re-normalize ``f_clean`` to the per-channel mean/std of ``f_adv``.

    The clean std is floored at ``sigma_eps`` (not offset by it), so the
    transfer is exact for every channel with std above the floor.

    With ``f_clean`` a :class:`Node` the result is differentiable in it
    (the clean moments are part of the graph; adversarial moments are
    constants). With an array, a plain array is returned.
    """
    adv = compute_moments(f_adv)
    if isinstance(f_clean, Node):
        if f_clean.shape != f_adv.shape:
            raise ValueError(f"shape mismatch {f_clean.shape} vs {f_adv.shape}")
        dt = f_clean.dtype
        mu = ad.mean(f_clean, _STAT_AXES, keepdims=True)
        centered = ad.sub(f_clean, mu)
        sigma = ad.sqrt(ad.mean(ad.mul(centered, centered), _STAT_AXES, keepdims=True))
        gain = (adv.sigma[None, :, None, None, None]).astype(dt)
        out = ad.div(ad.mul(centered, gain), ad.clamp_min(sigma, sigma_eps))
        return ad.add(out, adv.mu[None, :, None, None, None].astype(dt))
    f_clean = np.asarray(f_clean)
    if f_clean.shape != f_adv.shape:
        raise ValueError(f"shape mismatch {f_clean.shape} vs {f_adv.shape}")
    clean = compute_moments(f_clean)
    bc = lambda v: v[None, :, None, None, None]  # noqa: E731
    out = bc(adv.sigma) * (f_clean - bc(clean.mu)) / np.maximum(bc(clean.sigma), sigma_eps) + bc(adv.mu)
    return out.astype(f_clean.dtype)


@dataclass
class AfaDiagnostics:
    clean_loss: float
    adv_losses: dict[float, float]
    grad_l1_norm: float
    draw: AttackDraw | None = None


def afa_training_loss(
    net: SegNet,
    x: np.ndarray,
    g: np.ndarray,
    cfg: AfaConfig,
    rng: np.random.Generator,
    keep_draw: bool = False,
) -> tuple[Node, AfaDiagnostics]:
    """Combined clean + multi-ratio adversarial objective as one graph."""
    i = cfg.layer(net.depth)
    logits, tap, feats = net.forward_with_tap(x, i, return_features=True)
    clean = logits_loss(logits, g, cfg.loss)
    ad.backward(clean, inputs=[tap])
    f_clean, grad = tap.value, tap.grad
    dtype = f_clean.dtype

    def draw_lambda():
        return (cfg.lambda_scale * rng.standard_normal(f_clean.shape)).astype(dtype)

    lam = draw_lambda()
    adv_losses, adv_nodes = {}, []
    adv_feats, adv_moms = {}, {}
    for k in cfg.ratios:
        if cfg.lambda_per_ratio and adv_nodes:
            lam = draw_lambda()
        f_adv = fgsm_feature(f_clean, grad, lam, cfg.epsilon, k)
        f_noisy = inject_moments(f_clean, f_adv, cfg.sigma_eps)
        out = net.forward_with_injection(x, i, f_noisy, cached=feats)
        loss_k = logits_loss(out, g, cfg.loss)
        adv_nodes.append(loss_k)
        adv_losses[k] = loss_k.item()
        if keep_draw:
            adv_feats[k] = f_adv
            adv_moms[k] = compute_moments(f_adv)

    total = ad.scale(clean, cfg.clean_weight)
    if adv_nodes:
        adv_sum = adv_nodes[0]
        for n in adv_nodes[1:]:
            adv_sum = ad.add(adv_sum, n)
        total = ad.add(total, ad.scale(adv_sum, cfg.adv_weight / len(adv_nodes)))

    draw = None
    if keep_draw:
        draw = AttackDraw(lam, grad, adv_feats, compute_moments(f_clean), adv_moms)
    diag = AfaDiagnostics(clean.item(), adv_losses, float(np.abs(grad).sum(dtype=np.float64)), draw)
    return total, diag
