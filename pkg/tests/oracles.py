"""Slow, obviously-correct reference implementations used only by tests."""

from __future__ import annotations

import itertools
import math

import numpy as np


def naive_conv3d(x, w, b, stride=1, padding=0):
    """Seven nested loops (batch, out channel, z, y, x, plus the kernel window sum)."""
    B, Ci, Z, Y, X = x.shape
    Co, _, kz, ky, kx = w.shape
    s, p = stride, padding
    xp = np.zeros((B, Ci, Z + 2 * p, Y + 2 * p, X + 2 * p))
    xp[:, :, p : p + Z, p : p + Y, p : p + X] = x
    Zo, Yo, Xo = (Z + 2 * p - kz) // s + 1, (Y + 2 * p - ky) // s + 1, (X + 2 * p - kx) // s + 1
    out = np.zeros((B, Co, Zo, Yo, Xo))
    for n in range(B):
        for co in range(Co):
            for z in range(Zo):
                for y in range(Yo):
                    for xx in range(Xo):
                        acc = b[co]
                        for ci in range(Ci):
                            for dz in range(kz):
                                for dy in range(ky):
                                    for dx in range(kx):
                                        acc += w[co, ci, dz, dy, dx] * xp[n, ci, z * s + dz, y * s + dy, xx * s + dx]
                        out[n, co, z, y, xx] = acc
    return out


def surface_points(mask: np.ndarray) -> list[tuple[int, int, int]]:
    pts = []
    nz, ny, nx = mask.shape
    for z, y, x in zip(*np.nonzero(mask)):
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            q = (z + dz, y + dy, x + dx)
            if not (0 <= q[0] < nz and 0 <= q[1] < ny and 0 <= q[2] < nx) or not mask[q]:
                pts.append((int(z), int(y), int(x)))
                break
    return pts


def brute_hausdorff(mask_a, mask_b, spacing_xyz) -> float:
    sx, sy, sz = spacing_xyz
    pa, pb = surface_points(mask_a), surface_points(mask_b)

    def directed(src, dst):
        worst = 0.0
        for a in src:
            best = min(math.sqrt(((a[0] - c[0]) * sz) ** 2 + ((a[1] - c[1]) * sy) ** 2 + ((a[2] - c[2]) * sx) ** 2) for c in dst)
            worst = max(worst, best)
        return worst

    return max(directed(pa, pb), directed(pb, pa))


def brute_dsc(mask_a, mask_b) -> float:
    a, b = int(mask_a.sum()), int(mask_b.sum())
    if a + b == 0:
        return 1.0
    inter = sum(1 for v in zip(mask_a.ravel(), mask_b.ravel()) if v[0] and v[1])
    return 2 * inter / (a + b)


def enumerate_u_pvalue(a, b, alternative="two-sided") -> float:
    """Exact U-test p-value by listing every way to assign ranks to sample a."""
    n1, n2 = len(a), len(b)
    pooled = sorted(list(a) + list(b))
    rank = {v: i + 1 for i, v in enumerate(pooled)}  # tie-free
    u_obs = sum(rank[v] for v in a) - n1 * (n1 + 1) / 2
    us = [sum(c) - n1 * (n1 + 1) / 2 for c in itertools.combinations(range(1, n1 + n2 + 1), n1)]
    total = len(us)
    p_ge = sum(u >= u_obs for u in us) / total
    p_le = sum(u <= u_obs for u in us) / total
    if alternative == "greater":
        return p_ge
    if alternative == "less":
        return p_le
    return min(1.0, 2 * min(p_ge, p_le))


def brute_moments(f):
    """Two-pass per-channel mean / population std over (batch, spatial)."""
    C = f.shape[1]
    mu, sd = np.zeros(C), np.zeros(C)
    for c in range(C):
        vals = [float(v) for v in f[:, c].ravel()]
        m = sum(vals) / len(vals)
        mu[c] = m
        sd[c] = math.sqrt(sum((v - m) ** 2 for v in vals) / len(vals))
    return mu, sd


def coverage_by_enumeration(dims, window, overlap):
    """Coverage count per voxel, enumerating window corners axis by axis from the stride rule."""
    cover = np.zeros(dims, dtype=int)
    starts = []
    for d, w in zip(dims, window):
        stride = max(1, int(math.floor((1 - overlap) * w + 0.5)))
        s = [c for c in range(d - w + 1) if c % stride == 0]
        if s[-1] != d - w:
            s.append(d - w)
        starts.append(s)
    for z in starts[0]:
        for y in starts[1]:
            for x in starts[2]:
                cover[z : z + window[0], y : y + window[1], x : x + window[2]] += 1
    return cover
