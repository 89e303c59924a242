"""Reverse-mode automatic differentiation over numpy arrays.

Values are plain ``np.ndarray`` (activations laid out (batch, channels, z, y, x)).
A :class:`Node` wraps a value together with the closure that maps its output
adjoint to adjoints of its parents. ``backward`` walks the graph in reverse
topological order and accumulates adjoints, so a node feeding several
consumers receives the sum of their contributions.

Elementwise binary ops follow numpy broadcasting; the adjoint is summed back
to each operand's shape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from numpy.lib.stride_tricks import sliding_window_view

BackwardFn = Callable[[np.ndarray, tuple[bool, ...]], Sequence["np.ndarray | None"]]


class Node:
    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "tag", "_backward")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        backward: BackwardFn | None = None,
        op: str = "leaf",
        requires_grad: bool = False,
        tag: str | None = None,
    ) -> None:
        self.value = value
        self.parents = parents
        self.op = op
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad: np.ndarray | None = None
        self.tag = tag

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", tag={self.tag!r}" if self.tag else ""
        return f"Node(op={self.op}, shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def param(value: np.ndarray, tag: str | None = None) -> Node:
    """Trainable leaf."""
    return Node(np.asarray(value), requires_grad=True, tag=tag)


def constant(value) -> Node:
    return value if isinstance(value, Node) else Node(np.asarray(value))


def detach(a: Node) -> Node:
    return Node(a.value)


def tap(a: Node, tag: str) -> Node:
    """Mark ``a`` as a capture point; ``backward`` fills its ``grad``."""
    a.tag = tag
    return a


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Node, inputs: Iterable[Node] | None = None) -> None:
    """Populate ``.grad`` of every differentiable node the loss depends on.

    With ``inputs`` given, only adjoints on paths from those nodes to the
    loss are computed (parameter gradients elsewhere are skipped).
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    if inputs is None:
        wanted = {id(n) for n in order if n.requires_grad}
    else:
        wanted = {id(n) for n in inputs}
        for n in order:
            if any(id(p) in wanted for p in n.parents):
                wanted.add(id(n))
    for n in order:
        n.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.grad is None or node._backward is None or id(node) not in wanted:
            continue
        needs = tuple(p.requires_grad and id(p) in wanted for p in node.parents)
        if not any(needs):
            continue
        grads = node._backward(node.grad, needs)
        for p, g, need in zip(node.parents, grads, needs):
            if not need or g is None:
                continue
            if p.grad is None:
                p.grad = np.array(g, dtype=p.value.dtype, copy=True)
            else:
                p.grad += g


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Node:
    a, b = constant(a), constant(b)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None, _unbroadcast(g, b.shape) if needs[1] else None)

    return Node(a.value + b.value, (a, b), bw, "add")


def sub(a, b) -> Node:
    a, b = constant(a), constant(b)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None, _unbroadcast(-g, b.shape) if needs[1] else None)

    return Node(a.value - b.value, (a, b), bw, "sub")


def mul(a, b) -> Node:
    a, b = constant(a), constant(b)

    def bw(g, needs):
        return (
            _unbroadcast(g * b.value, a.shape) if needs[0] else None,
            _unbroadcast(g * a.value, b.shape) if needs[1] else None,
        )

    return Node(a.value * b.value, (a, b), bw, "mul")


def div(a, b) -> Node:
    a, b = constant(a), constant(b)

    def bw(g, needs):
        ga = _unbroadcast(g / b.value, a.shape) if needs[0] else None
        gb = _unbroadcast(-g * a.value / (b.value * b.value), b.shape) if needs[1] else None
        return ga, gb

    return Node(a.value / b.value, (a, b), bw, "div")


def scale(a: Node, c: float) -> Node:
    c = a.value.dtype.type(c)
    return Node(a.value * c, (a,), lambda g, needs: (g * c,), "scale")


def log(a: Node) -> Node:
    return Node(np.log(a.value), (a,), lambda g, needs: (g / a.value,), "log")


def sqrt(a: Node) -> Node:
    out = np.sqrt(a.value)
    return Node(out, (a,), lambda g, needs: (g * 0.5 / out,), "sqrt")


def relu(a: Node) -> Node:
    mask = a.value > 0
    # subgradient at 0 is 0
    return Node(np.where(mask, a.value, 0).astype(a.dtype), (a,), lambda g, needs: (g * mask,), "relu")


def clamp_min(a: Node, lo: float) -> Node:
    mask = a.value >= lo
    out = np.maximum(a.value, a.value.dtype.type(lo))
    return Node(out, (a,), lambda g, needs: (g * mask,), "clamp_min")


# ---------------------------------------------------------------------------
# reductions


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    return tuple(a % ndim for a in (axis if isinstance(axis, tuple) else (axis,)))


def sum(a: Node, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    axes = _axes(axis, a.value.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def bw(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return Node(np.asarray(out), (a,), bw, "sum")


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    axes = _axes(axis, a.value.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axes, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# shape ops


def concat_channels(a: Node, b: Node) -> Node:
    if a.shape[:1] != b.shape[:1] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concat {a.shape} and {b.shape} along channels")
    ca = a.shape[1]

    def bw(g, needs):
        return (g[:, :ca] if needs[0] else None, g[:, ca:] if needs[1] else None)

    return Node(np.concatenate([a.value, b.value], axis=1), (a, b), bw, "concat_channels")


def upsample_nearest(a: Node, factor: int = 2) -> Node:
    """Replicate every spatial voxel ``factor`` times per axis."""
    B, C, Z, Y, X = a.shape
    f = factor
    out = np.broadcast_to(a.value[:, :, :, None, :, None, :, None], (B, C, Z, f, Y, f, X, f))
    out = out.reshape(B, C, Z * f, Y * f, X * f)

    def bw(g, needs):
        return (g.reshape(B, C, Z, f, Y, f, X, f).sum(axis=(3, 5, 7)),)

    return Node(out, (a,), bw, "upsample_nearest")


def softmax_channels(a: Node) -> Node:
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g, needs):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Node(s, (a,), bw, "softmax_channels")


# ---------------------------------------------------------------------------
# convolution


def _triple(v) -> tuple[int, int, int]:
    return (v, v, v) if isinstance(v, int) else tuple(int(t) for t in v)


def _conv_shift(xp: np.ndarray, w: np.ndarray, out_sp: tuple[int, int, int]):
    """Stride-1 cross-correlation as one small GEMM per kernel offset.

    Works on the flattened padded grid: the output anchored at flat index j
    reads input j + offset, so every operand is a contiguous slice.
    """
    B, Ci, Zp, Yp, Xp = xp.shape
    Co, _, kz, ky, kx = w.shape
    N = Zp * Yp * Xp
    flat = xp.reshape(B, Ci, N)
    offsets = [(dz, dy, dx, dz * Yp * Xp + dy * Xp + dx) for dz in range(kz) for dy in range(ky) for dx in range(kx)]
    M = N - offsets[-1][3]
    # offset-major copy so each (Co, Ci) slice is BLAS-contiguous
    wk = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1))
    acc = np.zeros((B, Co, N), dtype=xp.dtype)
    tmp = np.empty((B, Co, M), dtype=xp.dtype)
    for dz, dy, dx, off in offsets:
        np.matmul(wk[dz, dy, dx], flat[:, :, off : off + M], out=tmp)
        acc[:, :, :M] += tmp
    Zo, Yo, Xo = out_sp
    return acc.reshape(B, Co, Zp, Yp, Xp)[:, :, :Zo, :Yo, :Xo], offsets, M, wk


def conv3d(x: Node, w: Node, b: Node, stride=1, padding=0) -> Node:
    """3D cross-correlation, x (B,Ci,Z,Y,X), w (Co,Ci,kz,ky,kx), b (Co,)."""
    s, p = _triple(stride), _triple(padding)
    B, Ci, Z, Y, X = x.shape
    Co, Ci_w, kz, ky, kx = w.shape
    if Ci != Ci_w or b.shape != (Co,):
        raise ValueError(f"conv3d shape mismatch: input {x.shape}, weight {w.shape}, bias {b.shape}")
    out_sp = tuple((n + 2 * pp - k) // ss + 1 for n, pp, k, ss in zip((Z, Y, X), p, (kz, ky, kx), s))
    if min(out_sp) < 1:
        raise ValueError(f"conv3d output would be empty for input {x.shape} and kernel {w.shape}")
    Zo, Yo, Xo = out_sp
    xp = np.pad(x.value, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))
    Zp, Yp, Xp = xp.shape[2:]
    wv = w.value

    if s == (1, 1, 1):
        out, offsets, M, wk = _conv_shift(xp, wv, out_sp)
        out = out + b.value[None, :, None, None, None]

        def bw(g, needs):
            gpad = np.zeros((B, Co, Zp * Yp * Xp), dtype=g.dtype)
            gpad.reshape(B, Co, Zp, Yp, Xp)[:, :, :Zo, :Yo, :Xo] = g
            gm = gpad[:, :, :M]
            gx = gw = gb = None
            if needs[0]:
                gxp = np.zeros((B, Ci, Zp * Yp * Xp), dtype=g.dtype)
                tmp = np.empty((B, Ci, M), dtype=g.dtype)
                for dz, dy, dx, off in offsets:
                    np.matmul(wk[dz, dy, dx].T, gm, out=tmp)
                    gxp[:, :, off : off + M] += tmp
                gx = gxp.reshape(B, Ci, Zp, Yp, Xp)[:, :, p[0] : p[0] + Z, p[1] : p[1] + Y, p[2] : p[2] + X]
            if needs[1]:
                flat = xp.reshape(B, Ci, -1)
                gw = np.empty_like(wv)
                for dz, dy, dx, off in offsets:
                    gw[:, :, dz, dy, dx] = np.matmul(gm, flat[:, :, off : off + M].transpose(0, 2, 1)).sum(axis=0)
            if needs[2]:
                gb = g.sum(axis=(0, 2, 3, 4))
            return gx, gw, gb

        return Node(out, (x, w, b), bw, "conv3d")

    # strided: im2col
    win = sliding_window_view(xp, (kz, ky, kx), axis=(2, 3, 4))[:, :, :: s[0], :: s[1], :: s[2]]
    win = win[:, :, :Zo, :Yo, :Xo]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(B * Zo * Yo * Xo, Ci * kz * ky * kx)
    wmat = wv.reshape(Co, -1)
    out = (cols @ wmat.T + b.value).reshape(B, Zo, Yo, Xo, Co).transpose(0, 4, 1, 2, 3)

    def bw_strided(g, needs):
        gmat = g.transpose(0, 2, 3, 4, 1).reshape(-1, Co)
        gx = gw = gb = None
        if needs[0]:
            gcols = (gmat @ wmat).reshape(B, Zo, Yo, Xo, Ci, kz, ky, kx)
            gxp = np.zeros_like(xp)
            for dz in range(kz):
                for dy in range(ky):
                    for dx in range(kx):
                        gxp[
                            :, :,
                            dz : dz + s[0] * Zo : s[0],
                            dy : dy + s[1] * Yo : s[1],
                            dx : dx + s[2] * Xo : s[2],
                        ] += gcols[..., dz, dy, dx].transpose(0, 4, 1, 2, 3)
            gx = gxp[:, :, p[0] : p[0] + Z, p[1] : p[1] + Y, p[2] : p[2] + X]
        if needs[1]:
            gw = (gmat.T @ cols).reshape(wv.shape)
        if needs[2]:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    return Node(np.ascontiguousarray(out), (x, w, b), bw_strided, "conv3d")


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every element."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error, guarded for all-zero gradients."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom)
