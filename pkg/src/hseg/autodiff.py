"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the operators the embedding network needs are provided.  Tensors are
immutable once created by an op; the backward pass linearizes the graph
reachable from a scalar loss (a tape) and walks it in reverse creation
order exactly once.  No broadcasting beyond bias addition, no views.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# When enabled, every op asserts its output is finite (slow; for debugging).
CHECK_FINITE = False

_counter = 0


def _next_id() -> int:
    global _counter
    _counter += 1
    return _counter


class Tensor:
    """Dense n-d array node; float32 by default."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "vjp", "_id")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.parents = tuple(parents)
        self.vjp = vjp
        self._id = _next_id()
        if CHECK_FINITE and not np.isfinite(self.data).all():
            raise FloatingPointError("non-finite values in forward pass")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _as_const(x, dtype) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data.astype(dtype, copy=False)
    return np.asarray(x, dtype=dtype)


class Tape:
    """Linearization of the graph reachable from a root, in creation order."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node._id in seen:
                continue
            seen.add(node._id)
            stack.append((node, True))
            for p in node.parents:
                if p._id not in seen and p.requires_grad:
                    stack.append((p, False))
        order.sort(key=lambda t: t._id)  # recording order
        self.order = order

    def run(self, root: Tensor) -> None:
        for node in self.order:
            node.grad = None
        root.grad = np.ones_like(root.data)
        for node in reversed(self.order):
            if node.grad is None or node.vjp is None:
                continue
            for parent, g in node.vjp(node.grad):
                if not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.astype(parent.data.dtype, copy=True)
                else:
                    parent.grad += g


def backward(loss: Tensor, params: "list[Tensor] | None" = None) -> None:
    """Populate gradients for every reachable leaf; unreached params get zero."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    Tape(loss).run(loss)
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    C = x.shape[0]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    Ho, Wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(C * k * k, Ho * Wo)
    return cols, Ho, Wo


def _col2im(cols: np.ndarray, xshape, k: int, stride: int, padding: int) -> np.ndarray:
    C, H, W = xshape
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    xp = np.zeros((C, H + 2 * padding, W + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(C, k, k, Ho, Wo)
    for i in range(k):
        for j in range(k):
            xp[:, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += cols[:, i, j]
    return xp[:, padding : padding + H, padding : padding + W]


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation of [C,H,W] input with [Cout,Cin,k,k] weights + bias."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ValueError("conv2d expects [C,H,W] input and [Cout,Cin,k,k] weights")
    Cout, Cin, k, k2 = w.data.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k}x{k2}")
    if x.data.shape[0] != Cin:
        raise ValueError(f"input has {x.data.shape[0]} channels, weights expect {Cin}")
    if b.data.shape != (Cout,):
        raise ValueError(f"bias must have shape ({Cout},), got {b.data.shape}")
    if padding is None:
        padding = k // 2
    C, H, W = x.data.shape
    if H + 2 * padding < k or W + 2 * padding < k:
        raise ValueError("input smaller than kernel")
    cols, Ho, Wo = _im2col(x.data, k, stride, padding)
    out = (w.data.reshape(Cout, -1) @ cols).reshape(Cout, Ho, Wo) + b.data[:, None, None]

    def vjp(g):
        g2 = g.reshape(Cout, -1)
        gw = (g2 @ cols.T).reshape(w.data.shape)
        gb = g2.sum(axis=1)
        gcols = w.data.reshape(Cout, -1).T @ g2
        gx = _col2im(gcols, x.data.shape, k, stride, padding)
        return ((x, gx), (w, gw), (b, gb))

    return Tensor(out, parents=(x, w, b), vjp=vjp)


# ---------------------------------------------------------------------------
# pointwise and structural ops


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def vjp(g):
        return ((x, g * (x.data > 0)),)

    return Tensor(out, parents=(x,), vjp=vjp)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def vjp(g):
        return ((x, g * out * (1.0 - out)),)

    return Tensor(out, parents=(x,), vjp=vjp)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of nothing")
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pieces.append((t, g[tuple(idx)]))
        return tuple(pieces)

    return Tensor(out, parents=tuple(tensors), vjp=vjp)


def split_channels(x: Tensor, sizes: list[int]) -> list[Tensor]:
    """Split along the channel axis; inverse of concat on axis 0."""
    if sum(sizes) != x.data.shape[0]:
        raise ValueError(f"split sizes {sizes} do not cover {x.data.shape[0]} channels")
    outs = []
    lo = 0
    for s in sizes:
        lo_, hi_ = lo, lo + s

        def vjp(g, lo=lo_, hi=hi_):
            gx = np.zeros_like(x.data)
            gx[lo:hi] = g
            return ((x, gx),)

        outs.append(Tensor(x.data[lo_:hi_].copy(), parents=(x,), vjp=vjp))
        lo += s
    return outs


def maxpool2x2(x: Tensor) -> Tensor:
    C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2x2 needs even extents, got {H}x{W}")
    r = x.data.reshape(C, H // 2, 2, W // 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H // 2, W // 2, 4)
    idx = r.argmax(axis=-1)  # first max wins on ties
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gr = np.zeros_like(r)
        np.put_along_axis(gr, idx[..., None], g[..., None], axis=-1)
        gx = gr.reshape(C, H // 2, W // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H, W)
        return ((x, gx),)

    return Tensor(out, parents=(x,), vjp=vjp)


def nearest_upsample2x(x: Tensor) -> Tensor:
    C, H, W = x.data.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def vjp(g):
        return ((x, g.reshape(C, H, 2, W, 2).sum(axis=(2, 4))),)

    return Tensor(out, parents=(x,), vjp=vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")

    def vjp(g):
        return ((a, g), (b, g))

    return Tensor(a.data + b.data, parents=(a, b), vjp=vjp)


def scale(x: Tensor, c: float) -> Tensor:
    def vjp(g):
        return ((x, g * c),)

    return Tensor(x.data * c, parents=(x,), vjp=vjp)


def sum_all(x: Tensor) -> Tensor:
    def vjp(g):
        return ((x, np.full_like(x.data, float(g))),)

    return Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype), parents=(x,), vjp=vjp)


# ---------------------------------------------------------------------------
# losses


def l1_loss(pred: Tensor, target, mask) -> Tensor:
    """Mean over masked pixels of the per-pixel channel-summed L1 error.

    pred: [C,H,W]; target: [C,H,W]; mask: [H,W] binary.  The L1 subgradient
    uses sign(0) = 0.
    """
    t = _as_const(target, pred.data.dtype)
    m = _as_const(mask, pred.data.dtype)
    if t.shape != pred.data.shape:
        raise ValueError(f"target shape {t.shape} does not match pred {pred.data.shape}")
    if m.shape != pred.data.shape[1:]:
        raise ValueError(f"mask shape {m.shape} does not match spatial {pred.data.shape[1:]}")
    msum = m.sum()
    if msum == 0:
        raise ValueError("l1_loss needs at least one masked pixel")
    diff = pred.data - t
    out = np.abs(diff).sum(axis=0) * m

    def vjp(g):
        return ((pred, float(g) * np.sign(diff) * m[None, :, :] / msum),)

    return Tensor(np.asarray(out.sum() / msum, dtype=pred.data.dtype), parents=(pred,), vjp=vjp)


def bce_loss(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy with logits (numerically stable)."""
    t = _as_const(target, logits.data.dtype)
    if t.shape != logits.data.shape:
        raise ValueError(f"target shape {t.shape} does not match logits {logits.data.shape}")
    z = logits.data
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def vjp(g):
        s = 1.0 / (1.0 + np.exp(-z))
        return ((logits, float(g) * (s - t) / n),)

    return Tensor(np.asarray(out.mean(), dtype=logits.data.dtype), parents=(logits,), vjp=vjp)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied to params in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.t += 1
    t = state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)
    return state
