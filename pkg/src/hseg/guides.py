"""Sine guide functions, object embeddings, and margin-based guide fitting.

A guide is a 2-D sine ``sin(freq_x*x/W + freq_y*y/H + phase)`` evaluated over
normalized image coordinates.  An object's embedding is the vector of guide
means over its pixels.  Fitting searches for guide parameters that separate
the embeddings of every pair of objects within one image by at least the
margin (L1 distance), using minibatch SGD on a pairwise hinge loss.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


@dataclass
class GuideParams:
    """One sine guide: frequencies in radians across the normalized frame."""
    freq_x: float
    freq_y: float
    phase: float

    def __post_init__(self):
        if not all(np.isfinite([self.freq_x, self.freq_y, self.phase])):
            raise ValueError("guide parameters must be finite")


@dataclass
class GuideSet:
    """An ordered family of N guides plus the separation margin."""
    params: list[GuideParams]
    margin: float
    seed: int | None = None

    def __post_init__(self):
        if len(self.params) < 1:
            raise ValueError("need at least one guide")
        if not self.margin > 0:
            raise ValueError("margin must be positive")

    @property
    def n(self) -> int:
        return len(self.params)

    def as_array(self) -> np.ndarray:
        """Parameters as a float64 [N, 3] array (freq_x, freq_y, phase)."""
        return np.array(
            [[g.freq_x, g.freq_y, g.phase] for g in self.params], dtype=np.float64
        )

    @classmethod
    def from_array(cls, arr, margin, seed=None) -> "GuideSet":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"expected [N, 3] parameter array, got {arr.shape}")
        params = [GuideParams(float(a), float(b), float(c)) for a, b, c in arr]
        return cls(params=params, margin=float(margin), seed=seed)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "n": self.n,
            "margin": self.margin,
            "seed": self.seed,
            "params": [
                {"freq_x": g.freq_x, "freq_y": g.freq_y, "phase": g.phase}
                for g in self.params
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GuideSet":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported guide file version: {d.get('format_version')}")
        params = [GuideParams(p["freq_x"], p["freq_y"], p["phase"]) for p in d["params"]]
        gs = cls(params=params, margin=d["margin"], seed=d.get("seed"))
        if gs.n != d["n"]:
            raise ValueError("guide count does not match declared n")
        return gs

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "GuideSet":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def sha256(self) -> bytes:
        """Stable content hash, used to bind checkpoints to their guide set."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


@dataclass
class PixelSet:
    """A non-empty set of (x, y) pixels within a W x H frame."""
    xs: np.ndarray
    ys: np.ndarray
    frame: tuple[int, int]  # (W, H)

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.int64)
        self.ys = np.asarray(self.ys, dtype=np.int64)
        W, H = self.frame
        if self.xs.size == 0 or self.xs.shape != self.ys.shape:
            raise ValueError("pixel set must be non-empty with matching x/y arrays")
        if W <= 0 or H <= 0:
            raise ValueError("frame extents must be positive")
        if (self.xs < 0).any() or (self.xs >= W).any() or (self.ys < 0).any() or (self.ys >= H).any():
            raise ValueError("pixels outside frame")

    def __len__(self) -> int:
        return int(self.xs.size)

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        """x/W and y/H as float64 arrays."""
        W, H = self.frame
        return self.xs / float(W), self.ys / float(H)


def instances_from_labels(label: np.ndarray) -> dict[int, PixelSet]:
    """Extract the pixel set of every positive id in a label raster."""
    label = np.asarray(label)
    H, W = label.shape
    out: dict[int, PixelSet] = {}
    for k in np.unique(label):
        k = int(k)
        if k <= 0:
            continue
        ys, xs = np.nonzero(label == k)
        out[k] = PixelSet(xs=xs, ys=ys, frame=(W, H))
    return out


def eval_guide(g: GuideParams, x, y, frame) -> float:
    """Evaluate one guide at pixel (x, y) of a W x H frame."""
    W, H = frame
    if W <= 0 or H <= 0:
        raise ValueError("frame extents must be positive")
    return float(np.sin(g.freq_x * x / W + g.freq_y * y / H + g.phase))


def _embed(xn: np.ndarray, yn: np.ndarray, psi: np.ndarray) -> np.ndarray:
    # psi: [N, 3]; xn, yn: normalized pixel coords -> [N] embedding
    arg = np.outer(psi[:, 0], xn) + np.outer(psi[:, 1], yn) + psi[:, 2:3]
    return np.sin(arg).mean(axis=1)


def guided_embedding(S: PixelSet, G: GuideSet) -> np.ndarray:
    """Mean of each guide over the pixel set; float64 vector of length N."""
    xn, yn = S.normalized()
    return _embed(xn, yn, G.as_array())


def pair_hinge(eA: np.ndarray, eB: np.ndarray, margin: float) -> float:
    """Hinge penalty max(0, margin - |eA - eB|_1)."""
    eA = np.asarray(eA, dtype=np.float64)
    eB = np.asarray(eB, dtype=np.float64)
    if eA.shape != eB.shape:
        raise ValueError(f"embedding length mismatch: {eA.shape} vs {eB.shape}")
    return float(max(0.0, margin - np.abs(eA - eB).sum()))


def hinge_gradient(SA: PixelSet, SB: PixelSet, G: GuideSet) -> np.ndarray:
    """Gradient of pair_hinge(e(SA), e(SB), margin) w.r.t. all parameters.

    Returns a [N, 3] array ordered (freq_x, freq_y, phase).  Zero when the
    margin is satisfied; sign(0) is taken as 0 on coincident components.
    """
    psi = G.as_array()
    xa, ya = SA.normalized()
    xb, yb = SB.normalized()
    argA = np.outer(psi[:, 0], xa) + np.outer(psi[:, 1], ya) + psi[:, 2:3]
    argB = np.outer(psi[:, 0], xb) + np.outer(psi[:, 1], yb) + psi[:, 2:3]
    d = np.sin(argA).mean(axis=1) - np.sin(argB).mean(axis=1)
    grad = np.zeros_like(psi)
    if np.abs(d).sum() >= G.margin:
        return grad
    sign = np.sign(d)
    cA, cB = np.cos(argA), np.cos(argB)
    grad[:, 0] = -sign * ((cA * xa).mean(axis=1) - (cB * xb).mean(axis=1))
    grad[:, 1] = -sign * ((cA * ya).mean(axis=1) - (cB * yb).mean(axis=1))
    grad[:, 2] = -sign * (cA.mean(axis=1) - cB.mean(axis=1))
    return grad


@dataclass
class GuideFitConfig:
    n: int = 12
    margin: float = 0.5
    step_size: float = 0.1
    batch_pairs: int = 64
    max_iters: int = 20_000
    sweep_every: int = 100
    freq_init: tuple[float, float] = (0.0, 50.0)

    def __post_init__(self):
        if self.n < 1 or self.margin <= 0 or self.batch_pairs < 1:
            raise ValueError("invalid guide fit configuration")


@dataclass
class FitResult:
    guides: GuideSet
    trace: np.ndarray              # minibatch hinge loss per iteration
    sweep_history: list[tuple[int, float]]
    converged_at: int | None       # iteration of the first zero sweep, or None
    final_sweep_loss: float


class _InstanceBank:
    """Per-image instance pixel coordinates, flattened for fast batching."""

    def __init__(self, labels: list[np.ndarray], min_instances: int = 2):
        self.images: list[list[tuple[np.ndarray, np.ndarray]]] = []
        for lab in labels:
            insts = instances_from_labels(lab)
            coords = [ps.normalized() for ps in insts.values()]
            if len(coords) >= min_instances:
                self.images.append(coords)

    def __len__(self) -> int:
        return len(self.images)


def _batch_embeddings(coords: list[tuple[np.ndarray, np.ndarray]], psi: np.ndarray):
    """Embeddings for a list of pixel sets, plus the per-pixel workspace.

    Returns (emb [N, M], args [N, P], lens [M], offsets) where P is the total
    pixel count; reused by the gradient step to avoid recomputing sines.
    """
    xs = np.concatenate([c[0] for c in coords])
    ys = np.concatenate([c[1] for c in coords])
    lens = np.array([c[0].size for c in coords])
    offsets = np.concatenate([[0], np.cumsum(lens)[:-1]])
    args = np.outer(psi[:, 0], xs) + np.outer(psi[:, 1], ys) + psi[:, 2:3]
    sums = np.add.reduceat(np.sin(args), offsets, axis=1)
    return sums / lens, args, (xs, ys), lens, offsets


def sweep_loss(images: "_InstanceBank | list[np.ndarray]", G: GuideSet) -> float:
    """Exhaustive hinge loss: sum over images of the mean pair hinge."""
    bank = images if isinstance(images, _InstanceBank) else _InstanceBank(images)
    psi = G.as_array()
    total = 0.0
    for coords in bank.images:
        emb, *_ = _batch_embeddings(coords, psi)
        d = np.abs(emb[:, :, None] - emb[:, None, :]).sum(axis=0)
        iu = np.triu_indices(len(coords), k=1)
        total += np.maximum(0.0, G.margin - d[iu]).sum() / iu[0].size
    return float(total)


def fit_guides(train: list[np.ndarray], config: GuideFitConfig, rng_seed: int) -> FitResult:
    """Fit guide parameters on training label maps by minibatch SGD.

    Frequencies start uniform in ``config.freq_init`` and phases uniform in
    [0, 2*pi); they are unconstrained afterwards.  Stops at the first full
    sweep with zero hinge loss, or after ``config.max_iters`` iterations.
    Deterministic for a fixed seed.
    """
    bank = _InstanceBank(train)
    if len(bank) == 0:
        raise ValueError("no training image contains two or more instances")
    rng = np.random.default_rng(rng_seed)
    lo, hi = config.freq_init
    psi = np.empty((config.n, 3), dtype=np.float64)
    psi[:, 0] = rng.uniform(lo, hi, config.n)
    psi[:, 1] = rng.uniform(lo, hi, config.n)
    psi[:, 2] = rng.uniform(0.0, 2.0 * np.pi, config.n)

    margin = config.margin
    B = config.batch_pairs
    trace = []
    sweeps: list[tuple[int, float]] = []
    converged_at = None

    def current() -> GuideSet:
        return GuideSet.from_array(psi, margin, seed=rng_seed)

    s0 = sweep_loss(bank, current())
    sweeps.append((0, s0))
    if s0 == 0.0:
        converged_at = 0

    it = 0
    while converged_at is None and it < config.max_iters:
        it += 1
        # two-level sampling: image uniform, then unordered pair uniform
        pair_coords = []
        for _ in range(B):
            img = bank.images[rng.integers(len(bank))]
            a, b = rng.choice(len(img), size=2, replace=False)
            pair_coords.append(img[a])
            pair_coords.append(img[b])
        emb, args, (xs, ys), lens, offsets = _batch_embeddings(pair_coords, psi)
        d = emb[:, 0::2] - emb[:, 1::2]                      # [N, B]
        l1 = np.abs(d).sum(axis=0)                           # [B]
        viol = l1 < margin
        trace.append(float(np.maximum(0.0, margin - l1).mean()))
        if viol.any():
            # per-pixel weight: -sign(d) on A segments, +sign(d) on B, /|S|, /B
            coef = np.where(viol, -np.sign(d), 0.0)          # [N, B]
            seg_coef = np.empty((config.n, 2 * B))
            seg_coef[:, 0::2] = coef
            seg_coef[:, 1::2] = -coef
            w = np.repeat(seg_coef / (lens * B), lens, axis=1)   # [N, P]
            c = np.cos(args)
            grad = np.stack(
                [(c * xs * w).sum(axis=1), (c * ys * w).sum(axis=1), (c * w).sum(axis=1)],
                axis=1,
            )
            psi -= config.step_size * grad
        if it % config.sweep_every == 0 or it == config.max_iters:
            s = sweep_loss(bank, current())
            sweeps.append((it, s))
            if s == 0.0:
                converged_at = it
                break

    final = sweeps[-1][1]
    return FitResult(
        guides=current(),
        trace=np.asarray(trace, dtype=np.float64),
        sweep_history=sweeps,
        converged_at=converged_at,
        final_sweep_loss=final,
    )


def smooth_trace(trace: np.ndarray, window: int = 500) -> np.ndarray:
    """Trailing-window running average; defined from index window-1 onward."""
    trace = np.asarray(trace, dtype=np.float64)
    if trace.size < window:
        return np.array([])
    c = np.concatenate([[0.0], np.cumsum(trace)])
    return (c[window:] - c[:-window]) / window


@dataclass
class Collision:
    image: int
    pair: tuple[int, int]
    distance: float


def collision_report(maps: list[np.ndarray], G: GuideSet) -> list[Collision]:
    """All intra-image object pairs closer than the margin, nearest first."""
    psi = G.as_array()
    out: list[Collision] = []
    for idx, lab in enumerate(maps):
        insts = instances_from_labels(lab)
        ids = sorted(insts)
        if len(ids) < 2:
            continue
        coords = [insts[k].normalized() for k in ids]
        emb, *_ = _batch_embeddings(coords, psi)
        d = np.abs(emb[:, :, None] - emb[:, None, :]).sum(axis=0)
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                if d[i, j] < G.margin:
                    out.append(Collision(image=idx, pair=(ids[i], ids[j]), distance=float(d[i, j])))
    out.sort(key=lambda c: (c.distance, c.image, c.pair))
    return out
