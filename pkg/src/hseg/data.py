"""Synthetic instance datasets, label-map PNG I/O, and augmentation.

Three generator kinds cover the regimes the pipeline targets: ``blobs``
(large rounded cells), ``rods`` (small crowded bacteria-like rectangles)
and ``worms`` (thin open curves that may cross).  Generation is
deterministic per seed, with per-image child streams so images are
independent of generation order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

META_VERSION = 1


class LabelFormatError(ValueError):
    """Raised for label rasters that cannot be stored or parsed."""


@dataclass
class SynthConfig:
    kind: str = "blobs"                      # blobs | rods | worms
    size: tuple[int, int] = (128, 128)       # (W, H)
    count_range: tuple[int, int] = (5, 12)
    size_range: tuple[float, float] = (8.0, 16.0)   # blob radius / rod length / worm length
    overlap: float = 0.0                     # max fraction of a new shape covering others
    bg_level: float = 0.08
    fg_range: tuple[float, float] = (0.35, 0.95)
    noise_std: float = 0.03
    images: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("blobs", "rods", "worms"):
            raise ValueError(f"unknown synth kind: {self.kind}")
        if self.count_range[0] > self.count_range[1] or self.count_range[0] < 1:
            raise ValueError("count range must be non-empty and positive")
        if self.size_range[0] <= 0 or self.size_range[0] > self.size_range[1]:
            raise ValueError("size range must be positive and ordered")
        if not (0.0 <= self.overlap <= 1.0):
            raise ValueError("overlap allowance must lie in [0, 1]")


@dataclass
class Sample:
    image: np.ndarray   # uint8 [H, W]
    label: np.ndarray   # int32 [H, W], 0 = background

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise ValueError("image and label frames differ")


def _stamp(canvas: np.ndarray, mask: np.ndarray, y0: int, x0: int, value: int) -> None:
    h, w = mask.shape
    canvas[y0 : y0 + h, x0 : x0 + w][mask] = value


def _blob_mask(rng, lo, hi):
    a = rng.uniform(lo, hi)
    b = rng.uniform(lo, hi)
    th = rng.uniform(0, np.pi)
    r = int(np.ceil(max(a, b))) + 1
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    u = xx * np.cos(th) + yy * np.sin(th)
    v = -xx * np.sin(th) + yy * np.cos(th)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _rod_mask(rng, lo, hi):
    length = rng.uniform(lo, hi)
    width = rng.uniform(2.5, 4.5)
    th = rng.uniform(0, np.pi)
    r = int(np.ceil(length / 2)) + 2
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    u = xx * np.cos(th) + yy * np.sin(th)
    v = -xx * np.sin(th) + yy * np.cos(th)
    return (np.abs(u) <= length / 2) & (np.abs(v) <= width / 2)


def _worm_mask(rng, lo, hi):
    # smooth open curve: 3-5 control points, constant thickness
    length = rng.uniform(lo, hi)
    n_ctrl = int(rng.integers(3, 6))
    step = length / (n_ctrl - 1)
    heading = rng.uniform(0, 2 * np.pi)
    pts = [np.zeros(2)]
    for _ in range(n_ctrl - 1):
        heading += rng.uniform(-0.9, 0.9)
        pts.append(pts[-1] + step * np.array([np.cos(heading), np.sin(heading)]))
    pts = np.array(pts)
    # dense polyline through Catmull-Rom interpolation
    dense = []
    ext = np.vstack([pts[0], pts, pts[-1]])
    for i in range(len(pts) - 1):
        p0, p1, p2, p3 = ext[i], ext[i + 1], ext[i + 2], ext[i + 3]
        t = np.linspace(0, 1, max(4, int(step * 2)), endpoint=False)[:, None]
        dense.append(
            0.5
            * (
                2 * p1
                + (-p0 + p2) * t
                + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t**2
                + (-p0 + 3 * p1 - 3 * p2 + p3) * t**3
            )
        )
    dense = np.vstack(dense + [pts[-1:]])
    thick = rng.uniform(2.5, 4.0)
    r = thick / 2
    lo_xy = dense.min(axis=0) - r - 1
    dense = dense - lo_xy
    hi_xy = dense.max(axis=0) + r + 1
    w, h = int(np.ceil(hi_xy[0])), int(np.ceil(hi_xy[1]))
    mask = np.zeros((h, w), bool)
    rr = int(np.ceil(r))
    yy, xx = np.mgrid[-rr : rr + 1, -rr : rr + 1]
    disk = xx**2 + yy**2 <= r**2
    for cx, cy in dense:
        ix, iy = int(round(cx)), int(round(cy))
        y0, x0 = max(0, iy - rr), max(0, ix - rr)
        y1, x1 = min(h, iy + rr + 1), min(w, ix + rr + 1)
        mask[y0:y1, x0:x1] |= disk[y0 - (iy - rr) : y1 - (iy - rr), x0 - (ix - rr) : x1 - (ix - rr)]
    return mask


_MAKERS = {"blobs": _blob_mask, "rods": _rod_mask, "worms": _worm_mask}


def place_instances(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Label raster with the configured number of instances placed.

    A candidate is accepted when it covers at most ``cfg.overlap`` of the
    pixels already occupied and hides at most that fraction of any single
    earlier instance; later instances paint over earlier ones where they
    overlap.
    """
    W, H = cfg.size
    label = np.zeros((H, W), np.int32)
    n = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    maker = _MAKERS[cfg.kind]
    placed = 0
    tries = 0
    max_tries = 400 * n
    areas: dict[int, int] = {}
    while placed < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(
                f"could not place {n} {cfg.kind} instances in {W}x{H} "
                f"(overlap allowance {cfg.overlap})"
            )
        mask = maker(rng, cfg.size_range[0], cfg.size_range[1])
        h, w = mask.shape
        if h >= H or w >= W:
            continue
        y0 = int(rng.integers(0, H - h + 1))
        x0 = int(rng.integers(0, W - w + 1))
        area = int(mask.sum())
        if area < 8:
            continue
        region = label[y0 : y0 + h, x0 : x0 + w]
        covered = region[mask]
        n_cover = int((covered != 0).sum())
        if n_cover > cfg.overlap * area:
            continue
        if n_cover:
            hit_ids, hit_counts = np.unique(covered[covered != 0], return_counts=True)
            if any(c > cfg.overlap * areas[int(i)] for i, c in zip(hit_ids, hit_counts)):
                continue
        placed += 1
        areas[placed] = area
        _stamp(label, mask, y0, x0, placed)
    return label


def synth(cfg: SynthConfig) -> list[Sample]:
    """Generate ``cfg.images`` samples, deterministically per seed."""
    out = []
    for i in range(cfg.images):
        rng = np.random.default_rng([cfg.seed, i])
        label = place_instances(cfg, rng)
        n_ids = int(label.max())
        img = np.full(label.shape, cfg.bg_level, np.float64)
        levels = rng.uniform(cfg.fg_range[0], cfg.fg_range[1], n_ids)
        for k in range(1, n_ids + 1):
            img[label == k] = levels[k - 1]
        img += rng.normal(0.0, cfg.noise_std, label.shape)
        img = np.clip(img, 0.0, 1.0)
        out.append(Sample(image=(img * 255).round().astype(np.uint8), label=label))
    return out


# ---------------------------------------------------------------------------
# raster I/O


def save_labels(label: np.ndarray, path) -> None:
    """Write a label map as 16-bit single-channel PNG (id 0 = background)."""
    label = np.asarray(label)
    if label.ndim != 2:
        raise LabelFormatError(f"label map must be 2-D, got shape {label.shape}")
    if label.min() < 0 or label.max() > 65535:
        raise LabelFormatError("label ids must fit 0..65535")
    Image.fromarray(label.astype(np.uint16)).save(path)


def load_labels(path) -> np.ndarray:
    im = Image.open(path)
    if im.mode in ("I;16", "I;16B", "I"):
        arr = np.asarray(im, dtype=np.int64)
    elif im.mode == "L":
        arr = np.asarray(im, dtype=np.int64)  # legacy 8-bit, widen
    else:
        raise LabelFormatError(f"unsupported label PNG mode {im.mode!r} in {path}")
    if arr.min() < 0 or arr.max() > 65535:
        raise LabelFormatError(f"label values out of range in {path}")
    return arr.astype(np.int32)


def save_image(image: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def load_image(path) -> np.ndarray:
    im = Image.open(path)
    if im.mode not in ("L", "I;16", "I"):
        im = im.convert("L")
    arr = np.asarray(im)
    if arr.dtype != np.uint8:
        arr = (arr.astype(np.float64) / arr.max() * 255).astype(np.uint8) if arr.max() > 0 else arr.astype(np.uint8)
    return arr


def write_dataset(samples: list[Sample], out_dir, cfg: SynthConfig | None = None) -> None:
    """Layout: images/NNNN.png, labels/NNNN.png, meta.json."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        save_image(s.image, out_dir / "images" / f"{i:04d}.png")
        save_labels(s.label, out_dir / "labels" / f"{i:04d}.png")
    meta = {"format_version": META_VERSION, "count": len(samples)}
    if cfg is not None:
        meta["synth"] = asdict(cfg)
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(dir_path) -> list[Sample]:
    dir_path = Path(dir_path)
    img_dir, lab_dir = dir_path / "images", dir_path / "labels"
    if not img_dir.is_dir() or not lab_dir.is_dir():
        raise FileNotFoundError(f"{dir_path} is not a dataset directory (images/ + labels/)")
    samples = []
    for img_path in sorted(img_dir.glob("*.png")):
        lab_path = lab_dir / img_path.name
        if not lab_path.exists():
            raise FileNotFoundError(f"missing label for {img_path.name}")
        samples.append(Sample(image=load_image(img_path), label=load_labels(lab_path)))
    if not samples:
        raise FileNotFoundError(f"no samples under {dir_path}")
    return samples


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    tile: tuple[int, int] | None = None          # (W, H) random crop target
    scale_range: tuple[float, float] | None = (0.8, 1.25)
    flip: bool = True


def flip_lr(sample: Sample) -> Sample:
    return Sample(image=sample.image[:, ::-1].copy(), label=sample.label[:, ::-1].copy())


def rescale(sample: Sample, factor: float) -> Sample:
    """Resize by a factor; nearest-neighbor for both rasters (ids preserved)."""
    H, W = sample.label.shape
    nh, nw = max(1, int(round(H * factor))), max(1, int(round(W * factor)))
    ys = np.minimum((np.arange(nh) / factor).astype(np.int64), H - 1)
    xs = np.minimum((np.arange(nw) / factor).astype(np.int64), W - 1)
    return Sample(image=sample.image[np.ix_(ys, xs)], label=sample.label[np.ix_(ys, xs)])


def crop(sample: Sample, x0: int, y0: int, w: int, h: int) -> Sample:
    H, W = sample.label.shape
    if x0 < 0 or y0 < 0 or x0 + w > W or y0 + h > H:
        raise ValueError("crop outside frame")
    return Sample(
        image=sample.image[y0 : y0 + h, x0 : x0 + w].copy(),
        label=sample.label[y0 : y0 + h, x0 : x0 + w].copy(),
    )


def pad_to(sample: Sample, w: int, h: int, bg_image: int = 0) -> Sample:
    H, W = sample.label.shape
    if H >= h and W >= w:
        return sample
    img = np.full((max(h, H), max(w, W)), bg_image, sample.image.dtype)
    lab = np.zeros((max(h, H), max(w, W)), sample.label.dtype)
    img[:H, :W] = sample.image
    lab[:H, :W] = sample.label
    return Sample(image=img, label=lab)


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Random scale jitter, crop to tile, and left-right flip."""
    s = sample
    if cfg.scale_range is not None:
        f = float(rng.uniform(*cfg.scale_range))
        s = rescale(s, f)
    if cfg.tile is not None:
        tw, th = cfg.tile
        s = pad_to(s, tw, th)
        H, W = s.label.shape
        x0 = int(rng.integers(0, W - tw + 1))
        y0 = int(rng.integers(0, H - th + 1))
        s = crop(s, x0, y0, tw, th)
    if cfg.flip and rng.random() < 0.5:
        s = flip_lr(s)
    return s
