"""SinConv U-Net: regress per-pixel guide embeddings plus a foreground channel.

The encoder is a plain conv/pool pyramid.  Each decoder level upsamples,
concatenates the skip connection, and runs its first convolution over an
input augmented with guide-value maps sampled at that level's downsampling
factor (the SinConv layer).  Ablations replace those maps with normalized
coordinate maps (CoordConv) or drop them entirely.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import AugmentConfig, Sample, augment
from .guides import GuideSet

CHECKPOINT_MAGIC = b"HSEG"
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64}
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class SinUNetConfig:
    depth: int = 3
    base_channels: int = 16
    embedding_dim: int = 12
    input_channels: int = 1
    sinconv_enabled: bool = True
    coordconv_mode: bool = False
    tile: tuple[int, int] = (128, 128)   # (W, H)
    dtype: str = "float32"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        tw, th = self.tile
        f = 2**self.depth
        if tw % f or th % f:
            raise ValueError(f"tile {self.tile} must be divisible by 2^depth = {f}")
        if self.coordconv_mode and not self.sinconv_enabled:
            raise ValueError("coordconv_mode requires the augmented conv path")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def guide_maps(G: GuideSet, layer_shape: tuple[int, int], delta: int, tile: tuple[int, int]) -> np.ndarray:
    """Guide values at layer resolution: channel i is f_i(x*delta, y*delta) over the tile frame."""
    h, w = layer_shape
    W, H = tile
    psi = G.as_array()
    xs = np.arange(w) * delta / W
    ys = np.arange(h) * delta / H
    arg = (
        psi[:, 0, None, None] * xs[None, None, :]
        + psi[:, 1, None, None] * ys[None, :, None]
        + psi[:, 2, None, None]
    )
    return np.sin(arg)


def coord_maps(layer_shape: tuple[int, int], delta: int, tile: tuple[int, int]) -> np.ndarray:
    """CoordConv ablation maps: {x/W, y/H} at layer resolution."""
    h, w = layer_shape
    W, H = tile
    xs = np.arange(w) * delta / W
    ys = np.arange(h) * delta / H
    return np.stack([np.broadcast_to(xs, (h, w)), np.broadcast_to(ys[:, None], (h, w))])


def sinconv(x: Tensor, w: Tensor, b: Tensor, maps: Tensor) -> Tensor:
    """Concatenate position maps onto the input channels, then convolve."""
    if w.data.shape[1] != x.data.shape[0] + maps.data.shape[0]:
        raise ValueError(
            f"weights expect {w.data.shape[1]} input channels, got "
            f"{x.data.shape[0]} + {maps.data.shape[0]} position maps"
        )
    return ad.conv2d(ad.concat([x, maps]), w, b)


@dataclass
class TargetField:
    embedding: np.ndarray   # [N, H, W]
    fg: np.ndarray          # [H, W] uint8


def build_targets(label: np.ndarray, G: GuideSet) -> TargetField:
    """Per-pixel target: the guided embedding of the pixel's instance.

    Instances clipped by the tile use the mean over their visible pixels.
    Background pixels carry zeros and are excluded via the fg mask.
    """
    label = np.asarray(label)
    H, W = label.shape
    maps = guide_maps(G, (H, W), 1, (W, H))          # [N, H, W]
    fg = (label != 0).astype(np.uint8)
    emb = np.zeros((G.n, H, W), np.float64)
    if fg.any():
        flat = label.ravel()
        counts = np.bincount(flat)
        counts[0] = 1  # avoid div by zero for background
        for i in range(G.n):
            sums = np.bincount(flat, weights=maps[i].ravel())
            means = sums / counts
            means[0] = 0.0
            emb[i] = means[flat].reshape(H, W)
    return TargetField(embedding=emb, fg=fg)


class SinUNet:
    """Fully-convolutional embedding network over single tiles."""

    def __init__(self, config: SinUNetConfig, guides: GuideSet, rng: np.random.Generator):
        if config.embedding_dim != guides.n:
            raise ValueError(
                f"config embedding_dim {config.embedding_dim} does not match guide count {guides.n}"
            )
        self.config = config
        self.guides = guides
        self.params: dict[str, Tensor] = {}
        self._maps_cache: dict[tuple[int, int, int], Tensor] = {}
        dt = config.np_dtype
        c0 = config.base_channels
        d = config.depth

        def conv_param(name, cin, cout, k=3, zero=False):
            if zero:
                w = np.zeros((cout, cin, k, k), dt)
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), (cout, cin, k, k)).astype(dt)
            self.params[f"{name}.w"] = Tensor(w, requires_grad=True)
            self.params[f"{name}.b"] = Tensor(np.zeros(cout, dt), requires_grad=True)

        chans = [c0 * 2**i for i in range(d)]
        cin = config.input_channels
        for i, c in enumerate(chans):
            conv_param(f"enc{i}.c1", cin, c)
            conv_param(f"enc{i}.c2", c, c)
            cin = c
        cb = chans[-1]
        conv_param("bott.c1", cin, cb)
        conv_param("bott.c2", cb, cb)
        self.pos_channels = 0
        if config.sinconv_enabled:
            self.pos_channels = 2 if config.coordconv_mode else config.embedding_dim
        prev = cb
        for i in reversed(range(d)):
            c = chans[i]
            conv_param(f"dec{i}.c1", prev + c + self.pos_channels, c)
            conv_param(f"dec{i}.c2", c, c)
            prev = c
        conv_param("head", chans[0], config.embedding_dim + 1, k=1, zero=True)

    def param_names(self) -> list[str]:
        return list(self.params)

    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def _pos_maps(self, layer_shape: tuple[int, int], delta: int) -> Tensor | None:
        if not self.config.sinconv_enabled:
            return None
        key = (layer_shape[0], layer_shape[1], delta)
        t = self._maps_cache.get(key)
        if t is None:
            if self.config.coordconv_mode:
                m = coord_maps(layer_shape, delta, self.config.tile)
            else:
                m = guide_maps(self.guides, layer_shape, delta, self.config.tile)
            t = Tensor(m.astype(self.config.np_dtype))
            self._maps_cache[key] = t
        return t

    def forward(self, image: np.ndarray) -> tuple[Tensor, Tensor]:
        """Run one tile; returns (embedding [N,H,W], fg logits [1,H,W])."""
        img = np.asarray(image)
        if img.ndim == 2:
            img = img[None]
        x = Tensor(img.astype(self.config.np_dtype, copy=False))
        if x.data.shape[0] != self.config.input_channels:
            raise ValueError(
                f"expected {self.config.input_channels} input channels, got {x.data.shape[0]}"
            )
        tw, th = self.config.tile
        if x.data.shape[1] != th or x.data.shape[2] != tw:
            raise ValueError(f"input {x.data.shape[2]}x{x.data.shape[1]} does not match tile {tw}x{th}")
        p = self.params
        d = self.config.depth
        skips = []
        for i in range(d):
            x = ad.relu(ad.conv2d(x, p[f"enc{i}.c1.w"], p[f"enc{i}.c1.b"]))
            x = ad.relu(ad.conv2d(x, p[f"enc{i}.c2.w"], p[f"enc{i}.c2.b"]))
            skips.append(x)
            x = ad.maxpool2x2(x)
        x = ad.relu(ad.conv2d(x, p["bott.c1.w"], p["bott.c1.b"]))
        x = ad.relu(ad.conv2d(x, p["bott.c2.w"], p["bott.c2.b"]))
        for i in reversed(range(d)):
            x = ad.nearest_upsample2x(x)
            cat = ad.concat([x, skips[i]])
            maps = self._pos_maps(cat.data.shape[1:], 2**i)
            if maps is not None:
                x = ad.relu(sinconv(cat, p[f"dec{i}.c1.w"], p[f"dec{i}.c1.b"], maps))
            else:
                x = ad.relu(ad.conv2d(cat, p[f"dec{i}.c1.w"], p[f"dec{i}.c1.b"]))
            x = ad.relu(ad.conv2d(x, p[f"dec{i}.c2.w"], p[f"dec{i}.c2.b"]))
        out = ad.conv2d(x, p["head.w"], p["head.b"])
        emb, fg = ad.split_channels(out, [self.config.embedding_dim, 1])
        return emb, fg


def prep_image(image: np.ndarray) -> np.ndarray:
    """uint8 raster -> float in [0, 1] (float inputs pass through)."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32, copy=False)


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 1e-4
    lambda_bce: float = 1.0
    fg_mode: str = "masked"          # "masked" = Eq-style fg restriction, "full" = whole image
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    shuffle: bool = True

    def __post_init__(self):
        if self.fg_mode not in ("masked", "full"):
            raise ValueError(f"unknown fg_mode {self.fg_mode!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TrainResult:
    model: SinUNet
    adam: ad.AdamState
    curve: list[tuple[int, float, float, float]]   # (epoch, l1, bce, total)
    epoch: int


def _sample_loss(model: SinUNet, sample: Sample, G: GuideSet, tc: TrainConfig):
    tgt = build_targets(sample.label, G)
    emb, fg_logits = model.forward(prep_image(sample.image)[None])
    dt = model.config.np_dtype
    mask = np.ones_like(tgt.fg, dtype=dt) if tc.fg_mode == "full" else tgt.fg.astype(dt)
    terms = []
    l1_val = bce_val = 0.0
    if mask.sum() > 0:
        l1 = ad.l1_loss(emb, tgt.embedding.astype(dt), mask)
        terms.append(l1)
        l1_val = l1.item()
    if tc.lambda_bce > 0:
        bce = ad.scale(ad.bce_loss(fg_logits, tgt.fg.astype(dt)[None]), tc.lambda_bce)
        terms.append(bce)
        bce_val = bce.item()
    if not terms:
        return None, l1_val, bce_val
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total, l1_val, bce_val


def train(
    dataset: list[Sample],
    G: GuideSet,
    config: SinUNetConfig,
    tc: TrainConfig,
    seed: int,
) -> TrainResult:
    """Train on a list of samples; deterministic per seed."""
    if not dataset:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(seed)
    model = SinUNet(config, G, rng)
    params = model.param_list()
    adam = ad.AdamState.init([p.data for p in params])
    curve = []
    aug = tc.augment
    if aug is not None and aug.tile is None:
        aug = AugmentConfig(tile=config.tile, scale_range=aug.scale_range, flip=aug.flip)
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(dataset)) if tc.shuffle else np.arange(len(dataset))
        sums = np.zeros(3)
        used = 0
        for idx in order:
            s = dataset[int(idx)]
            if aug is not None:
                s = augment(s, aug, rng)
            total, l1_val, bce_val = _sample_loss(model, s, G, tc)
            if total is None:
                continue
            ad.backward(total, params=params)
            ad.adam_step(
                [p.data for p in params], [p.grad for p in params], adam, lr=tc.lr
            )
            sums += (l1_val, bce_val, total.item())
            used += 1
        if used:
            curve.append((epoch, sums[0] / used, sums[1] / used, sums[2] / used))
        else:
            curve.append((epoch, 0.0, 0.0, 0.0))
    return TrainResult(model=model, adam=adam, curve=curve, epoch=tc.epochs)


def infer(image: np.ndarray, model: SinUNet) -> tuple[np.ndarray, np.ndarray]:
    """Embedding field [N,H,W] and foreground probability [H,W] for one tile."""
    emb, fg_logits = model.forward(prep_image(image)[None])
    fg = 1.0 / (1.0 + np.exp(-fg_logits.data[0]))
    return emb.data.copy(), fg


# ---------------------------------------------------------------------------
# checkpoint I/O


def _write_tensor(f, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
    f.write(struct.pack("<I", arr.ndim))
    for e in arr.shape:
        f.write(struct.pack("<I", e))
    f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_tensor(f):
    (nlen,) = struct.unpack("<I", f.read(4))
    name = f.read(nlen).decode()
    (tag,) = struct.unpack("<B", f.read(1))
    (rank,) = struct.unpack("<I", f.read(4))
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
    dt = np.dtype(_DTYPES[tag]).newbyteorder("<")
    n = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(f.read(n * dt.itemsize), dtype=dt).reshape(shape)
    return name, arr.astype(_DTYPES[tag])


def save_checkpoint(path, model: SinUNet, adam: ad.AdamState, epoch: int) -> None:
    """Binary format: magic, version, config JSON, guide hash, tensor records."""
    cfg = asdict(model.config)
    cfg["tile"] = list(model.config.tile)
    header = json.dumps({"config": cfg, "epoch": epoch, "adam_t": adam.t}, sort_keys=True).encode()
    names = model.param_names()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(model.guides.sha256())
        f.write(struct.pack("<I", 3 * len(names)))
        for name in names:
            _write_tensor(f, name, model.params[name].data)
        for name, m in zip(names, adam.m):
            _write_tensor(f, f"m.{name}", m)
        for name, v in zip(names, adam.v):
            _write_tensor(f, f"v.{name}", v)


def load_checkpoint(path, guides: GuideSet) -> tuple[SinUNet, ad.AdamState, int]:
    """Rebuild the model; the guide set must hash-match the one trained with."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        stored_hash = f.read(32)
        if stored_hash != guides.sha256():
            raise ValueError("guide set does not match the one recorded in the checkpoint")
        (n_tensors,) = struct.unpack("<I", f.read(4))
        tensors = dict(_read_tensor(f) for _ in range(n_tensors))
    cfg_d = dict(header["config"])
    cfg_d["tile"] = tuple(cfg_d["tile"])
    config = SinUNetConfig(**cfg_d)
    model = SinUNet(config, guides, np.random.default_rng(0))
    adam_m, adam_v = [], []
    for name in model.param_names():
        for prefix, sink in (("", None), ("m.", adam_m), ("v.", adam_v)):
            key = prefix + name
            if key not in tensors:
                raise ValueError(f"checkpoint missing tensor {key}")
            arr = tensors[key]
            if arr.shape != model.params[name].data.shape:
                raise ValueError(f"checkpoint tensor {key} has shape {arr.shape}, expected {model.params[name].data.shape}")
            if sink is None:
                model.params[name].data = arr
            else:
                sink.append(arr)
    adam = ad.AdamState(m=adam_m, v=adam_v, t=header["adam_t"])
    return model, adam, header["epoch"]
