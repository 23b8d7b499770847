"""Command-line pipeline: hseg <synth|fit-guides|train|infer|eval|render>.

Configuration lives in an optional JSON file with one section per stage
(synth, guides, network, train, cluster); ``--set section.key=value``
overrides individual entries, and dedicated flags override both.  All
randomized commands require an explicit ``--seed``.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import clustering, data, metrics, network
from .guides import GuideFitConfig, GuideSet, fit_guides, sweep_loss
from .network import SinUNetConfig, TrainConfig, infer, load_checkpoint, save_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CONVERGENCE = 3

ABLATION_FREQ = {"random": (0.0, 50.0), "low": (0.0, 5.0), "high": (45.0, 50.0)}


class UsageError(Exception):
    pass


class ConvergenceError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads() -> int:
    raw = os.environ.get("HSEG_THREADS", "")
    if raw.strip():
        return max(1, int(raw))
    return os.cpu_count() or 1


def _pool_map(fn, items):
    items = list(items)
    n = _threads()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# configuration plumbing

_TUPLE_FIELDS = {"size", "count_range", "size_range", "fg_range", "freq_init", "tile", "scale_range"}


def _coerce(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if k in _TUPLE_FIELDS and isinstance(v, list):
            v = tuple(v)
        out[k] = v
    return out


def load_run_config(path: str | None, sets: list[str]) -> dict:
    cfg: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            cfg = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from e
    for item in sets or []:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"cannot override non-section {part!r} in {key!r}")
        node[parts[-1]] = value
    return cfg


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise UsageError(f"config section {name!r} must be an object")
    return _coerce(sec)


def _build_synth(cfg: dict, seed: int) -> data.SynthConfig:
    d = _section(cfg, "synth")
    d["seed"] = seed
    try:
        return data.SynthConfig(**d)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad synth config: {e}") from e


def _build_guide_fit(cfg: dict) -> GuideFitConfig:
    d = _section(cfg, "guides")
    try:
        return GuideFitConfig(**d)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad guides config: {e}") from e


def _build_network(cfg: dict) -> SinUNetConfig:
    d = _section(cfg, "network")
    try:
        return SinUNetConfig(**d)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad network config: {e}") from e


def _build_train(cfg: dict) -> TrainConfig:
    d = _section(cfg, "train")
    aug = d.pop("augment", "default")
    try:
        tc = TrainConfig(**d)
        if aug is None:
            tc.augment = None
        elif aug != "default":
            tc.augment = data.AugmentConfig(**_coerce(aug))
        return tc
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad train config: {e}") from e


def _cluster_opts(cfg: dict) -> dict:
    d = _section(cfg, "cluster")
    out = {
        "min_size": int(d.get("min_size", 16)),
        "metric": d.get("metric", "l1"),
        "max_seeds": int(d.get("max_seeds", 4096)),
        "fg_threshold": float(d.get("fg_threshold", 0.5)),
        "bandwidth": d.get("bandwidth"),
    }
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = load_run_config(args.config, args.set)
    scfg = _build_synth(cfg, args.seed)
    if args.images is not None:
        scfg.images = args.images
    samples = data.synth(scfg)
    data.write_dataset(samples, args.out, scfg)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_fit_guides(args) -> int:
    cfg = load_run_config(args.config, args.set)
    gcfg = _build_guide_fit(cfg)
    labels = [s.label for s in data.load_dataset(args.data)]
    result = fit_guides(labels, gcfg, args.seed)
    result.guides.save(args.out)
    if args.trace_out:
        with open(args.trace_out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "minibatch_loss"])
            for i, v in enumerate(result.trace, start=1):
                w.writerow([i, repr(float(v))])
    status = "converged" if result.final_sweep_loss == 0.0 else "NOT converged"
    print(
        f"{status}: sweep loss {result.final_sweep_loss!r} after "
        f"{result.sweep_history[-1][0]} iterations -> {args.out}"
    )
    if args.strict and result.final_sweep_loss > 0.0:
        raise ConvergenceError(f"sweep loss {result.final_sweep_loss} > 0 under --strict")
    return EXIT_OK


def _sample_ablation_guides(kind: str, gcfg: GuideFitConfig, seed: int) -> GuideSet:
    lo, hi = ABLATION_FREQ[kind]
    rng = np.random.default_rng(seed)
    psi = np.empty((gcfg.n, 3))
    psi[:, 0] = rng.uniform(lo, hi, gcfg.n)
    psi[:, 1] = rng.uniform(lo, hi, gcfg.n)
    psi[:, 2] = rng.uniform(0.0, 2.0 * np.pi, gcfg.n)
    return GuideSet.from_array(psi, gcfg.margin, seed=seed)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    ncfg = _build_network(cfg)
    tcfg = _build_train(cfg)
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    dataset = data.load_dataset(args.data)
    if args.ablation in ABLATION_FREQ:
        guides = _sample_ablation_guides(args.ablation, _build_guide_fit(cfg), args.seed)
        guides_out = args.guides_out or str(Path(args.out).with_suffix(".guides.json"))
        guides.save(guides_out)
        print(f"sampled {args.ablation}-frequency guides -> {guides_out}")
    else:
        if not args.guides:
            raise UsageError("--guides is required unless --ablation samples them")
        guides = GuideSet.load(args.guides)
    if args.ablation == "no-guide":
        ncfg.sinconv_enabled = False
        ncfg.coordconv_mode = False
    elif args.ablation == "coordconv":
        ncfg.sinconv_enabled = True
        ncfg.coordconv_mode = True
    result = train(dataset, guides, ncfg, tcfg, args.seed)
    save_checkpoint(args.out, result.model, result.adam, result.epoch)
    loss_csv = args.loss_out or str(Path(args.out).with_suffix(".loss.csv"))
    with open(loss_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "l1", "bce", "total"])
        for epoch, l1, bce, total in result.curve:
            w.writerow([epoch, repr(l1), repr(bce), repr(total)])
    last = result.curve[-1]
    print(f"trained {result.epoch} epochs (final l1 {last[1]:.4f}) -> {args.out}")
    return EXIT_OK


def _parse_tile(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as e:
        raise UsageError(f"--tile expects WxH, got {text!r}") from e


def _infer_one(image, model, guides, copts, fg_mask=None):
    tw, th = model.config.tile
    H, W = image.shape
    ph = -(-H // th) * th
    pw = -(-W // tw) * tw
    padded = np.zeros((ph, pw), image.dtype)
    padded[:H, :W] = image
    if fg_mask is not None:
        fg_pad = np.zeros((ph, pw), bool)
        fg_pad[:H, :W] = fg_mask
    labels = np.zeros((ph, pw), np.int32)
    scores: dict[int, float] = {}
    offset = 0
    bandwidth = copts["bandwidth"] or guides.margin
    for y0 in range(0, ph, th):
        for x0 in range(0, pw, tw):
            tile_img = padded[y0 : y0 + th, x0 : x0 + tw]
            emb, fg_prob = infer(tile_img, model)
            if fg_mask is not None:
                fg = fg_pad[y0 : y0 + th, x0 : x0 + tw]
            else:
                fg = fg_prob >= copts["fg_threshold"]
            res = clustering.extract_instances(
                emb,
                fg,
                bandwidth=bandwidth,
                min_size=copts["min_size"],
                metric=copts["metric"],
                max_seeds=copts["max_seeds"],
            )
            tile_lab = res.labels.copy()
            tile_lab[tile_lab > 0] += offset
            labels[y0 : y0 + th, x0 : x0 + tw] = tile_lab
            for k, s in enumerate(res.scores, start=1):
                scores[offset + k] = float(s)
            offset += res.n_instances
    labels = labels[:H, :W]
    present = np.unique(labels[labels > 0])
    scores = {int(k): scores[int(k)] for k in present}
    return labels, scores


def cmd_infer(args) -> int:
    cfg = load_run_config(args.config, args.set)
    copts = _cluster_opts(cfg)
    guides = GuideSet.load(args.guides)
    model, _, _ = load_checkpoint(args.checkpoint, guides)
    if args.tile is not None and _parse_tile(args.tile) != model.config.tile:
        raise UsageError(
            f"--tile {args.tile} does not match the checkpoint tile "
            f"{model.config.tile[0]}x{model.config.tile[1]}"
        )
    in_path = Path(args.input)
    if in_path.is_dir():
        img_dir = in_path / "images" if (in_path / "images").is_dir() else in_path
        paths = sorted(img_dir.glob("*.png"))
        if not paths:
            raise FileNotFoundError(f"no PNG images under {img_dir}")
    elif in_path.exists():
        paths = [in_path]
    else:
        raise FileNotFoundError(f"input not found: {args.input}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def fg_for(path: Path):
        if not args.fg_mask:
            return None
        fg_path = Path(args.fg_mask)
        if fg_path.is_dir():
            fg_path = fg_path / path.name
        if not fg_path.exists():
            raise FileNotFoundError(f"foreground mask not found: {fg_path}")
        return data.load_labels(fg_path) > 0

    def run(path: Path):
        labels, scores = _infer_one(data.load_image(path), model, guides, copts, fg_for(path))
        return path.stem, labels, scores

    results = _pool_map(run, paths)
    with open(out_dir / "scores.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image", "instance_id", "score"])
        for stem, labels, scores in results:
            data.save_labels(labels, out_dir / f"{stem}.png")
            for k in sorted(scores):
                w.writerow([stem, k, repr(scores[k])])
    n_inst = sum(len(s) for _, _, s in results)
    print(f"segmented {len(results)} image(s), {n_inst} instances -> {out_dir}")
    return EXIT_OK


def _load_scores(pred_dir: Path) -> dict[str, dict[int, float]]:
    path = pred_dir / "scores.csv"
    out: dict[str, dict[int, float]] = {}
    if path.exists():
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                out.setdefault(row["image"], {})[int(row["instance_id"])] = float(row["score"])
    return out


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise FileNotFoundError("eval needs prediction and ground-truth directories")
    if gt_dir.joinpath("labels").is_dir():
        gt_dir = gt_dir / "labels"
    gt_paths = sorted(gt_dir.glob("*.png"))
    if not gt_paths:
        raise FileNotFoundError(f"no ground-truth label maps under {gt_dir}")
    pairs = []
    for g in gt_paths:
        p = pred_dir / g.name
        if not p.exists():
            raise FileNotFoundError(f"missing prediction for {g.name}")
        pairs.append((p, g))
    tile = _parse_tile(args.tile) if args.tile else None
    if args.per_crop and tile is None:
        raise UsageError("--per-crop requires --tile WxH")
    score_map = _load_scores(pred_dir)

    def load_pair(pg):
        return data.load_labels(pg[0]), data.load_labels(pg[1])

    loaded = _pool_map(load_pair, pairs)
    want = {"sbd", "dic", "ap"} if args.metric == "all" else {args.metric}
    per_image = []
    for (p_path, _), (pred, gt) in zip(pairs, loaded):
        row = {"image": p_path.stem}
        if "sbd" in want:
            row["sbd"] = metrics.sbd_dataset([pred], [gt], per_crop=args.per_crop, tile=tile, iou=args.iou)
        if "dic" in want:
            row["dic"] = float(metrics.dic(pred, gt))
        per_image.append(row)
    summary: dict[str, float] = {}
    if "sbd" in want:
        summary["sbd"] = float(np.mean([r["sbd"] for r in per_image]))
    if "dic" in want:
        summary["dic"] = float(np.mean([r["dic"] for r in per_image]))
    if "ap" in want:
        image_preds, image_gts = [], []
        for (p_path, _), (pred, gt) in zip(pairs, loaded):
            sc = score_map.get(p_path.stem, {})
            ids = np.unique(pred[pred > 0])
            image_preds.append([(pred == k, sc.get(int(k), 1.0)) for k in ids])
            image_gts.append(metrics.masks_from_labels(gt))
        summary.update(metrics.coco_ap_dataset(image_preds, image_gts))
    report = {"format_version": metrics.REPORT_VERSION, "per_image": per_image, "summary": summary}
    out = Path(args.out) if args.out else pred_dir / "report.json"
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    csv_path = Path(args.csv_out) if args.csv_out else out.with_suffix(".csv")
    keys = sorted({k for r in per_image for k in r if k != "image"})
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image"] + keys)
        for r in per_image:
            w.writerow([r["image"]] + [repr(r[k]) for k in keys])
    print("  ".join(f"{k}={v:.4f}" for k, v in sorted(summary.items())))
    return EXIT_OK


def _palette(ids: np.ndarray) -> dict[int, tuple[int, int, int]]:
    import colorsys

    out = {}
    for k in ids:
        h = (int(k) * 0.6180339887498949) % 1.0
        r, g, b = colorsys.hsv_to_rgb(h, 0.65, 1.0)
        out[int(k)] = (int(r * 255), int(g * 255), int(b * 255))
    return out


def cmd_render(args) -> int:
    image = data.load_image(args.image)
    labels = data.load_labels(args.labels)
    if image.shape != labels.shape:
        raise ValueError(f"image {image.shape} and labels {labels.shape} differ in frame")
    rgb = np.stack([image] * 3, axis=-1).astype(np.float64)
    pal = _palette(np.unique(labels[labels > 0]))
    alpha = 0.55
    for k, color in pal.items():
        m = labels == k
        rgb[m] = (1 - alpha) * rgb[m] + alpha * np.array(color, np.float64)
    from PIL import Image

    Image.fromarray(rgb.round().astype(np.uint8)).save(args.out)
    print(f"rendered overlay ({len(pal)} instances) -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="hseg", description="harmonic-embedding instance segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=False):
        p.add_argument("--config", help="JSON run-config file")
        p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                       help="override a config entry (repeatable)")
        if seed:
            p.add_argument("--seed", type=int, required=True, help="RNG seed (mandatory)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, seed=True)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--images", type=int, help="number of images (overrides config)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-guides", help="fit sine guides on a dataset")
    common(p, seed=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output guides JSON")
    p.add_argument("--trace-out", help="write the minibatch loss trace CSV here")
    p.add_argument("--strict", action="store_true",
                   help="exit 3 if the final sweep loss is not exactly zero")
    p.set_defaults(func=cmd_fit_guides)

    p = sub.add_parser("train", help="train the embedding network")
    common(p, seed=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--guides", help="fitted guides JSON")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--ablation", choices=["no-guide", "coordconv", "random", "low", "high"],
                   help="ablation mode; random/low/high sample guide frequencies")
    p.add_argument("--guides-out", help="where to save sampled ablation guides")
    p.add_argument("--loss-out", help="loss curve CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment images with a trained checkpoint")
    common(p)
    p.add_argument("--input", required=True, help="image file, image dir, or dataset dir")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--guides", required=True)
    p.add_argument("--out", required=True, help="output directory for label maps")
    p.add_argument("--tile", help="processing tile WxH (must match the checkpoint)")
    p.add_argument("--fg-mask", help="external foreground mask file or directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    common(p)
    p.add_argument("--pred", required=True, help="directory of predicted label maps")
    p.add_argument("--gt", required=True, help="ground-truth labels dir or dataset dir")
    p.add_argument("--metric", choices=["sbd", "dic", "ap", "all"], default="all")
    p.add_argument("--per-crop", action="store_true", help="average SBD over crops, not images")
    p.add_argument("--tile", help="crop size WxH for --per-crop")
    p.add_argument("--iou", action="store_true", help="IoU-based best-dice variant")
    p.add_argument("--out", help="report JSON path (default: <pred>/report.json)")
    p.add_argument("--csv-out", help="per-image CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="overlay instance labels on an image")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConvergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (FileNotFoundError, NotADirectoryError, data.LabelFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # argparse --help
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())
