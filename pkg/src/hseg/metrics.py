"""Instance segmentation scoring: Symmetric Best Dice, counting error, COCO AP.

Best Dice follows the CVPPP convention (Dice overlap, not IoU); an IoU-based
variant is available behind a flag for comparison.  COCO AP uses greedy
score-descending matching per threshold, 101-point interpolated
precision-recall integration, and GT-area size buckets with the usual
ignore semantics.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

REPORT_VERSION = 1

COCO_THRESHOLDS = np.round(np.arange(0.50, 0.96, 0.05), 2)
SIZE_BUCKETS = {"s": (0.0, 32.0**2), "m": (32.0**2, 96.0**2), "l": (96.0**2, np.inf)}
_RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class SegScore:
    sbd: float = 0.0
    dic: float = 0.0
    ap: float = 0.0
    ap50: float = 0.0
    ap75: float = 0.0
    ap_s: float = 0.0
    ap_m: float = 0.0
    ap_l: float = 0.0

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def _overlap_matrix(a: np.ndarray, b: np.ndarray):
    """Pixel overlap counts between positive ids of two label maps."""
    a_ids = np.unique(a[a > 0])
    b_ids = np.unique(b[b > 0])
    a_idx = np.zeros(int(a.max()) + 1, np.int64)
    a_idx[a_ids] = np.arange(1, len(a_ids) + 1)
    b_idx = np.zeros(int(b.max()) + 1, np.int64)
    b_idx[b_ids] = np.arange(1, len(b_ids) + 1)
    ai = a_idx[a]
    bi = b_idx[b]
    m = np.bincount(
        (ai * (len(b_ids) + 1) + bi).ravel(), minlength=(len(a_ids) + 1) * (len(b_ids) + 1)
    ).reshape(len(a_ids) + 1, len(b_ids) + 1)
    inter = m[1:, 1:]
    area_a = m[1:, :].sum(axis=1)
    area_b = m[:, 1:].sum(axis=0)
    return inter, area_a, area_b


def best_dice(a: np.ndarray, b: np.ndarray, iou: bool = False) -> float:
    """Mean over instances of A of the best Dice (or IoU) against B."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"label maps differ in frame: {a.shape} vs {b.shape}")
    inter, area_a, area_b = _overlap_matrix(a, b)
    if len(area_a) == 0:
        return 0.0
    if len(area_b) == 0:
        return 0.0
    if iou:
        union = area_a[:, None] + area_b[None, :] - inter
        scores = inter / union
    else:
        scores = 2.0 * inter / (area_a[:, None] + area_b[None, :])
    return float(scores.max(axis=1).mean())


def sbd(pred: np.ndarray, gt: np.ndarray, iou: bool = False) -> float:
    """Symmetric Best Dice: min of the two directional scores."""
    n_pred = len(np.unique(pred[np.asarray(pred) > 0]))
    n_gt = len(np.unique(gt[np.asarray(gt) > 0]))
    if n_pred == 0 and n_gt == 0:
        return 1.0
    return min(best_dice(pred, gt, iou=iou), best_dice(gt, pred, iou=iou))


def dic(pred: np.ndarray, gt: np.ndarray) -> int:
    """Absolute difference in instance counts for one image."""
    n_pred = len(np.unique(pred[np.asarray(pred) > 0]))
    n_gt = len(np.unique(gt[np.asarray(gt) > 0]))
    return abs(n_pred - n_gt)


def tile_views(label: np.ndarray, tile: tuple[int, int]):
    """Non-overlapping crops covering the map (edge crops may be smaller)."""
    tw, th = tile
    H, W = label.shape
    for y0 in range(0, H, th):
        for x0 in range(0, W, tw):
            yield label[y0 : y0 + th, x0 : x0 + tw]


def sbd_dataset(
    preds: list[np.ndarray],
    gts: list[np.ndarray],
    per_crop: bool = False,
    tile: tuple[int, int] | None = None,
    iou: bool = False,
) -> float:
    """Mean SBD over images, or over independent crops when per_crop is set."""
    if len(preds) != len(gts):
        raise ValueError("prediction/GT count mismatch")
    vals = []
    for p, g in zip(preds, gts):
        if per_crop:
            if tile is None:
                raise ValueError("per-crop scoring requires a tile size")
            for pc, gc in zip(tile_views(p, tile), tile_views(g, tile)):
                vals.append(sbd(pc, gc, iou=iou))
        else:
            vals.append(sbd(p, g, iou=iou))
    return float(np.mean(vals)) if vals else 1.0


# ---------------------------------------------------------------------------
# COCO-protocol average precision


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return inter / union if union else 0.0


def _match_image(preds, gts, gt_ignore, thr):
    """Greedy matching for one image at one threshold.

    preds: list of (mask, score) sorted by descending score.  Returns per-pred
    (matched, ignored) flags.  A prediction prefers the highest-IoU unmatched
    real GT; failing that it may match an ignored GT and is then ignored.
    """
    matched = np.zeros(len(preds), bool)
    ignored = np.zeros(len(preds), bool)
    taken = np.zeros(len(gts), bool)
    for i, (mask, _) in enumerate(preds):
        best_j = best_ign_j = -1
        best_iou = best_ign_iou = -1.0
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = _mask_iou(mask, g)
            if v < thr:
                continue
            if gt_ignore[j]:
                if v > best_ign_iou:
                    best_ign_j, best_ign_iou = j, v
            elif v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            matched[i] = True
            taken[best_j] = True
        elif best_ign_j >= 0:
            ignored[i] = True
            taken[best_ign_j] = True
    return matched, ignored


def _ap_from_flags(scores, matched, ignored, n_gt) -> float:
    if n_gt == 0:
        return 0.0
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    m = matched[order]
    keep = ~ignored[order]
    m = m[keep]
    if m.size == 0:
        return 0.0
    tp = np.cumsum(m)
    fp = np.cumsum(~m)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # interpolate: max precision at recall >= r over the 101-point grid
    prec_interp = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, _RECALL_GRID, side="left")
    out = np.where(idx < len(prec_interp), prec_interp[np.minimum(idx, len(prec_interp) - 1)], 0.0)
    return float(out.mean())


def _area_ignore(areas: np.ndarray, bucket: tuple[float, float]) -> np.ndarray:
    lo, hi = bucket
    return ~((areas >= lo) & (areas < hi))


def coco_ap_dataset(
    image_preds: list[list[tuple[np.ndarray, float]]],
    image_gts: list[list[np.ndarray]],
    thresholds: np.ndarray = COCO_THRESHOLDS,
) -> dict[str, float]:
    """AP, AP50/75, and size-bucket APs pooled over a dataset.

    Matching is per image; the precision-recall curve pools all predictions
    by descending score.  Size buckets use COCO ignore semantics keyed on GT
    mask area; unmatched predictions whose own area falls outside the bucket
    are ignored rather than counted as false positives.
    """
    if len(image_preds) != len(image_gts):
        raise ValueError("prediction/GT image count mismatch")
    prepared = []
    for preds, gts in zip(image_preds, image_gts):
        preds = [(np.asarray(m, dtype=bool), float(s)) for m, s in preds]
        order = np.lexsort((np.arange(len(preds)), -np.array([s for _, s in preds])))
        preds = [preds[i] for i in order]
        gts = [np.asarray(g, dtype=bool) for g in gts]
        prepared.append((preds, gts))

    def ap_at(thr: float, bucket: tuple[float, float] | None) -> float:
        scores, matched, ignored = [], [], []
        n_gt = 0
        for preds, gts in prepared:
            g_areas = np.array([g.sum() for g in gts], dtype=np.float64)
            g_ign = (
                np.zeros(len(gts), bool) if bucket is None else _area_ignore(g_areas, bucket)
            )
            n_gt += int((~g_ign).sum())
            m, ign = _match_image(preds, gts, g_ign, thr)
            if bucket is not None:
                p_areas = np.array([p.sum() for p, _ in preds], dtype=np.float64)
                ign |= (~m) & _area_ignore(p_areas, bucket)
            scores.extend(s for _, s in preds)
            matched.extend(m)
            ignored.extend(ign)
        return _ap_from_flags(
            np.asarray(scores), np.asarray(matched, bool), np.asarray(ignored, bool), n_gt
        )

    ap_per_thr = [ap_at(t, None) for t in thresholds]
    out = {
        "ap": float(np.mean(ap_per_thr)),
        "ap50": ap_at(0.50, None),
        "ap75": ap_at(0.75, None),
    }
    for name, bucket in SIZE_BUCKETS.items():
        out[f"ap_{name}"] = float(np.mean([ap_at(t, bucket) for t in thresholds]))
    return out


def coco_ap(
    preds: list[tuple[np.ndarray, float]],
    gts: list[np.ndarray],
    thresholds: np.ndarray = COCO_THRESHOLDS,
) -> dict[str, float]:
    """Single-collection convenience wrapper around coco_ap_dataset."""
    return coco_ap_dataset([preds], [gts], thresholds=thresholds)


def masks_from_labels(label: np.ndarray) -> list[np.ndarray]:
    label = np.asarray(label)
    return [label == k for k in np.unique(label[label > 0])]


def score_image(
    pred: np.ndarray,
    gt: np.ndarray,
    pred_scores: dict[int, float] | None = None,
) -> SegScore:
    """All metrics for one image; prediction scores default to 1.0."""
    ids = np.unique(pred[np.asarray(pred) > 0])
    scores = [1.0 if pred_scores is None else pred_scores.get(int(k), 1.0) for k in ids]
    preds = [(pred == k, s) for k, s in zip(ids, scores)]
    ap = coco_ap(preds, masks_from_labels(gt))
    return SegScore(sbd=sbd(pred, gt), dic=float(dic(pred, gt)), **ap)
