import numpy as np
import pytest

from hseg.metrics import (
    COCO_THRESHOLDS,
    SIZE_BUCKETS,
    SegScore,
    best_dice,
    coco_ap,
    coco_ap_dataset,
    dic,
    masks_from_labels,
    sbd,
    sbd_dataset,
    score_image,
)
from oracles import brute_best_dice, brute_coco_ap, brute_dic, brute_sbd


def random_label_map(rng, size=16, max_ids=5):
    lab = np.zeros((size, size), np.int32)
    for k in range(1, int(rng.integers(0, max_ids + 1)) + 1):
        cx, cy = rng.integers(0, size, 2)
        r = int(rng.integers(1, 5))
        yy, xx = np.mgrid[0:size, 0:size]
        lab[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = k
    return lab


class TestBestDice:
    def test_identical_maps(self):
        rng = np.random.default_rng(0)
        a = random_label_map(rng)
        assert best_dice(a, a) == pytest.approx(1.0) or not (a > 0).any()

    def test_empty_prediction(self):
        gt = np.zeros((8, 8), np.int32)
        gt[2:4, 2:4] = 1
        assert best_dice(np.zeros_like(gt), gt) == 0.0
        assert best_dice(gt, np.zeros_like(gt)) == 0.0

    def test_split_vs_union_two_thirds(self):
        a = np.zeros((8, 8), np.int32)
        a[0:2, 0:4] = 1
        a[4:6, 0:4] = 2
        b = np.where(a > 0, 1, 0)
        assert best_dice(a, b) == pytest.approx(2 / 3)
        assert best_dice(b, a) == pytest.approx(2 / 3)
        assert sbd(a, b) == pytest.approx(2 / 3)
        assert sbd(b, a) == pytest.approx(2 / 3)

    def test_frame_mismatch(self):
        with pytest.raises(ValueError):
            best_dice(np.zeros((4, 4), np.int32), np.zeros((5, 5), np.int32))


class TestSbd:
    def test_identical(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            a = random_label_map(rng)
            assert sbd(a, a) == pytest.approx(1.0)

    def test_both_empty(self):
        z = np.zeros((6, 6), np.int32)
        assert sbd(z, z) == 1.0

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a, b = random_label_map(rng), random_label_map(rng)
            assert sbd(a, b) == pytest.approx(sbd(b, a), abs=1e-12)

    def test_relabeling_invariant(self):
        rng = np.random.default_rng(3)
        a, b = random_label_map(rng), random_label_map(rng)
        ids = np.unique(a[a > 0])
        remap = np.zeros(int(a.max()) + 1, np.int32)
        for i, k in enumerate(rng.permutation(ids)):
            remap[ids[i]] = 100 + int(k)
        a2 = remap[a]
        assert sbd(a2, b) == pytest.approx(sbd(a, b), abs=1e-12)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            a, b = random_label_map(rng), random_label_map(rng)
            assert sbd(a, b) == pytest.approx(brute_sbd(a, b), abs=1e-12)
            assert best_dice(a, b, iou=True) == pytest.approx(
                brute_best_dice(a, b, iou=True), abs=1e-12
            ) or not ((a > 0).any() and (b > 0).any())

    def test_per_crop_averaging_differs(self):
        a = np.zeros((8, 8), np.int32)
        a[0:2, 0:2] = 1
        a[6:8, 6:8] = 2
        b = a.copy()
        b[6:8, 6:8] = 0  # one quadrant entirely wrong
        whole = sbd_dataset([a], [b])
        crops = sbd_dataset([a], [b], per_crop=True, tile=(4, 4))
        assert whole != crops


class TestDic:
    def test_examples(self):
        rng = np.random.default_rng(5)
        a = random_label_map(rng)
        assert dic(a, a) == 0
        five = np.zeros((10, 10), np.int32)
        for k in range(1, 6):
            five[k - 1, 0] = k
        three = np.zeros((10, 10), np.int32)
        for k in range(1, 4):
            three[k - 1, 0] = k
        assert dic(five, three) == 2

    def test_dataset_mean(self):
        maps = []
        for n in (1, 2, 3):
            m = np.zeros((8, 8), np.int32)
            for k in range(1, n + 1):
                m[k, k] = k
            maps.append(m)
        base = maps[0]
        vals = [dic(m, base) for m in maps]
        assert np.mean(vals) == pytest.approx(1.0)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            a, b = random_label_map(rng), random_label_map(rng)
            assert dic(a, b) == brute_dic(a, b)


def one_blob(size, y0, x0, h, w):
    m = np.zeros((size, size), bool)
    m[y0 : y0 + h, x0 : x0 + w] = True
    return m


class TestCocoAp:
    def test_exact_match_is_one(self):
        gt = one_blob(16, 2, 2, 6, 6)
        out = coco_ap([(gt.copy(), 0.9)], [gt])
        assert out["ap"] == pytest.approx(1.0)
        assert out["ap50"] == 1.0 and out["ap75"] == 1.0

    def test_iou_point_six(self):
        # 6x10 pred vs 6x10 gt shifted to overlap 6x6... build IoU = 0.6 exactly:
        # inter 30, union 50 -> iou 0.6 with 6x8 vs 6x? ... use areas 40/40 inter 30
        gt = one_blob(32, 0, 0, 5, 8)       # 40 px
        pred = one_blob(32, 0, 2, 5, 8)     # 40 px, inter 30, union 50, IoU 0.6
        out = coco_ap([(pred, 0.8)], [gt])
        assert out["ap50"] == pytest.approx(1.0)
        assert out["ap75"] == pytest.approx(0.0)

    def test_empty_predictions(self):
        gt = one_blob(8, 1, 1, 3, 3)
        out = coco_ap([], [gt])
        assert out["ap"] == 0.0

    def test_duplicate_predictions_penalized(self):
        size = 32
        gts = [one_blob(size, 0, 0, 8, 8), one_blob(size, 12, 12, 8, 8), one_blob(size, 24, 0, 6, 6)]
        preds = [
            (gts[0].copy(), 0.95),
            (gts[0].copy(), 0.90),   # duplicate: matched GT already taken
            (gts[1].copy(), 0.85),
            (gts[2].copy(), 0.80),
        ]
        out = coco_ap(preds, gts)
        # PR sequence: tp at ranks 1,3,4; fp at rank 2
        expect = brute_coco_ap([preds], [gts], COCO_THRESHOLDS)
        assert out["ap"] == pytest.approx(expect, abs=1e-9)
        assert out["ap"] < 1.0

    def test_score_rescaling_invariance(self):
        rng = np.random.default_rng(7)
        gts = [one_blob(16, 2, 2, 5, 5), one_blob(16, 9, 9, 5, 5)]
        preds = [(one_blob(16, 2, 2, 5, 6), 0.7), (one_blob(16, 9, 8, 5, 6), 0.4)]
        a = coco_ap(preds, gts)
        preds2 = [(m, 0.1 + 0.5 * s) for m, s in preds]
        b = coco_ap(preds2, gts)
        assert a == b

    def test_ap_not_above_ap50(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            pred = random_label_map(rng)
            gt = random_label_map(rng)
            ids = np.unique(pred[pred > 0])
            preds = [(pred == k, float(rng.random())) for k in ids]
            out = coco_ap(preds, masks_from_labels(gt))
            assert out["ap"] <= out["ap50"] + 1e-12

    def test_matches_bruteforce_random_maps(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            pred = random_label_map(rng)
            gt = random_label_map(rng)
            ids = np.unique(pred[pred > 0])
            scores = {int(k): float(rng.random()) for k in ids}
            preds = [(pred == k, scores[int(k)]) for k in ids]
            gts = masks_from_labels(gt)
            got = coco_ap(preds, gts)
            assert got["ap"] == pytest.approx(
                brute_coco_ap([preds], [gts], COCO_THRESHOLDS), abs=1e-9
            )
            assert got["ap50"] == pytest.approx(
                brute_coco_ap([preds], [gts], [0.5]), abs=1e-9
            )

    def test_size_buckets_match_bruteforce(self):
        rng = np.random.default_rng(10)
        for _ in range(30):
            pred = random_label_map(rng, size=24)
            gt = random_label_map(rng, size=24)
            ids = np.unique(pred[pred > 0])
            preds = [(pred == k, float(rng.random())) for k in ids]
            gts = masks_from_labels(gt)
            got = coco_ap(preds, gts)
            for name, bucket in SIZE_BUCKETS.items():
                ref = brute_coco_ap([preds], [gts], COCO_THRESHOLDS, bucket=bucket)
                assert got[f"ap_{name}"] == pytest.approx(ref, abs=1e-9), name

    def test_dataset_pooling_matches_bruteforce(self):
        rng = np.random.default_rng(11)
        image_preds, image_gts = [], []
        for _ in range(5):
            pred = random_label_map(rng)
            gt = random_label_map(rng)
            ids = np.unique(pred[pred > 0])
            image_preds.append([(pred == k, float(rng.random())) for k in ids])
            image_gts.append(masks_from_labels(gt))
        got = coco_ap_dataset(image_preds, image_gts)
        assert got["ap"] == pytest.approx(
            brute_coco_ap(image_preds, image_gts, COCO_THRESHOLDS), abs=1e-9
        )


class TestScoreImage:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(12)
        gt = random_label_map(rng)
        while not (gt > 0).any():
            gt = random_label_map(rng)
        s = score_image(gt, gt)
        assert s.sbd == pytest.approx(1.0)
        assert s.dic == 0.0
        assert s.ap == pytest.approx(1.0)
        assert isinstance(s, SegScore)
