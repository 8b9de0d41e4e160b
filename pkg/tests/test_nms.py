"""Tests for greedy non-maximum suppression against a brute-force oracle."""

import numpy as np
import pytest

from latefusion.geometry import Box2D, Box3D, iou_2d, iou_3d, iou_bev
from latefusion.nms import DEFAULT_THRESHOLDS, NmsConfig, nms


def oracle_nms(boxes, scores, classes, cfg):
    """Literal greedy reference with scalar IoU calls."""
    def pair_iou(a, b):
        if cfg.metric == "2d":
            return iou_2d(Box2D(*a), Box2D(*b))
        if cfg.metric == "bev":
            return iou_bev(Box3D(*a), Box3D(*b))
        return iou_3d(Box3D(*a), Box3D(*b))

    candidates = [
        i for i in range(len(scores))
        if cfg.score_floor is None or scores[i] >= cfg.score_floor
    ]
    candidates.sort(key=lambda i: (-scores[i], i))
    kept = []
    while candidates:
        best = candidates.pop(0)
        kept.append(best)
        candidates = [
            i for i in candidates
            if classes[i] != classes[best]
            or pair_iou(boxes[i], boxes[best]) <= cfg.iou_threshold
        ]
    return kept


def random_boxes3d(rng, m):
    out = np.zeros((m, 7))
    for i in range(m):
        out[i] = [rng.uniform(1, 2), rng.uniform(1.4, 1.8), rng.uniform(3, 4.5),
                  rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-1, 0),
                  rng.uniform(-3.1, 3.1)]
    return out


class TestBasic:
    def test_identical_boxes_keep_higher_score(self):
        boxes = np.array([[1.5, 1.6, 4.0, 5.0, 2.0, -0.8, 0.1]] * 2)
        kept = nms(boxes, np.array([2.0, 1.0]), np.zeros(2, dtype=int))
        assert kept.tolist() == [0]
        kept = nms(boxes, np.array([1.0, 2.0]), np.zeros(2, dtype=int))
        assert kept.tolist() == [1]

    def test_disjoint_boxes_both_kept(self):
        boxes = np.array([
            [1.5, 1.6, 4.0, 5.0, 2.0, -0.8, 0.0],
            [1.5, 1.6, 4.0, 50.0, 20.0, -0.8, 0.0],
        ])
        kept = nms(boxes, np.array([1.0, 2.0]), np.zeros(2, dtype=int))
        assert sorted(kept.tolist()) == [0, 1]
        assert kept.tolist() == [1, 0]  # score-descending output

    def test_tie_breaks_to_lower_index(self):
        boxes = np.array([[1.5, 1.6, 4.0, 5.0, 2.0, -0.8, 0.0]] * 2)
        kept = nms(boxes, np.array([1.0, 1.0]), np.zeros(2, dtype=int))
        assert kept.tolist() == [0]

    def test_classes_never_suppress_each_other(self):
        boxes = np.array([[1.5, 1.6, 4.0, 5.0, 2.0, -0.8, 0.0]] * 2)
        kept = nms(boxes, np.array([2.0, 1.0]), np.array([0, 1]))
        assert kept.tolist() == [0, 1]

    def test_score_floor_prefilter(self):
        boxes = np.array([
            [1.5, 1.6, 4.0, 5.0, 2.0, -0.8, 0.0],
            [1.5, 1.6, 4.0, 50.0, 20.0, -0.8, 0.0],
        ])
        cfg = NmsConfig(score_floor=0.0)
        kept = nms(boxes, np.array([1.0, -1.0]), np.zeros(2, dtype=int), cfg)
        assert kept.tolist() == [0]

    def test_2d_metric(self):
        boxes = np.array([
            [0.0, 0.0, 100.0, 100.0],
            [10.0, 10.0, 110.0, 110.0],   # IoU ~ 0.68 > 0.5
            [200.0, 200.0, 300.0, 300.0],
        ])
        kept = nms(boxes, np.array([3.0, 2.0, 1.0]), np.zeros(3, dtype=int),
                   NmsConfig(metric="2d"))
        assert kept.tolist() == [0, 2]

    def test_default_thresholds(self):
        assert NmsConfig(metric="2d").iou_threshold == DEFAULT_THRESHOLDS["2d"]
        assert NmsConfig(metric="bev").iou_threshold == 0.1
        assert NmsConfig(metric="3d").iou_threshold == 0.1
        assert NmsConfig(metric="bev", iou_threshold=0.3).iou_threshold == 0.3

    def test_bad_config(self):
        with pytest.raises(ValueError):
            NmsConfig(metric="volumetric")
        with pytest.raises(ValueError):
            NmsConfig(iou_threshold=1.5)

    def test_nonfinite_scores_rejected(self):
        boxes = np.zeros((1, 7))
        boxes[0, :3] = 1.0
        with pytest.raises(ValueError):
            nms(boxes, np.array([np.nan]), np.zeros(1, dtype=int))

    def test_empty_input(self):
        kept = nms(np.zeros((0, 7)), np.zeros(0), np.zeros(0, dtype=int))
        assert kept.size == 0


class TestOracle:
    def test_five_box_example(self):
        rng = np.random.default_rng(0)
        boxes = random_boxes3d(rng, 5)
        scores = rng.normal(size=5)
        classes = np.zeros(5, dtype=int)
        cfg = NmsConfig(metric="bev")
        assert nms(boxes, scores, classes, cfg).tolist() == \
            oracle_nms(boxes, scores, classes, cfg)

    @pytest.mark.parametrize("metric", ["bev", "3d"])
    def test_random_battery(self, metric):
        rng = np.random.default_rng(hash(metric) % (2**32))
        for trial in range(30):
            m = int(rng.integers(0, 25))
            boxes = random_boxes3d(rng, m)
            scores = rng.normal(size=m)
            classes = rng.integers(0, 3, m)
            cfg = NmsConfig(
                metric=metric,
                iou_threshold=float(rng.uniform(0.05, 0.7)),
                score_floor=float(rng.normal()) if trial % 3 == 0 else None,
            )
            assert nms(boxes, scores, classes, cfg).tolist() == \
                oracle_nms(boxes, scores, classes, cfg)

    def test_random_battery_2d(self):
        rng = np.random.default_rng(77)
        for _ in range(30):
            m = int(rng.integers(0, 25))
            boxes = np.zeros((m, 4))
            for i in range(m):
                x1, y1 = rng.uniform(0, 500, 2)
                boxes[i] = [x1, y1, x1 + rng.uniform(10, 200),
                            y1 + rng.uniform(10, 200)]
            scores = rng.normal(size=m)
            classes = rng.integers(0, 3, m)
            cfg = NmsConfig(metric="2d", iou_threshold=float(rng.uniform(0.2, 0.7)))
            assert nms(boxes, scores, classes, cfg).tolist() == \
                oracle_nms(boxes, scores, classes, cfg)


class TestInvariants:
    def make_case(self, rng, m=20):
        return (random_boxes3d(rng, m), rng.normal(size=m),
                rng.integers(0, 2, m))

    def test_output_scores_descending(self):
        rng = np.random.default_rng(5)
        boxes, scores, classes = self.make_case(rng)
        kept = nms(boxes, scores, classes)
        assert np.all(np.diff(scores[kept]) <= 0)

    def test_no_kept_pair_exceeds_threshold(self):
        rng = np.random.default_rng(6)
        boxes, scores, classes = self.make_case(rng)
        cfg = NmsConfig(metric="bev", iou_threshold=0.2)
        kept = nms(boxes, scores, classes, cfg)
        for a in kept:
            for b in kept:
                if a < b and classes[a] == classes[b]:
                    assert iou_bev(Box3D(*boxes[a]), Box3D(*boxes[b])) <= 0.2

    def test_idempotent(self):
        rng = np.random.default_rng(7)
        boxes, scores, classes = self.make_case(rng)
        kept = nms(boxes, scores, classes)
        again = nms(boxes[kept], scores[kept], classes[kept])
        assert again.tolist() == list(range(len(kept)))
