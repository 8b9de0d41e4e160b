"""Tests for target assignment, focal loss, Adam, and the training loop."""

import numpy as np
import pytest

from latefusion.candidates import (
    FrameCandidates,
    GroundTruthObject,
    ObjectClass,
)
from latefusion.encoder import SENTINEL, SparseJointTensor
from latefusion.geometry import Box2D, Box3D, identity_calibration, iou_3d
from latefusion.network import init_params, sigmoid
from latefusion.training import (
    AdamState,
    LossConfig,
    TrainConfig,
    adam_step,
    assign_targets,
    focal_loss,
    format_loss_log,
    train,
)

from test_geometry import monte_carlo_iou_bev
from test_network import make_tensor

CALIB = identity_calibration(1000, 1000)


def frame_with_boxes(boxes3d, classes3d):
    n = len(boxes3d)
    return FrameCandidates.from_arrays(
        "f", CALIB,
        boxes2d=np.zeros((0, 4)), scores2d=np.zeros(0), classes2d=np.zeros(0),
        boxes3d=np.array(boxes3d, dtype=float),
        scores3d=np.zeros(n), classes3d=np.array(classes3d),
    )


def gt(class_id, box3d, dont_care=False):
    return GroundTruthObject(
        class_id=class_id, box2d=Box2D(0.0, 0.0, 10.0, 10.0),
        box3d=box3d, truncation=0.0, occlusion=0, is_dont_care=dont_care,
    )


class TestAssignTargets:
    def test_identical_box_positive(self):
        row = [1.5, 1.6, 4.0, 10.0, 3.0, -0.8, 0.3]
        fc = frame_with_boxes([row], [int(ObjectClass.CAR)])
        labels = assign_targets(fc, [gt(ObjectClass.CAR, Box3D(*row))])
        assert labels.tolist() == [1.0]

    def test_disjoint_negative(self):
        fc = frame_with_boxes(
            [[1.5, 1.6, 4.0, 10.0, 3.0, -0.8, 0.0]], [int(ObjectClass.CAR)]
        )
        labels = assign_targets(
            fc, [gt(ObjectClass.CAR, Box3D(1.5, 1.6, 4.0, 40.0, -20.0, -0.8, 0.0))]
        )
        assert labels.tolist() == [0.0]

    def test_borderline_car_below_threshold(self):
        # Longitudinal shift of 0.94 m gives IoU (4-d)/(4+d) ~ 0.619 < 0.7.
        cand = Box3D(1.5, 1.6, 4.0, 10.0, 3.0, -0.8, 0.0)
        truth = Box3D(1.5, 1.6, 4.0, 10.94, 3.0, -0.8, 0.0)
        expected = (4.0 - 0.94) / (4.0 + 0.94)
        assert iou_3d(cand, truth) == pytest.approx(expected, abs=1e-12)
        mc = monte_carlo_iou_bev(cand, truth, 400_000, np.random.default_rng(3))
        assert abs(mc - expected) < 2e-3  # same z-extent: 3D IoU == BEV IoU
        fc = frame_with_boxes(
            [[1.5, 1.6, 4.0, 10.0, 3.0, -0.8, 0.0]], [int(ObjectClass.CAR)]
        )
        labels = assign_targets(fc, [gt(ObjectClass.CAR, truth)])
        assert labels.tolist() == [0.0]

    def test_same_overlap_passes_cyclist_threshold(self):
        # 0.62 fails the car bar but clears the 0.5 cyclist bar.
        fc = frame_with_boxes(
            [[1.5, 1.6, 4.0, 10.0, 3.0, -0.8, 0.0]], [int(ObjectClass.CYCLIST)]
        )
        truth = Box3D(1.5, 1.6, 4.0, 10.94, 3.0, -0.8, 0.0)
        labels = assign_targets(fc, [gt(ObjectClass.CYCLIST, truth)])
        assert labels.tolist() == [1.0]

    def test_class_mismatch_negative(self):
        row = [1.5, 1.6, 4.0, 10.0, 3.0, -0.8, 0.0]
        fc = frame_with_boxes([row], [int(ObjectClass.CAR)])
        labels = assign_targets(fc, [gt(ObjectClass.PEDESTRIAN, Box3D(*row))])
        assert labels.tolist() == [0.0]

    def test_dont_care_never_supports(self):
        row = [1.5, 1.6, 4.0, 10.0, 3.0, -0.8, 0.0]
        fc = frame_with_boxes([row], [int(ObjectClass.CAR)])
        labels = assign_targets(
            fc, [gt(ObjectClass.CAR, Box3D(*row), dont_care=True)]
        )
        assert labels.tolist() == [0.0]

    def test_one_gt_many_candidates(self):
        row = [1.5, 1.6, 4.0, 10.0, 3.0, -0.8, 0.0]
        near = [1.5, 1.6, 4.0, 10.1, 3.0, -0.8, 0.0]
        fc = frame_with_boxes([row, near, row], [int(ObjectClass.CAR)] * 3)
        labels = assign_targets(fc, [gt(ObjectClass.CAR, Box3D(*row))])
        assert labels.tolist() == [1.0, 1.0, 1.0]

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(9)
        rows = [[1.5, 1.6, 4.0, rng.uniform(5, 30), rng.uniform(-10, 10), -0.8,
                 rng.uniform(-3, 3)] for _ in range(12)]
        classes = rng.integers(0, 3, 12).tolist()
        gts = [gt(ObjectClass(int(c)),
                  Box3D(1.5, 1.6, 4.0, rng.uniform(5, 30), rng.uniform(-10, 10),
                        -0.8, rng.uniform(-3, 3)))
               for c in rng.integers(0, 3, 6)]
        fc = frame_with_boxes(rows, classes)
        labels = assign_targets(fc, gts)
        perm = rng.permutation(12)
        fc_p = frame_with_boxes([rows[i] for i in perm],
                                [classes[i] for i in perm])
        labels_p = assign_targets(fc_p, gts)
        np.testing.assert_array_equal(labels_p, labels[perm])

    def test_bev_metric_ignores_vertical_offset(self):
        row = [1.5, 1.6, 4.0, 10.0, 3.0, -0.8, 0.0]
        lifted = Box3D(1.5, 1.6, 4.0, 10.0, 3.0, 5.0, 0.0)
        fc = frame_with_boxes([row], [int(ObjectClass.CAR)])
        assert assign_targets(fc, [gt(ObjectClass.CAR, lifted)],
                              TrainConfig(match_metric="3d")).tolist() == [0.0]
        assert assign_targets(fc, [gt(ObjectClass.CAR, lifted)],
                              TrainConfig(match_metric="bev")).tolist() == [1.0]


def bce_reference(logits, labels):
    p = sigmoid(np.asarray(logits, dtype=float))
    p = np.clip(p, 1e-7, 1.0 - 1e-7)
    terms = -(labels * np.log(p) + (1 - np.asarray(labels)) * np.log(1 - p))
    return float(terms.mean())


class TestFocalLoss:
    def test_logit_zero_positive(self):
        loss, _ = focal_loss(np.array([0.0]), np.array([1.0]))
        assert loss == pytest.approx(0.043322, abs=1e-6)

    def test_logit_zero_negative(self):
        loss, _ = focal_loss(np.array([0.0]), np.array([0.0]))
        assert loss == pytest.approx(0.129966, abs=1e-6)

    def test_confident_correct_vanishes(self):
        loss, _ = focal_loss(np.array([30.0]), np.array([1.0]))
        assert 0.0 <= loss < 1e-11
        loss, _ = focal_loss(np.array([-30.0]), np.array([0.0]))
        assert 0.0 <= loss < 1e-11

    def test_nonnegative_and_positive_when_uncertain(self):
        rng = np.random.default_rng(12)
        logits = rng.normal(0, 3, 64)
        labels = rng.integers(0, 2, 64).astype(float)
        loss, _ = focal_loss(logits, labels)
        assert loss > 0.0

    def test_disabled_equals_bce(self):
        rng = np.random.default_rng(21)
        logits = rng.normal(0, 4, 50)
        labels = rng.integers(0, 2, 50).astype(float)
        loss, _ = focal_loss(logits, labels, LossConfig(focal_enabled=False))
        assert loss == pytest.approx(bce_reference(logits, labels), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(404)
        eps = 1e-5
        for _ in range(100):
            logit = float(rng.uniform(-6, 6))
            label = float(rng.integers(0, 2))
            cfg = LossConfig(
                alpha=float(rng.uniform(0.05, 0.95)),
                gamma=float(rng.uniform(0.0, 4.0)),
            )
            _, d = focal_loss(np.array([logit]), np.array([label]), cfg)
            lp, _ = focal_loss(np.array([logit + eps]), np.array([label]), cfg)
            lm, _ = focal_loss(np.array([logit - eps]), np.array([label]), cfg)
            fd = (lp - lm) / (2 * eps)
            assert abs(fd - d[0]) / max(abs(fd), 1e-12) < 1e-5

    def test_mean_reduction(self):
        la, _ = focal_loss(np.array([0.7]), np.array([1.0]))
        lb, _ = focal_loss(np.array([-0.3]), np.array([0.0]))
        both, d = focal_loss(np.array([0.7, -0.3]), np.array([1.0, 0.0]))
        assert both == pytest.approx((la + lb) / 2, abs=1e-15)
        assert d.shape == (2,)

    def test_empty_input(self):
        loss, d = focal_loss(np.zeros(0), np.zeros(0))
        assert loss == 0.0 and d.size == 0

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ValueError):
            focal_loss(np.zeros(3), np.zeros(2))

    def test_bad_alpha_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(alpha=1.0)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        params = init_params(5)
        grads = params.from_flat(np.zeros(params.flat().size))
        state = AdamState.zeros(params.flat().size)
        new_params, new_state = adam_step(params, grads, state, lr=3e-3)
        np.testing.assert_array_equal(new_params.flat(), params.flat())
        assert new_state.step == 1

    def test_step_one_magnitude(self):
        params = init_params(5)
        ones = params.from_flat(np.ones(params.flat().size))
        state = AdamState.zeros(params.flat().size)
        lr = 3e-3
        new_params, _ = adam_step(params, ones, state, lr=lr)
        delta = new_params.flat() - params.flat()
        np.testing.assert_allclose(delta, -lr, atol=lr * 1e-6)

    def test_state_not_mutated(self):
        params = init_params(5)
        ones = params.from_flat(np.ones(params.flat().size))
        state = AdamState.zeros(params.flat().size)
        adam_step(params, ones, state, lr=1e-3)
        assert state.step == 0
        assert np.all(state.m == 0.0)


def labeled_frame(rng, positive_signal=True):
    """A small separable tensor: positives carry high iou and s3d."""
    n = 4
    rows = []
    labels = []
    for j in range(n):
        pos = j < 2
        labels.append(1.0 if pos else 0.0)
        if pos and positive_signal:
            rows.append((0, j, rng.uniform(0.7, 0.95), rng.uniform(1.5, 2.5),
                         rng.uniform(1.5, 2.5), rng.uniform(0.1, 0.4)))
        else:
            rows.append((SENTINEL, j, -1.0, -1.0, rng.uniform(-2.5, -1.5),
                         rng.uniform(0.6, 0.9)))
    channels = np.array([r[2:] for r in rows])
    tensor = SparseJointTensor(
        class_id=ObjectClass.CAR, k=1, n=n,
        channels=channels,
        el_i=np.array([r[0] for r in rows], dtype=np.int32),
        el_j=np.array([r[1] for r in rows], dtype=np.int32),
        starts=np.arange(n + 1, dtype=np.int64),
        indices2d=np.arange(1, dtype=np.int64),
        indices3d=np.arange(n, dtype=np.int64),
        frame_id=f"f{rng.integers(1 << 20)}",
    )
    return tensor, np.array(labels)


class TestTrainLoop:
    def test_lr_schedule(self):
        cfg = TrainConfig()
        assert cfg.lr_at(0) == 3e-3
        assert cfg.lr_at(5) == pytest.approx(9.8304e-4, rel=1e-6)

    def test_single_frame_three_epochs_three_steps(self, monkeypatch):
        import latefusion.training as training_mod

        calls = []
        original = training_mod.adam_step

        def counting(*args, **kwargs):
            calls.append(1)
            return original(*args, **kwargs)

        monkeypatch.setattr(training_mod, "adam_step", counting)
        dataset = [labeled_frame(np.random.default_rng(0))]
        train(dataset, TrainConfig(epochs=3, seed=1))
        assert len(calls) == 3

    def test_separable_set_improves(self):
        rng = np.random.default_rng(17)
        dataset = [labeled_frame(rng) for _ in range(20)]
        _, log_rows = train(dataset, TrainConfig(epochs=8, seed=3))
        assert log_rows[-1][1] < log_rows[0][1]

    def test_bitwise_determinism(self):
        rng = np.random.default_rng(31)
        dataset = [labeled_frame(rng) for _ in range(6)]
        p1, log1 = train(dataset, TrainConfig(epochs=3, seed=11))
        p2, log2 = train(dataset, TrainConfig(epochs=3, seed=11))
        np.testing.assert_array_equal(p1.flat(), p2.flat())
        assert log1 == log2

    def test_seed_changes_result(self):
        rng = np.random.default_rng(31)
        dataset = [labeled_frame(rng) for _ in range(6)]
        p1, _ = train(dataset, TrainConfig(epochs=2, seed=11))
        p2, _ = train(dataset, TrainConfig(epochs=2, seed=12))
        assert not np.array_equal(p1.flat(), p2.flat())

    def test_zero_candidate_frame_skipped(self, caplog):
        rng = np.random.default_rng(41)
        empty = SparseJointTensor(
            class_id=ObjectClass.CAR, k=2, n=0,
            channels=np.zeros((0, 4)),
            el_i=np.zeros(0, dtype=np.int32), el_j=np.zeros(0, dtype=np.int32),
            starts=np.zeros(1, dtype=np.int64),
            indices2d=np.arange(2, dtype=np.int64),
            indices3d=np.zeros(0, dtype=np.int64),
            frame_id="empty",
        )
        dataset = [labeled_frame(rng), (empty, np.zeros(0))]
        with caplog.at_level("INFO", logger="latefusion.training"):
            _, log_rows = train(dataset, TrainConfig(epochs=1, seed=2))
        assert any("skipping" in r.message for r in caplog.records)
        assert len(log_rows) == 1

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train([], TrainConfig(epochs=1))

    def test_label_shape_validated(self):
        t, labels = labeled_frame(np.random.default_rng(0))
        with pytest.raises(ValueError):
            train([(t, labels[:-1])], TrainConfig(epochs=1))

    def test_progress_callback(self):
        seen = []
        dataset = [labeled_frame(np.random.default_rng(0))]
        train(dataset, TrainConfig(epochs=2, seed=1),
              progress=lambda e, loss, lr: seen.append((e, lr)))
        assert [e for e, _ in seen] == [0, 1]
        assert seen[1][1] == pytest.approx(3e-3 * 0.8)


class TestLossLog:
    def test_csv_format(self):
        text = format_loss_log([(0, 0.25, 3e-3), (1, 0.125, 2.4e-3)])
        lines = text.strip().splitlines()
        assert lines[0] == "epoch,mean_loss,lr"
        assert lines[1] == "0,0.25,0.003"
        assert len(lines) == 3


class TestRandomTensorTraining:
    def test_loss_drops_on_structured_tensors(self):
        # Labels correlated with the iou channel should be learnable.
        rng = np.random.default_rng(71)
        dataset = []
        for _ in range(15):
            t = make_tensor(rng, n_max=6, k_max=6)
            best_iou = np.array([t.channels[t.per_j(j), 0].max() for j in range(t.n)])
            labels = (best_iou > 0.5).astype(float)
            dataset.append((t, labels))
        _, log_rows = train(dataset, TrainConfig(epochs=10, seed=5))
        assert log_rows[-1][1] < log_rows[0][1]
