"""Tests for candidate parsing, serialization, and score conversions."""

import math

import numpy as np
import pytest

from latefusion.candidates import (
    Detection2D,
    Detection3D,
    FrameCandidates,
    GroundTruthObject,
    ObjectClass,
    class_from_name,
    format_detections_2d,
    format_detections_3d,
    format_labels,
    normalize_angles,
    parse_detections_2d,
    parse_detections_3d,
    parse_labels,
    to_log_score,
    to_sigmoid_score,
)
from latefusion.errors import ParseError, UsageError
from latefusion.geometry import Box2D, Box3D, lidar_box_to_camera, parse_calibration

from test_geometry import KITTI_CALIB_TEXT


@pytest.fixture(scope="module")
def kitti_calib():
    return parse_calibration(KITTI_CALIB_TEXT, 1242, 375)


class TestClassMapping:
    def test_known_names(self):
        assert class_from_name("Car") is ObjectClass.CAR
        assert class_from_name("Pedestrian") is ObjectClass.PEDESTRIAN
        assert class_from_name("Cyclist") is ObjectClass.CYCLIST

    def test_unknown_maps_to_other(self):
        assert class_from_name("Van") is ObjectClass.OTHER
        assert class_from_name("Tram") is ObjectClass.OTHER


class TestParseDetections2D:
    def test_single_line(self):
        dets = parse_detections_2d("Car 10 20 110 220 2.5\n")
        assert len(dets) == 1
        det = dets[0]
        assert det.box == Box2D(10, 20, 110, 220)
        assert det.score == 2.5
        assert det.class_id is ObjectClass.CAR

    def test_empty_file(self):
        assert parse_detections_2d("") == []
        assert parse_detections_2d("\n\n# comment\n") == []

    def test_wrong_token_count_reports_line(self):
        with pytest.raises(ParseError, match="line 2"):
            parse_detections_2d("Car 10 20 110 220 2.5\nCar 1 2 3 4\n")

    def test_non_numeric_reports_line(self):
        with pytest.raises(ParseError, match="line 1"):
            parse_detections_2d("Car 10 oops 110 220 2.5\n")

    def test_degenerate_box_reports_line(self):
        with pytest.raises(ParseError, match="line 1"):
            parse_detections_2d("Car 110 20 10 220 2.5\n")

    def test_order_preserved_and_comments_skipped(self):
        text = "# header\nCar 0 0 10 10 1\n\nPedestrian 5 5 20 30 -0.5\n"
        dets = parse_detections_2d(text)
        assert [d.class_id for d in dets] == [ObjectClass.CAR, ObjectClass.PEDESTRIAN]

    def test_sigmoid_scale_converts(self):
        dets = parse_detections_2d("Car 0 0 10 10 0.9\n", score_scale="sigmoid")
        assert dets[0].score == pytest.approx(math.log(9.0), abs=1e-9)

    def test_bad_scale_rejected(self):
        with pytest.raises(UsageError, match="score_scale"):
            parse_detections_2d("", score_scale="linear")


class TestParseDetections3D:
    def test_internal_format(self):
        dets = parse_detections_3d("Car 1.5 1.6 3.9 10.0 -2.0 -0.8 0.1 3.2\n")
        assert len(dets) == 1
        b = dets[0].box
        assert (b.h, b.w, b.l) == (1.5, 1.6, 3.9)
        assert (b.x, b.y, b.z) == (10.0, -2.0, -0.8)
        assert b.theta == pytest.approx(0.1)
        assert dets[0].score == 3.2

    def test_empty_file(self):
        assert parse_detections_3d("") == []

    def test_wrong_field_count(self):
        with pytest.raises(ParseError, match="line 1"):
            parse_detections_3d("Car 1.5 1.6 3.9 10.0 -2.0 -0.8 0.1\n")

    def test_kitti_format_requires_calib(self):
        row = ("Car 0.0 0 -1.58 587 173 614 200 "
               "1.65 1.67 3.64 -0.65 1.71 46.7 -1.59 2.3\n")
        with pytest.raises(UsageError, match="calibration"):
            parse_detections_3d(row, kitti_format=True)

    def test_kitti_round_trip(self, kitti_calib):
        # Oracle: converting back to the camera frame with the geometry
        # module's rigid transforms recovers the file's values.
        row = ("Car 0.0 0 -1.58 587 173 614 200 "
               "1.65 1.67 3.64 -0.65 1.71 46.7 -1.59 2.3\n")
        dets = parse_detections_3d(row, kitti_format=True, calib=kitti_calib)
        assert len(dets) == 1
        h, w, l, x, y, z, ry = lidar_box_to_camera(kitti_calib, dets[0].box)
        np.testing.assert_allclose(
            [h, w, l, x, y, z], [1.65, 1.67, 3.64, -0.65, 1.71, 46.7], atol=1e-6
        )
        assert abs(ry - (-1.59)) < 1e-3
        assert dets[0].score == 2.3

    def test_malformed_kitti_row(self, kitti_calib):
        with pytest.raises(ParseError, match="line 1"):
            parse_detections_3d("Car 1 2 3\n", kitti_format=True, calib=kitti_calib)


class TestParseLabels:
    DONTCARE = "DontCare -1 -1 -10 559 175 592 194 -1 -1 -1 -1000 -1000 -1000 -10\n"
    CAR = ("Car 0.1 1 -1.58 587 173 614 200 "
           "1.65 1.67 3.64 -0.65 1.71 46.7 -1.59\n")

    def test_dontcare_row(self, kitti_calib):
        objs = parse_labels(self.DONTCARE, kitti_calib)
        assert len(objs) == 1
        obj = objs[0]
        assert obj.is_dont_care
        assert obj.box2d == Box2D(559, 175, 592, 194)
        assert obj.box3d is None

    def test_car_row_converted(self, kitti_calib):
        objs = parse_labels(self.CAR, kitti_calib)
        obj = objs[0]
        assert obj.class_id is ObjectClass.CAR
        assert obj.truncation == pytest.approx(0.1)
        assert obj.occlusion == 1
        # Oracle: geometry round-trip recovers the camera-frame fields.
        h, w, l, x, y, z, ry = lidar_box_to_camera(kitti_calib, obj.box3d)
        np.testing.assert_allclose(
            [h, w, l, x, y, z], [1.65, 1.67, 3.64, -0.65, 1.71, 46.7], atol=1e-6
        )

    def test_blank_trailing_line_ignored(self, kitti_calib):
        objs = parse_labels(self.CAR + "\n\n", kitti_calib)
        assert len(objs) == 1

    def test_malformed_line_number(self, kitti_calib):
        with pytest.raises(ParseError, match="line 2"):
            parse_labels(self.CAR + "Car 1 2 3\n", kitti_calib)


class TestScoreScales:
    def test_half_maps_to_zero(self):
        assert to_log_score(0.5) == pytest.approx(0.0)

    def test_zero_maps_to_half(self):
        assert to_sigmoid_score(0.0) == pytest.approx(0.5)

    def test_point_nine(self):
        assert to_log_score(0.9) == pytest.approx(2.197225, abs=1e-6)

    def test_sigmoid_examples(self):
        np.testing.assert_allclose(
            to_sigmoid_score(np.array([-1.0, 2.0])), [0.26894142, 0.88079708], atol=1e-8
        )

    def test_clamping(self):
        assert to_log_score(0.0) == pytest.approx(math.log(1e-7 / (1 - 1e-7)))
        assert to_log_score(1.0) == pytest.approx(-math.log(1e-7 / (1 - 1e-7)))

    def test_round_trip_within_1e9(self):
        ps = np.concatenate([
            np.array([1e-6, 0.5, 1 - 1e-6]),
            np.random.default_rng(3).uniform(1e-6, 1 - 1e-6, 500),
        ])
        back = to_sigmoid_score(to_log_score(ps))
        np.testing.assert_allclose(back, ps, atol=1e-9)

    def test_array_and_scalar_types(self):
        assert isinstance(to_log_score(0.7), float)
        assert isinstance(to_sigmoid_score(np.array([0.0, 1.0])), np.ndarray)


class TestSerializationRoundTrip:
    def test_detections_2d(self):
        rng = np.random.default_rng(5)
        dets = []
        for _ in range(20):
            x1, y1 = rng.uniform(0, 500, 2)
            dets.append(Detection2D(
                box=Box2D(x1, y1, x1 + rng.uniform(1, 300), y1 + rng.uniform(1, 200)),
                score=float(rng.normal(0, 3)),
                class_id=ObjectClass(int(rng.integers(0, 3))),
            ))
        back = parse_detections_2d(format_detections_2d(dets))
        assert len(back) == len(dets)
        for orig, rt in zip(dets, back):
            assert rt.class_id == orig.class_id
            np.testing.assert_allclose(
                [rt.box.x1, rt.box.y1, rt.box.x2, rt.box.y2, rt.score],
                [orig.box.x1, orig.box.y1, orig.box.x2, orig.box.y2, orig.score],
                rtol=1e-8,
            )

    def test_detections_3d(self):
        rng = np.random.default_rng(7)
        dets = []
        for _ in range(20):
            dets.append(Detection3D(
                box=Box3D(
                    h=float(rng.uniform(0.5, 3)), w=float(rng.uniform(0.5, 3)),
                    l=float(rng.uniform(0.5, 6)), x=float(rng.uniform(-50, 50)),
                    y=float(rng.uniform(-50, 50)), z=float(rng.uniform(-2, 2)),
                    theta=float(rng.uniform(-math.pi, math.pi)),
                ),
                score=float(rng.normal(0, 3)),
                class_id=ObjectClass(int(rng.integers(0, 3))),
            ))
        back = parse_detections_3d(format_detections_3d(dets))
        for orig, rt in zip(dets, back):
            assert rt.class_id == orig.class_id
            np.testing.assert_allclose(
                [rt.box.h, rt.box.w, rt.box.l, rt.box.x, rt.box.y, rt.box.z,
                 rt.box.theta, rt.score],
                [orig.box.h, orig.box.w, orig.box.l, orig.box.x, orig.box.y,
                 orig.box.z, orig.box.theta, orig.score],
                rtol=1e-8, atol=1e-8,
            )

    def test_labels(self, kitti_calib):
        objs = [
            GroundTruthObject(
                class_id=ObjectClass.CAR,
                box2d=Box2D(100, 120, 300, 250),
                box3d=Box3D(1.5, 1.7, 4.0, 20.0, -3.0, -0.8, 0.7),
                truncation=0.05,
                occlusion=1,
            ),
            GroundTruthObject(
                class_id=ObjectClass.OTHER,
                box2d=Box2D(10, 10, 40, 30),
                box3d=None,
                truncation=0.0,
                occlusion=0,
                is_dont_care=True,
            ),
        ]
        text = format_labels(objs, kitti_calib)
        back = parse_labels(text, kitti_calib)
        assert len(back) == 2
        car, dc = back
        assert car.class_id is ObjectClass.CAR
        assert car.occlusion == 1
        assert car.truncation == pytest.approx(0.05, abs=1e-8)
        b = car.box3d
        np.testing.assert_allclose(
            [b.h, b.w, b.l, b.x, b.y, b.z],
            [1.5, 1.7, 4.0, 20.0, -3.0, -0.8], atol=1e-6,
        )
        assert abs(b.theta - 0.7) < 1e-3
        assert dc.is_dont_care


class TestFrameCandidates:
    def test_from_detections_arrays_and_views(self):
        calib = parse_calibration(KITTI_CALIB_TEXT, 1242, 375)
        dets2d = parse_detections_2d("Car 0 0 10 10 1.0\nCyclist 5 5 20 30 -1.0\n")
        dets3d = parse_detections_3d("Car 1.5 1.6 3.9 10 -2 -0.8 0.1 3.2\n")
        fc = FrameCandidates.from_detections("000001", calib, dets2d, dets3d)
        assert fc.k == 2 and fc.n == 1
        np.testing.assert_array_equal(fc.boxes2d[1], [5, 5, 20, 30])
        assert fc.classes2d.tolist() == [ObjectClass.CAR, ObjectClass.CYCLIST]
        assert fc.dets3d[0].box.l == 3.9
        assert fc.dets2d[1].score == -1.0

    def test_from_arrays_normalizes_theta(self):
        calib = parse_calibration(KITTI_CALIB_TEXT, 1242, 375)
        fc = FrameCandidates.from_arrays(
            "000000", calib,
            boxes2d=np.zeros((0, 4)), scores2d=np.zeros(0), classes2d=np.zeros(0),
            boxes3d=np.array([[1.5, 1.6, 3.9, 10, -2, -0.8, 3 * math.pi]]),
            scores3d=np.array([1.0]), classes3d=np.array([0]),
        )
        assert -math.pi < fc.boxes3d[0, 6] <= math.pi

    def test_from_arrays_validates(self):
        calib = parse_calibration(KITTI_CALIB_TEXT, 1242, 375)
        with pytest.raises(ValueError, match="positive"):
            FrameCandidates.from_arrays(
                "x", calib,
                np.zeros((0, 4)), np.zeros(0), np.zeros(0),
                np.array([[0.0, 1, 1, 0, 0, 0, 0]]), np.array([1.0]), np.array([0]),
            )
        with pytest.raises(ValueError, match="finite"):
            FrameCandidates.from_arrays(
                "x", calib,
                np.zeros((0, 4)), np.zeros(0), np.zeros(0),
                np.array([[1.0, 1, 1, 0, 0, 0, 0]]), np.array([np.inf]), np.array([0]),
            )

    def test_normalize_angles_matches_scalar(self):
        from latefusion.geometry import normalize_angle
        rng = np.random.default_rng(11)
        thetas = rng.uniform(-20, 20, 200)
        vec = normalize_angles(thetas)
        for th, v in zip(thetas, vec):
            assert abs(v - normalize_angle(float(th))) < 1e-9
            assert -math.pi < v <= math.pi

    def test_nonfinite_score_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            Detection2D(box=Box2D(0, 0, 1, 1), score=float("nan"),
                        class_id=ObjectClass.CAR)
