"""Synthetic scenes and detector candidates for closed-loop verification.

Real detector outputs are not shippable, so this module builds a world
with the same *structure*: ground-truth cars scattered over a camera
frustum, a LiDAR-style 3D detector whose recall and score quality decay
with range, and an image-style 2D detector whose recall depends only on
projected box height.  The two failure modes are complementary — exactly
the situation in which candidate-level fusion has headroom, and
especially so at long range.

Two false-positive mechanisms matter downstream:

* **Ray ghosts** — 3D false positives placed at a wrong depth along the
  camera ray through a real object, with dimensions scaled by the same
  depth factor.  They project onto (almost) the ground-truth hull, so
  their image IoU and matched 2D score look exactly like a real
  detection's; only the 3D score channel separates them.  This is what
  makes the 3D-score channel load-bearing in ablations.
* **Uniform clutter** — ordinary false positives at random poses for
  both detectors.
* **Correlated clutter** — a fraction of 2D false positives sit on the
  image hulls of 3D clutter, the way both sensors fire on the same
  roadside distractor.  The pair looks like a confirmed detection in
  every geometric channel; only the low 2D score gives it away, which
  is what makes that channel worth fusing.

Every candidate is emitted pre-suppression, with a per-object
duplication count >= 1.  Generation is a pure function of the config:
frame f draws from ``default_rng((seed, f))``, so any frame subset is
reproducible in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .candidates import FrameCandidates, GroundTruthObject, ObjectClass
from .geometry import (
    Box2D,
    Box3D,
    Calibration,
    iou_2d,
    iou_bev,
    iou_bev_matrix,
    project_box3d,
)


@dataclass(frozen=True)
class CameraModel:
    """Synthetic pinhole camera (KITTI-style axis convention)."""

    focal_px: float = 900.0
    cx: float = 621.0
    cy: float = 187.5
    image_width: int = 1242
    image_height: int = 375


@dataclass(frozen=True)
class Detector3DModel:
    """Range-limited LiDAR-style detector simulation."""

    recall_base: float = 0.95
    recall_distance_decay: float = 0.025  # per meter
    position_noise_std: float = 0.15      # meters
    yaw_noise_std: float = 0.05           # radians
    dim_noise_std: float = 0.03           # relative
    score_signal_mean: float = 4.0
    score_signal_std: float = 1.2
    fp_per_frame: float = 9.0
    fp_score_mean: float = 0.0
    fp_score_std: float = 1.2
    fp_ray_fraction: float = 0.6
    duplicates_mean: float = 2.0

    def __post_init__(self):
        _check_probability("recall_base", self.recall_base)
        _check_probability("fp_ray_fraction", self.fp_ray_fraction)
        _check_nonneg("recall_distance_decay", self.recall_distance_decay)
        for name in ("position_noise_std", "yaw_noise_std", "dim_noise_std",
                     "score_signal_std", "fp_score_std"):
            _check_nonneg(name, getattr(self, name))
        if self.duplicates_mean < 1.0:
            raise ValueError("duplicates_mean must be >= 1")

    def recall_at(self, distance: float) -> float:
        return self.recall_base * float(
            np.exp(-self.recall_distance_decay * distance)
        )


@dataclass(frozen=True)
class Detector2DModel:
    """Image-style detector whose recall depends on projected height."""

    recall_base: float = 0.97
    recall_height_floor_px: float = 10.0
    pixel_noise_std: float = 2.5
    score_signal_mean: float = 3.5
    score_signal_std: float = 1.0
    fp_per_frame: float = 3.0
    fp_score_mean: float = 0.0
    fp_score_std: float = 1.0
    fp_correlated_fraction: float = 0.35
    duplicates_mean: float = 1.3

    def __post_init__(self):
        _check_probability("recall_base", self.recall_base)
        _check_probability("fp_correlated_fraction",
                           self.fp_correlated_fraction)
        for name in ("pixel_noise_std", "score_signal_std", "fp_score_std"):
            _check_nonneg(name, getattr(self, name))
        if self.recall_height_floor_px <= 0:
            raise ValueError("recall_height_floor_px must be positive")
        if self.duplicates_mean < 1.0:
            raise ValueError("duplicates_mean must be >= 1")

    def recall_at(self, height_px: float) -> float:
        return self.recall_base * float(
            1.0 - np.exp(-height_px / self.recall_height_floor_px)
        )


@dataclass(frozen=True)
class SynthConfig:
    """Everything that defines a synthetic dataset (with the seed)."""

    seed: int = 0
    n_frames: int = 100
    cars_per_frame: float = 6.0
    min_range: float = 4.0
    max_range: float = 55.0
    size_mean: tuple = (1.5, 1.65, 4.0)   # h, w, l meters
    size_std: tuple = (0.08, 0.08, 0.25)
    ground_z: float = -1.7
    max_gt_bev_iou: float = 0.01
    object_class: ObjectClass = ObjectClass.CAR
    detector3d: Detector3DModel = field(default_factory=Detector3DModel)
    detector2d: Detector2DModel = field(default_factory=Detector2DModel)
    camera: CameraModel = field(default_factory=CameraModel)

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if not 0 < self.min_range < self.max_range:
            raise ValueError("need 0 < min_range < max_range")
        if any(s < 0 for s in self.size_std):
            raise ValueError("size_std entries must be >= 0")


def _check_probability(name, value):
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")


def _check_nonneg(name, value):
    if value < 0:
        raise ValueError(f"{name} must be >= 0, got {value}")


def make_calibration(camera: CameraModel = CameraModel()) -> Calibration:
    """Fixed synthetic calibration: ideal axis permutation, no offset."""
    P = np.array([
        [camera.focal_px, 0.0, camera.cx, 0.0],
        [0.0, camera.focal_px, camera.cy, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ])
    # x_cam = -y_lidar, y_cam = -z_lidar, z_cam (depth) = x_lidar
    tr = np.array([
        [0.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
    ])
    return Calibration(
        P=P, R0=np.eye(3), Tr_velo_to_cam=tr,
        image_width=camera.image_width, image_height=camera.image_height,
    )


def _planar(box: Box3D) -> float:
    return float(np.sqrt(box.x * box.x + box.y * box.y))


def _sample_gt_boxes(rng, cfg: SynthConfig) -> list[Box3D]:
    count = int(rng.poisson(cfg.cars_per_frame))
    slope = 0.85 * (cfg.camera.image_width / 2.0) / cfg.camera.focal_px
    boxes: list[Box3D] = []
    rows: list[list[float]] = []
    for _ in range(count):
        for _attempt in range(40):
            x = float(rng.uniform(cfg.min_range, cfg.max_range))
            y = float(rng.uniform(-slope * x, slope * x))
            h, w, l = (
                float(np.clip(rng.normal(m, s), 0.6 * m, 1.5 * m))
                for m, s in zip(cfg.size_mean, cfg.size_std)
            )
            theta = float(rng.uniform(-np.pi, np.pi))
            box = Box3D(h, w, l, x, y, cfg.ground_z + h / 2.0, theta)
            row = [h, w, l, x, y, box.z, theta]
            if rows:
                overlap = iou_bev_matrix(np.array([row]), np.array(rows))[0]
                if overlap.max() > cfg.max_gt_bev_iou:
                    continue
            boxes.append(box)
            rows.append(row)
            break
    return boxes


def _ground_truth(rng, cfg, calib, boxes: list[Box3D]) -> list[GroundTruthObject]:
    gts = []
    for box in boxes:
        clipped = project_box3d(calib, box, clip=True)
        full = project_box3d(calib, box, clip=False)
        if clipped is None or full is None or full.area <= 0:
            continue
        truncation = max(0.0, 1.0 - clipped.area / full.area)
        occlusion = int(rng.choice([0, 1, 2], p=[0.8, 0.15, 0.05]))
        gts.append(GroundTruthObject(
            class_id=cfg.object_class, box2d=clipped, box3d=box,
            truncation=min(truncation, 1.0), occlusion=occlusion,
        ))
    return gts


def _dup_count(rng, mean: float) -> int:
    return 1 + int(rng.poisson(mean - 1.0))


def _perturbed_candidate(rng, d3: Detector3DModel, gt: Box3D) -> list[float]:
    h = gt.h * float(1.0 + rng.normal(0.0, d3.dim_noise_std))
    w = gt.w * float(1.0 + rng.normal(0.0, d3.dim_noise_std))
    l = gt.l * float(1.0 + rng.normal(0.0, d3.dim_noise_std))
    x = gt.x + float(rng.normal(0.0, d3.position_noise_std))
    y = gt.y + float(rng.normal(0.0, d3.position_noise_std))
    z = gt.z + float(rng.normal(0.0, 0.3 * d3.position_noise_std))
    theta = gt.theta + float(rng.normal(0.0, d3.yaw_noise_std))
    return [abs(h), abs(w), abs(l), x, y, z, theta]


def _ray_ghost(rng, cfg, gt_boxes: list[Box3D], gt_rows: np.ndarray):
    """A 3D FP at a wrong depth along the camera ray, scale-consistent.

    The whole box — center and dimensions — is scaled about the sensor
    origin, so its image-plane hull lands (up to yaw noise) exactly on
    the ground truth's: image IoU and the matched 2D score look like a
    real detection's, and only the 3D score channel separates it.
    Ghost depth is drawn from the mid band (15–35 m): phantom returns
    hug occlusion boundaries there, while very near ranges are densely
    sampled and very far ones too sparse to hallucinate a whole box.
    Rejected (None) when it would overlap any ground truth enough to
    count as a true detection.
    """
    for _attempt in range(4):
        gt = gt_boxes[int(rng.integers(len(gt_boxes)))]
        target = float(rng.uniform(15.0, 35.0))
        lam = float(np.clip(target / max(_planar(gt), 1.0), 0.55, 1.8))
        h, w, l = gt.h * lam, gt.w * lam, gt.l * lam
        x, y, z = gt.x * lam, gt.y * lam, gt.z * lam
        theta = gt.theta + float(rng.normal(0.0, 0.3))
        row = [h, w, l, x, y, z, theta]
        overlap = iou_bev_matrix(np.array([row]), gt_rows)[0]
        if overlap.max() < 0.45:
            return row
    return None


def _uniform_fp3d(rng, cfg) -> list[float]:
    slope = 0.85 * (cfg.camera.image_width / 2.0) / cfg.camera.focal_px
    x = float(rng.uniform(cfg.min_range, cfg.max_range))
    y = float(rng.uniform(-slope * x, slope * x))
    h, w, l = (
        float(np.clip(rng.normal(m, s), 0.6 * m, 1.5 * m))
        for m, s in zip(cfg.size_mean, cfg.size_std)
    )
    return [h, w, l, x, y, cfg.ground_z + h / 2.0,
            float(rng.uniform(-np.pi, np.pi))]


def _simulate_detector3d(rng, cfg, gt_boxes: list[Box3D]):
    d3 = cfg.detector3d
    rows, scores = [], []
    for gt in gt_boxes:
        dist = _planar(gt)
        if rng.random() >= d3.recall_at(dist):
            continue
        for _dup in range(_dup_count(rng, d3.duplicates_mean)):
            row = _perturbed_candidate(rng, d3, gt)
            quality = iou_bev(Box3D(*row), gt) * float(
                np.exp(-d3.recall_distance_decay * dist)
            )
            score = d3.score_signal_mean * quality + float(
                rng.normal(0.0, d3.score_signal_std)
            )
            rows.append(row)
            scores.append(score)
    n_fp = int(rng.poisson(d3.fp_per_frame))
    gt_rows = np.array(
        [[b.h, b.w, b.l, b.x, b.y, b.z, b.theta] for b in gt_boxes]
    )
    clutter = []
    for _f in range(n_fp):
        row = None
        if gt_boxes and rng.random() < d3.fp_ray_fraction:
            row = _ray_ghost(rng, cfg, gt_boxes, gt_rows)
        if row is None:
            row = _uniform_fp3d(rng, cfg)
            clutter.append(row)
        rows.append(row)
        scores.append(float(rng.normal(d3.fp_score_mean, d3.fp_score_std)))
    return rows, scores, clutter


def _simulate_detector2d(rng, cfg, calib, gt_boxes: list[Box3D],
                         clutter_hulls: list[Box2D]):
    d2 = cfg.detector2d
    W, H = cfg.camera.image_width, cfg.camera.image_height
    boxes, scores = [], []
    for gt in gt_boxes:
        hull = project_box3d(calib, gt, clip=True)
        if hull is None or hull.height <= 1.0:
            continue
        if rng.random() >= d2.recall_at(hull.height):
            continue
        for _dup in range(_dup_count(rng, d2.duplicates_mean)):
            jitter = rng.normal(0.0, d2.pixel_noise_std, size=4)
            x1 = np.clip(hull.x1 + jitter[0], 0.0, W - 2.0)
            y1 = np.clip(hull.y1 + jitter[1], 0.0, H - 2.0)
            x2 = np.clip(hull.x2 + jitter[2], x1 + 1.0, float(W))
            y2 = np.clip(hull.y2 + jitter[3], y1 + 1.0, float(H))
            box = Box2D(float(x1), float(y1), float(x2), float(y2))
            quality = iou_2d(box, hull)
            score = d2.score_signal_mean * quality + float(
                rng.normal(0.0, d2.score_signal_std)
            )
            boxes.append([box.x1, box.y1, box.x2, box.y2])
            scores.append(score)
    for _f in range(int(rng.poisson(d2.fp_per_frame))):
        if clutter_hulls and rng.random() < d2.fp_correlated_fraction:
            # Correlated miss: both detectors fire on the same distractor,
            # so the box sits on a 3D clutter hull with a low image score.
            hull = clutter_hulls[int(rng.integers(len(clutter_hulls)))]
            jitter = rng.normal(0.0, 2.0 * d2.pixel_noise_std, size=4)
            cx1, cy1 = hull.x1 + jitter[0], hull.y1 + jitter[1]
            cx2, cy2 = hull.x2 + jitter[2], hull.y2 + jitter[3]
        else:
            bw = float(np.exp(rng.uniform(np.log(20.0), np.log(220.0))))
            bh = bw * float(rng.uniform(0.6, 1.4))
            cx = float(rng.uniform(0.0, W))
            cy = float(rng.uniform(0.0, H))
            cx1, cy1 = cx - bw / 2, cy - bh / 2
            cx2, cy2 = cx + bw / 2, cy + bh / 2
        x1 = np.clip(cx1, 0.0, W - 2.0)
        y1 = np.clip(cy1, 0.0, H - 2.0)
        x2 = np.clip(cx2, x1 + 1.0, float(W))
        y2 = np.clip(cy2, y1 + 1.0, float(H))
        boxes.append([float(x1), float(y1), float(x2), float(y2)])
        scores.append(float(rng.normal(d2.fp_score_mean, d2.fp_score_std)))
    return boxes, scores


def generate_frame(
    cfg: SynthConfig, frame_index: int, calib: Calibration | None = None
) -> tuple[FrameCandidates, list[GroundTruthObject]]:
    """Generate one frame; depends only on (cfg, frame_index)."""
    if calib is None:
        calib = make_calibration(cfg.camera)
    rng = np.random.default_rng((cfg.seed, frame_index))
    gt_boxes = _sample_gt_boxes(rng, cfg)
    gts = _ground_truth(rng, cfg, calib, gt_boxes)
    gt_boxes = [g.box3d for g in gts]
    rows3, scores3, clutter = _simulate_detector3d(rng, cfg, gt_boxes)
    hulls = [
        h for row in clutter
        if (h := project_box3d(calib, Box3D(*row), clip=True)) is not None
    ]
    rows2, scores2 = _simulate_detector2d(rng, cfg, calib, gt_boxes, hulls)
    class_val = int(cfg.object_class)
    fc = FrameCandidates.from_arrays(
        f"{frame_index:06d}", calib,
        boxes2d=np.array(rows2, dtype=float).reshape(-1, 4),
        scores2d=np.array(scores2, dtype=float),
        classes2d=np.full(len(scores2), class_val, dtype=np.int8),
        boxes3d=np.array(rows3, dtype=float).reshape(-1, 7),
        scores3d=np.array(scores3, dtype=float),
        classes3d=np.full(len(scores3), class_val, dtype=np.int8),
    )
    return fc, gts


def generate(
    cfg: SynthConfig,
) -> tuple[list[tuple[FrameCandidates, list[GroundTruthObject]]], Calibration]:
    """Generate the full dataset plus its fixed calibration."""
    calib = make_calibration(cfg.camera)
    frames = [
        generate_frame(cfg, f, calib) for f in range(cfg.n_frames)
    ]
    return frames, calib


def make_stress_frame(
    grid: tuple[int, int] = (200, 176),
    k: int = 200,
    paired: int = 12,
    seed: int = 2024,
) -> FrameCandidates:
    """Build a detector-scale frame for scale and latency checks.

    The 3D side is a raw anchor grid — ``grid[0] * grid[1]`` ground-plane
    positions at two yaws each — the shape of a LiDAR head's output
    before any score filtering.  The 2D side mixes ``paired`` far-range
    car detections, which genuinely overlap many candidate hulls, with
    ``k - paired`` clutter boxes pinned above the horizon line.

    The clutter placement bounds the join density *by construction*: a
    ground candidate's hull top sits at image row ``cy + fy * 0.2 / depth``
    or lower (0.2 m below camera height), which is row 189.99 or below
    for every in-range candidate, while clutter bottoms stop at row 189 —
    so only the ``paired`` boxes can ever match.  The element total p of
    the encoded tensor therefore obeys ``p <= n * (1 + paired)``.  Two other
    details keep that argument airtight: the grid starts far enough
    forward that no box corner crosses the camera plane (a straddling
    box would clip to a full-image hull and match everything), and the
    yaws are laid out in two contiguous blocks so pose-dependent work in
    the projection can be reused along each block.
    """
    nx, ny = grid
    cam = CameraModel()
    calib = make_calibration(cam)
    h, w, l = 1.5, 1.6, 3.9
    ground_z = -1.7
    zc = ground_z + h / 2.0

    x_near = 2.46  # keeps every corner at depth >= 0.5 m
    xs = x_near + (np.arange(nx) + 0.5) * ((70.4 - x_near) / nx)
    ys = -40.0 + (np.arange(ny) + 0.5) * (80.0 / ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    half = np.zeros((nx * ny, 7))
    half[:, 0], half[:, 1], half[:, 2] = h, w, l
    half[:, 3], half[:, 4], half[:, 5] = gx.ravel(), gy.ravel(), zc
    quarter_turn = half.copy()
    quarter_turn[:, 6] = np.pi / 2.0
    boxes3d = np.vstack([half, quarter_turn])
    n = boxes3d.shape[0]

    rng = np.random.default_rng(seed)
    scores3d = rng.normal(0.0, 1.5, size=n)

    # Far cars whose projected hulls become the paired 2D detections.
    depths = np.linspace(52.0, 68.0, paired)
    us = np.linspace(100.0, 1140.0, paired) + rng.uniform(-15.0, 15.0, paired)
    boxes2d = np.zeros((k, 4))
    for i, (d, u) in enumerate(zip(depths, us)):
        y = (cam.cx - u) * d / cam.focal_px
        theta = 0.0 if i % 2 == 0 else np.pi / 2.0
        hull = project_box3d(calib, Box3D(h, w, l, d, y, zc, theta), clip=True)
        boxes2d[i] = [hull.x1, hull.y1, hull.x2, hull.y2]

    # Horizon clutter: bottom edges at most row 189, out of every hull's
    # reach, emulating detector false fires on elevated structure.
    m = k - paired
    cw = rng.uniform(12.0, 30.0, m)
    ch = rng.uniform(8.0, 40.0, m)
    cx1 = rng.uniform(0.0, cam.image_width - 30.0, m)
    cy2 = rng.uniform(178.0, 189.0, m)
    boxes2d[paired:] = np.column_stack([cx1, cy2 - ch, cx1 + cw, cy2])

    scores2d = np.concatenate([
        rng.normal(2.5, 0.8, paired), rng.normal(0.0, 1.0, m),
    ])
    class_val = int(ObjectClass.CAR)
    return FrameCandidates.from_arrays(
        "stress", calib,
        boxes2d=boxes2d, scores2d=scores2d,
        classes2d=np.full(k, class_val, dtype=np.int8),
        boxes3d=boxes3d, scores3d=scores3d,
        classes3d=np.full(n, class_val, dtype=np.int8),
    )
