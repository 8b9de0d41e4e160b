"""Candidate data model and file I/O.

Detections and ground-truth labels are exchanged as plain text, one object
per line, with `#` comments and blank lines ignored.  Three formats exist:

* 2D candidates: ``class x1 y1 x2 y2 score``
* 3D candidates: ``class h w l x y z theta score`` in the internal
  LiDAR-frame center convention, or the 16-column KITTI result format
  (camera frame, bottom-face origin) selected by a flag at parse time
* labels: the 15-column KITTI label format

Scores follow a log-likelihood-ratio convention internally; sources that
emit probabilities can be ingested with ``score_scale="sigmoid"``, which
maps them through :func:`to_log_score` at parse time.

:class:`FrameCandidates` keeps candidates in packed numpy arrays (the
encoder and fusion paths are array-oriented) and materializes the
per-detection dataclass views lazily.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import ParseError, UsageError
from .geometry import (
    Box2D,
    Box3D,
    Calibration,
    camera_box_to_lidar,
    lidar_box_to_camera,
    lidar_to_rect_points,
)

SCORE_EPS = 1e-7
# Decimal formatting used by all serializers; 9 significant digits.
FLOAT_FMT = "{:.9g}"

SCORE_SCALES = ("log", "sigmoid")


class ObjectClass(IntEnum):
    """Detection categories; `OTHER` never participates in fusion."""

    CAR = 0
    PEDESTRIAN = 1
    CYCLIST = 2
    OTHER = 3


_CLASS_FROM_NAME = {
    "Car": ObjectClass.CAR,
    "Pedestrian": ObjectClass.PEDESTRIAN,
    "Cyclist": ObjectClass.CYCLIST,
}

_NAME_FROM_CLASS = {
    ObjectClass.CAR: "Car",
    ObjectClass.PEDESTRIAN: "Pedestrian",
    ObjectClass.CYCLIST: "Cyclist",
    ObjectClass.OTHER: "Other",
}

FUSABLE_CLASSES = (ObjectClass.CAR, ObjectClass.PEDESTRIAN, ObjectClass.CYCLIST)


def class_from_name(name: str) -> ObjectClass:
    """Map a category name to its enum; unknown names become OTHER."""
    return _CLASS_FROM_NAME.get(name, ObjectClass.OTHER)


def class_name(cls: ObjectClass) -> str:
    return _NAME_FROM_CLASS[ObjectClass(cls)]


@dataclass(frozen=True)
class Detection2D:
    """A single 2D candidate (pre-NMS)."""

    box: Box2D
    score: float
    class_id: ObjectClass

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"detection score must be finite, got {self.score}")


@dataclass(frozen=True)
class Detection3D:
    """A single 3D candidate (pre-NMS), LiDAR-frame center convention."""

    box: Box3D
    score: float
    class_id: ObjectClass

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"detection score must be finite, got {self.score}")


@dataclass(frozen=True)
class GroundTruthObject:
    """One annotated object; DontCare rows carry only the 2D box."""

    class_id: ObjectClass
    box2d: Box2D
    box3d: Box3D | None
    truncation: float
    occlusion: int
    is_dont_care: bool = False

    def __post_init__(self):
        if not self.is_dont_care and not 0.0 <= self.truncation <= 1.0:
            raise ValueError(f"truncation must be in [0, 1], got {self.truncation}")


def normalize_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized mapping of angles to (-pi, pi]."""
    return math.pi - np.remainder(math.pi - np.asarray(theta, dtype=np.float64),
                                  2.0 * math.pi)


@dataclass
class FrameCandidates:
    """All 2D/3D candidates of one frame plus its calibration.

    Candidate order is preserved from the source files; downstream indices
    (the joint tensor's i and j) refer to positions in these arrays.

    Attributes:
        frame_id: Frame identifier string.
        calib: The frame's calibration.
        boxes2d: (k, 4) float array of ``[x1, y1, x2, y2]`` pixels.
        scores2d: (k,) float array, log-scale scores.
        classes2d: (k,) int8 array of :class:`ObjectClass` values.
        boxes3d: (n, 7) float array of ``[h, w, l, x, y, z, theta]``.
        scores3d: (n,) float array, log-scale scores.
        classes3d: (n,) int8 array of :class:`ObjectClass` values.
    """

    frame_id: str
    calib: Calibration
    boxes2d: np.ndarray
    scores2d: np.ndarray
    classes2d: np.ndarray
    boxes3d: np.ndarray
    scores3d: np.ndarray
    classes3d: np.ndarray
    _dets2d: list[Detection2D] | None = field(default=None, repr=False, compare=False)
    _dets3d: list[Detection3D] | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_detections(
        cls,
        frame_id: str,
        calib: Calibration,
        dets2d: list[Detection2D],
        dets3d: list[Detection3D],
    ) -> "FrameCandidates":
        boxes2d = np.array(
            [[d.box.x1, d.box.y1, d.box.x2, d.box.y2] for d in dets2d], dtype=np.float64
        ).reshape(-1, 4)
        boxes3d = np.array(
            [[d.box.h, d.box.w, d.box.l, d.box.x, d.box.y, d.box.z, d.box.theta]
             for d in dets3d],
            dtype=np.float64,
        ).reshape(-1, 7)
        return cls(
            frame_id=frame_id,
            calib=calib,
            boxes2d=boxes2d,
            scores2d=np.array([d.score for d in dets2d], dtype=np.float64),
            classes2d=np.array([int(d.class_id) for d in dets2d], dtype=np.int8),
            boxes3d=boxes3d,
            scores3d=np.array([d.score for d in dets3d], dtype=np.float64),
            classes3d=np.array([int(d.class_id) for d in dets3d], dtype=np.int8),
        )

    @classmethod
    def from_arrays(
        cls,
        frame_id: str,
        calib: Calibration,
        boxes2d: np.ndarray,
        scores2d: np.ndarray,
        classes2d: np.ndarray,
        boxes3d: np.ndarray,
        scores3d: np.ndarray,
        classes3d: np.ndarray,
    ) -> "FrameCandidates":
        """Build directly from packed arrays, normalizing yaw in place."""
        boxes2d = np.ascontiguousarray(boxes2d, dtype=np.float64).reshape(-1, 4)
        boxes3d = np.ascontiguousarray(boxes3d, dtype=np.float64).reshape(-1, 7)
        if boxes3d.shape[0]:
            if not np.all(boxes3d[:, :3] > 0):
                raise ValueError("box dimensions must be positive")
            boxes3d[:, 6] = normalize_angles(boxes3d[:, 6])
        scores2d = np.asarray(scores2d, dtype=np.float64).reshape(-1)
        scores3d = np.asarray(scores3d, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(scores2d)) and np.all(np.isfinite(scores3d))):
            raise ValueError("detection scores must be finite")
        return cls(
            frame_id=frame_id,
            calib=calib,
            boxes2d=boxes2d,
            scores2d=scores2d,
            classes2d=np.asarray(classes2d, dtype=np.int8).reshape(-1),
            boxes3d=boxes3d,
            scores3d=scores3d,
            classes3d=np.asarray(classes3d, dtype=np.int8).reshape(-1),
        )

    @property
    def k(self) -> int:
        """Number of 2D candidates."""
        return self.boxes2d.shape[0]

    @property
    def n(self) -> int:
        """Number of 3D candidates."""
        return self.boxes3d.shape[0]

    @property
    def dets2d(self) -> list[Detection2D]:
        if self._dets2d is None:
            self._dets2d = [
                Detection2D(
                    box=Box2D(*self.boxes2d[i]),
                    score=float(self.scores2d[i]),
                    class_id=ObjectClass(int(self.classes2d[i])),
                )
                for i in range(self.k)
            ]
        return self._dets2d

    @property
    def dets3d(self) -> list[Detection3D]:
        if self._dets3d is None:
            self._dets3d = [
                Detection3D(
                    box=Box3D(*self.boxes3d[j]),
                    score=float(self.scores3d[j]),
                    class_id=ObjectClass(int(self.classes3d[j])),
                )
                for j in range(self.n)
            ]
        return self._dets3d


# ---------------------------------------------------------------------------
# Score-scale conversions
# ---------------------------------------------------------------------------


def to_log_score(p):
    """Logit transform ln(p / (1 - p)) with p clamped to [1e-7, 1 - 1e-7].

    Accepts scalars or arrays; returns the matching type.
    """
    arr = np.clip(np.asarray(p, dtype=np.float64), SCORE_EPS, 1.0 - SCORE_EPS)
    out = np.log(arr) - np.log1p(-arr)
    return float(out) if np.isscalar(p) or np.ndim(p) == 0 else out


def to_sigmoid_score(s):
    """Numerically stable sigmoid 1 / (1 + e^-s); inverse of to_log_score."""
    arr = np.asarray(s, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out) if np.isscalar(s) or np.ndim(s) == 0 else out


def _maybe_to_log(scores: float, score_scale: str) -> float:
    if score_scale == "log":
        return scores
    if score_scale == "sigmoid":
        return to_log_score(scores)
    raise UsageError(f"score_scale must be one of {SCORE_SCALES}, got {score_scale!r}")


# ---------------------------------------------------------------------------
# Parsers
# ---------------------------------------------------------------------------


def _data_lines(text: str):
    """Yield (line_number, line) skipping blanks and `#` comments."""
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        yield lineno, stripped


def _parse_floats(tokens, lineno: int):
    try:
        return [float(tok) for tok in tokens]
    except ValueError as exc:
        raise ParseError(f"line {lineno}: non-numeric field ({exc})") from None


def parse_detections_2d(text: str, score_scale: str = "log") -> list[Detection2D]:
    """Parse a 2D candidate file: ``class x1 y1 x2 y2 score`` per line.

    Args:
        text: File contents.
        score_scale: ``"log"`` keeps scores as-is; ``"sigmoid"`` treats them
            as probabilities and converts through :func:`to_log_score`.

    Returns:
        Ordered detection list; unknown class names map to OTHER.

    Raises:
        ParseError: Malformed line; message carries the line number.
    """
    if score_scale not in SCORE_SCALES:
        raise UsageError(f"score_scale must be one of {SCORE_SCALES}, got {score_scale!r}")
    dets = []
    for lineno, line in _data_lines(text):
        tokens = line.split()
        if len(tokens) != 6:
            raise ParseError(f"line {lineno}: expected 6 fields "
                             f"'class x1 y1 x2 y2 score', got {len(tokens)}")
        vals = _parse_floats(tokens[1:], lineno)
        try:
            box = Box2D(vals[0], vals[1], vals[2], vals[3])
            det = Detection2D(
                box=box,
                score=_maybe_to_log(vals[4], score_scale),
                class_id=class_from_name(tokens[0]),
            )
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        dets.append(det)
    return dets


def parse_detections_3d(
    text: str,
    kitti_format: bool = False,
    calib: Calibration | None = None,
    score_scale: str = "log",
) -> list[Detection3D]:
    """Parse a 3D candidate file.

    Args:
        text: File contents.  Internal format rows are
            ``class h w l x y z theta score`` (LiDAR frame, center
            convention).  With ``kitti_format=True``, rows are the 16-column
            KITTI result format (camera frame, bottom-face origin) and are
            converted using ``calib``.
        kitti_format: Select the KITTI result format.
        calib: Required when ``kitti_format`` is set.
        score_scale: As in :func:`parse_detections_2d`.

    Returns:
        Ordered detection list.

    Raises:
        ParseError: Malformed line (message carries the line number).
        UsageError: KITTI format requested without a calibration.
    """
    if score_scale not in SCORE_SCALES:
        raise UsageError(f"score_scale must be one of {SCORE_SCALES}, got {score_scale!r}")
    if kitti_format and calib is None:
        raise UsageError("KITTI-format 3D detections require a calibration")
    dets = []
    for lineno, line in _data_lines(text):
        tokens = line.split()
        try:
            if kitti_format:
                if len(tokens) != 16:
                    raise ParseError(
                        f"line {lineno}: expected 16 KITTI result fields, got {len(tokens)}"
                    )
                vals = _parse_floats(tokens[1:], lineno)
                h, w, l = vals[7], vals[8], vals[9]
                x, y, z, ry = vals[10], vals[11], vals[12], vals[13]
                box = camera_box_to_lidar(calib, h, w, l, x, y, z, ry)
                score = vals[14]
            else:
                if len(tokens) != 9:
                    raise ParseError(
                        f"line {lineno}: expected 9 fields "
                        f"'class h w l x y z theta score', got {len(tokens)}"
                    )
                vals = _parse_floats(tokens[1:], lineno)
                box = Box3D(h=vals[0], w=vals[1], l=vals[2],
                            x=vals[3], y=vals[4], z=vals[5], theta=vals[6])
                score = vals[7]
            dets.append(Detection3D(
                box=box,
                score=_maybe_to_log(score, score_scale),
                class_id=class_from_name(tokens[0]),
            ))
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
    return dets


def parse_labels(text: str, calib: Calibration) -> list[GroundTruthObject]:
    """Parse a KITTI label file.

    Rows are ``type truncated occluded alpha x1 y1 x2 y2 h w l x y z ry``.
    ``DontCare`` rows populate only the 2D box; all other rows are converted
    from camera-frame bottom-face origin to the internal LiDAR center
    convention via the calibration.

    Raises:
        ParseError: Malformed line; message carries the line number.
    """
    objects = []
    for lineno, line in _data_lines(text):
        tokens = line.split()
        if len(tokens) != 15:
            raise ParseError(f"line {lineno}: expected 15 label fields, got {len(tokens)}")
        vals = _parse_floats(tokens[1:], lineno)
        try:
            box2d = Box2D(vals[3], vals[4], vals[5], vals[6])
            if tokens[0] == "DontCare":
                objects.append(GroundTruthObject(
                    class_id=ObjectClass.OTHER,
                    box2d=box2d,
                    box3d=None,
                    truncation=0.0,
                    occlusion=0,
                    is_dont_care=True,
                ))
                continue
            box3d = camera_box_to_lidar(
                calib, vals[7], vals[8], vals[9], vals[10], vals[11], vals[12], vals[13]
            )
            objects.append(GroundTruthObject(
                class_id=class_from_name(tokens[0]),
                box2d=box2d,
                box3d=box3d,
                truncation=vals[0],
                occlusion=int(vals[1]),
                is_dont_care=False,
            ))
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
    return objects


# ---------------------------------------------------------------------------
# Serializers
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return FLOAT_FMT.format(v)


def format_detections_2d(dets: list[Detection2D]) -> str:
    """Serialize 2D detections in the candidate file format."""
    lines = [
        " ".join([
            class_name(d.class_id),
            _fmt(d.box.x1), _fmt(d.box.y1), _fmt(d.box.x2), _fmt(d.box.y2),
            _fmt(d.score),
        ])
        for d in dets
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def format_detections_3d(dets: list[Detection3D]) -> str:
    """Serialize 3D detections in the internal candidate file format."""
    lines = [
        " ".join([
            class_name(d.class_id),
            _fmt(d.box.h), _fmt(d.box.w), _fmt(d.box.l),
            _fmt(d.box.x), _fmt(d.box.y), _fmt(d.box.z), _fmt(d.box.theta),
            _fmt(d.score),
        ])
        for d in dets
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def format_labels(objects: list[GroundTruthObject], calib: Calibration) -> str:
    """Serialize ground-truth objects in the KITTI 15-column label format."""
    lines = []
    for obj in objects:
        if obj.is_dont_care:
            lines.append(" ".join([
                "DontCare", "-1", "-1", "-10",
                _fmt(obj.box2d.x1), _fmt(obj.box2d.y1),
                _fmt(obj.box2d.x2), _fmt(obj.box2d.y2),
                "-1", "-1", "-1", "-1000", "-1000", "-1000", "-10",
            ]))
            continue
        h, w, l, x, y, z, ry = lidar_box_to_camera(calib, obj.box3d)
        rect = lidar_to_rect_points(
            calib, np.array([[obj.box3d.x, obj.box3d.y, obj.box3d.z]])
        )[0]
        # Observation angle: yaw minus the azimuth of the object center.
        alpha = ry - math.atan2(rect[0], rect[2])
        lines.append(" ".join([
            class_name(obj.class_id),
            _fmt(obj.truncation), str(int(obj.occlusion)), _fmt(alpha),
            _fmt(obj.box2d.x1), _fmt(obj.box2d.y1),
            _fmt(obj.box2d.x2), _fmt(obj.box2d.y2),
            _fmt(h), _fmt(w), _fmt(l), _fmt(x), _fmt(y), _fmt(z), _fmt(ry),
        ]))
    return "\n".join(lines) + ("\n" if lines else "")
