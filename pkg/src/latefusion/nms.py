"""Greedy non-maximum suppression.

Fusion consumes candidates *before* suppression; this module provides the
final-stage NMS applied after re-scoring, and builds the single-modality
baselines that fused outputs are compared against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import iou_2d_matrix, iou_3d_matrix, iou_bev_matrix

_METRIC_FNS = {"2d": iou_2d_matrix, "bev": iou_bev_matrix, "3d": iou_3d_matrix}

#: Default overlap thresholds per metric.
DEFAULT_THRESHOLDS = {"2d": 0.5, "bev": 0.1, "3d": 0.1}


@dataclass(frozen=True)
class NmsConfig:
    """Suppression settings.

    Attributes:
        metric: Overlap metric, one of ``2d``, ``bev``, ``3d``.
        iou_threshold: Same-class detections overlapping a kept detection
            more than this are discarded; None picks the metric default
            (0.1 for bev/3d, 0.5 for 2d).
        score_floor: Detections scoring below this are dropped before
            suppression; None disables the pre-filter.
    """

    metric: str = "bev"
    iou_threshold: float | None = None
    score_floor: float | None = None

    def __post_init__(self):
        if self.metric not in _METRIC_FNS:
            raise ValueError(f"metric must be one of 2d/bev/3d, got {self.metric!r}")
        if self.iou_threshold is None:
            object.__setattr__(
                self, "iou_threshold", DEFAULT_THRESHOLDS[self.metric]
            )
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError(
                f"iou_threshold must be in [0, 1], got {self.iou_threshold}"
            )


def nms(
    boxes: np.ndarray,
    scores: np.ndarray,
    classes: np.ndarray,
    cfg: NmsConfig = NmsConfig(),
) -> np.ndarray:
    """Indices of the detections kept by greedy suppression.

    Repeatedly keeps the highest-scoring remaining detection (ties break
    to the lower original index) and discards every remaining same-class
    detection whose IoU with it exceeds the threshold.  Returned indices
    are score-descending.

    Args:
        boxes: (m, 4) pixel boxes for the 2d metric, else (m, 7) rows
            ``[h, w, l, x, y, z, theta]``.
        scores: (m,) finite scores.
        classes: (m,) integer class ids; suppression never crosses classes.
        cfg: Thresholds and metric.
    """
    boxes = np.asarray(boxes, dtype=float)
    scores = np.asarray(scores, dtype=float)
    classes = np.asarray(classes)
    m = scores.shape[0]
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    expected_cols = 4 if cfg.metric == "2d" else 7
    if m and boxes.shape != (m, expected_cols):
        raise ValueError(
            f"boxes must have shape ({m}, {expected_cols}) for metric "
            f"{cfg.metric!r}, got {boxes.shape}"
        )

    alive = np.ones(m, dtype=bool)
    if cfg.score_floor is not None:
        alive &= scores >= cfg.score_floor

    metric_fn = _METRIC_FNS[cfg.metric]
    kept = []
    for idx in np.argsort(-scores, kind="stable"):
        if not alive[idx]:
            continue
        alive[idx] = False
        kept.append(int(idx))
        rest = np.nonzero(alive & (classes == classes[idx]))[0]
        if rest.size == 0:
            continue
        overlap = metric_fn(boxes[idx][None], boxes[rest])[0]
        alive[rest[overlap > cfg.iou_threshold]] = False
    return np.array(kept, dtype=np.int64)
