"""Detection evaluation: matching, PR curves, AP@40, and distance bins.

Protocol summary.  Detections are matched greedily in score order within
each frame: a detection becomes a true positive when its best IoU against
an unmatched, counted, same-class ground-truth box reaches the class
threshold; each ground-truth box matches at most once.  Ground truth
harder than the evaluated difficulty — and, for the 2D metric, DontCare
regions — is *ignored*: detections landing on it are neither rewarded nor
punished, and it never enters the denominator.  The per-frame TP/FP flags
are then swept globally by score to form one PR curve per report cell,
and AP averages the interpolated precision at 40 equally spaced recall
levels.

Distance-binned results re-run the same matching on the subset of
detections and ground truth whose planar distance falls inside each bin
(bins apply to the bev and 3d metrics; image-space detections carry no
range).  A bin with no ground truth anywhere is reported absent, not 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .candidates import FrameCandidates, GroundTruthObject, ObjectClass
from .errors import DataError
from .geometry import iou_2d_matrix, iou_3d_matrix, iou_bev_matrix

_METRIC_FNS = {"2d": iou_2d_matrix, "bev": iou_bev_matrix, "3d": iou_3d_matrix}

#: Detection flags produced by match_frame.
FP, TP, IGNORED = 0, 1, 2

DEFAULT_IOU_THRESHOLDS = {
    ObjectClass.CAR: 0.7,
    ObjectClass.PEDESTRIAN: 0.5,
    ObjectClass.CYCLIST: 0.5,
    ObjectClass.OTHER: 0.5,
}

#: Recall levels of the AP@40 metric.
N_RECALL_POSITIONS = 40


@dataclass(frozen=True)
class Difficulty:
    """A KITTI-style difficulty gate on ground truth."""

    level: str
    min_box_height_px: float
    max_occlusion: int
    max_truncation: float

    def admits(self, g: GroundTruthObject) -> bool:
        return (
            g.box2d.height >= self.min_box_height_px
            and g.occlusion <= self.max_occlusion
            and g.truncation <= self.max_truncation
        )


EASY = Difficulty("easy", 40.0, 0, 0.15)
MODERATE = Difficulty("moderate", 25.0, 1, 0.30)
HARD = Difficulty("hard", 25.0, 2, 0.50)


@dataclass
class PRCurve:
    """One PR sweep: cumulative counts at each distinct score threshold."""

    recalls: np.ndarray
    precisions: np.ndarray
    n_gt: int
    n_tp: np.ndarray
    n_fp: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.recalls) < 0):
            raise ValueError("recall must be non-decreasing along the sweep")


@dataclass(frozen=True)
class APResult:
    """AP for one (metric, difficulty, distance bin) cell."""

    metric: str
    difficulty: str
    distance_bin: str
    ap: float
    n_gt: int
    curve: PRCurve = field(repr=False, compare=False, default=None)


@dataclass(frozen=True)
class EvalConfig:
    metrics: tuple = ("2d", "bev", "3d")
    difficulties: tuple = (EASY, MODERATE, HARD)
    iou_thresholds: dict = field(
        default_factory=lambda: dict(DEFAULT_IOU_THRESHOLDS)
    )
    distance_bin_edges: tuple = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0)
    include_distance_bins: bool = True

    def __post_init__(self):
        for m in self.metrics:
            if m not in _METRIC_FNS:
                raise ValueError(f"unknown metric {m!r}")


def _threshold_for(thresholds: dict, class_id: int) -> float:
    return thresholds.get(ObjectClass(int(class_id)), 0.5)


def _gt_box_row(g: GroundTruthObject) -> list[float]:
    b = g.box3d
    return [b.h, b.w, b.l, b.x, b.y, b.z, b.theta]


def match_frame(
    boxes: np.ndarray,
    scores: np.ndarray,
    classes: np.ndarray,
    gts: Sequence[GroundTruthObject],
    metric: str,
    thresholds: dict,
    difficulty: Difficulty,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy per-frame matching.

    Args:
        boxes: (m, 4) for the 2d metric, else (m, 7); sorted so that
            ``scores`` is non-increasing.
        scores: (m,) detection scores, descending.
        classes: (m,) detection class ids.
        gts: The frame's ground truth.
        metric: ``2d`` | ``bev`` | ``3d``.
        thresholds: Class id -> IoU threshold.
        difficulty: Gate deciding which ground truth is counted.

    Returns:
        (flags, gt_matched): per-detection flags (FP/TP/IGNORED) and a
        per-GT matched mask (aligned with ``gts``; ignored and DontCare
        entries never match).
    """
    m = scores.shape[0]
    if m > 1 and np.any(np.diff(scores) > 0):
        raise ValueError("detections must be sorted by descending score")
    metric_fn = _METRIC_FNS[metric]

    counted_idx, counted_rows, counted_cls = [], [], []
    ignored_idx, ignored_rows, ignored_cls = [], [], []
    for g_idx, g in enumerate(gts):
        if g.is_dont_care:
            if metric == "2d":
                ignored_idx.append(g_idx)
                ignored_rows.append([g.box2d.x1, g.box2d.y1, g.box2d.x2, g.box2d.y2])
                ignored_cls.append(None)  # DontCare ignores any class
            continue
        if metric != "2d" and g.box3d is None:
            continue
        row = (
            [g.box2d.x1, g.box2d.y1, g.box2d.x2, g.box2d.y2]
            if metric == "2d" else _gt_box_row(g)
        )
        if difficulty.admits(g):
            counted_idx.append(g_idx)
            counted_rows.append(row)
            counted_cls.append(int(g.class_id))
        else:
            ignored_idx.append(g_idx)
            ignored_rows.append(row)
            ignored_cls.append(int(g.class_id))

    counted_rows = np.array(counted_rows) if counted_rows else np.zeros((0, 4))
    ignored_rows = np.array(ignored_rows) if ignored_rows else np.zeros((0, 4))

    flags = np.full(m, FP, dtype=np.int8)
    gt_matched = np.zeros(len(gts), dtype=bool)
    taken = np.zeros(len(counted_idx), dtype=bool)

    for d in range(m):
        thr = _threshold_for(thresholds, classes[d])
        best_iou, best_c = 0.0, -1
        if counted_rows.shape[0]:
            cand = [
                c for c in range(len(counted_idx))
                if not taken[c] and counted_cls[c] == int(classes[d])
            ]
            if cand:
                ious = metric_fn(boxes[d][None], counted_rows[cand])[0]
                c_best = int(np.argmax(ious))
                if ious[c_best] >= thr:
                    best_iou, best_c = float(ious[c_best]), cand[c_best]
        if best_c >= 0:
            flags[d] = TP
            taken[best_c] = True
            gt_matched[counted_idx[best_c]] = True
            continue
        if ignored_rows.shape[0]:
            cand = [
                c for c in range(len(ignored_idx))
                if ignored_cls[c] is None or ignored_cls[c] == int(classes[d])
            ]
            if cand:
                ious = metric_fn(boxes[d][None], ignored_rows[cand])[0]
                if float(ious.max()) >= thr:
                    flags[d] = IGNORED
    return flags, gt_matched


def sweep_pr(scores: np.ndarray, tp_flags: np.ndarray, n_gt: int) -> PRCurve:
    """Global PR sweep over all non-ignored detections.

    One point per distinct score value, taken at the end of each tied run
    (a threshold cannot split equal scores).
    """
    scores = np.asarray(scores, dtype=float)
    tp_flags = np.asarray(tp_flags, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    tp_sorted = tp_flags[order]
    if s_sorted.size == 0:
        return PRCurve(
            recalls=np.zeros(0), precisions=np.zeros(0), n_gt=n_gt,
            n_tp=np.zeros(0, dtype=np.int64), n_fp=np.zeros(0, dtype=np.int64),
        )
    cum_tp = np.cumsum(tp_sorted)
    cum_fp = np.cumsum(~tp_sorted)
    last_of_run = np.nonzero(
        np.concatenate([s_sorted[1:] != s_sorted[:-1], [True]])
    )[0]
    n_tp = cum_tp[last_of_run]
    n_fp = cum_fp[last_of_run]
    recalls = n_tp / n_gt if n_gt > 0 else np.zeros_like(n_tp, dtype=float)
    precisions = n_tp / (n_tp + n_fp)
    return PRCurve(
        recalls=recalls, precisions=precisions, n_gt=n_gt,
        n_tp=n_tp.astype(np.int64), n_fp=n_fp.astype(np.int64),
    )


def ap_40(curve: PRCurve) -> float:
    """Average of interpolated precision at recalls 1/40 .. 40/40.

    Interpolated precision at level r is the maximum precision among
    sweep points with recall >= r; unreachable levels contribute 0.
    """
    if curve.recalls.size == 0:
        return 0.0
    suffix_max = np.maximum.accumulate(curve.precisions[::-1])[::-1]
    total = 0.0
    for step in range(1, N_RECALL_POSITIONS + 1):
        r = step / N_RECALL_POSITIONS
        idx = int(np.searchsorted(curve.recalls, r, side="left"))
        if idx < curve.recalls.size:
            total += float(suffix_max[idx])
    return total / N_RECALL_POSITIONS


def _det_arrays(fc: FrameCandidates, metric: str):
    if metric == "2d":
        return fc.boxes2d, fc.scores2d, fc.classes2d
    return fc.boxes3d, fc.scores3d, fc.classes3d


def _sort_desc(boxes, scores, classes):
    order = np.argsort(-scores, kind="stable")
    return boxes[order], scores[order], classes[order]


def _planar_distances(boxes3d: np.ndarray) -> np.ndarray:
    xs, ys = boxes3d[:, 3], boxes3d[:, 4]
    return np.sqrt(xs * xs + ys * ys)


def _gt_distance(g: GroundTruthObject) -> float:
    b = g.box3d
    return math.sqrt(b.x * b.x + b.y * b.y)


def _cell(dets_by_frame, gts_by_frame, frame_ids, metric, difficulty,
          thresholds, bin_range=None):
    """Aggregate matching over frames and compute one AP cell."""
    all_scores, all_tp = [], []
    n_gt = 0
    for fid in frame_ids:
        boxes, scores, classes = _det_arrays(dets_by_frame[fid], metric)
        gts = gts_by_frame[fid]
        if bin_range is not None:
            lo, hi = bin_range
            det_d = _planar_distances(boxes)
            keep = (det_d >= lo) & (det_d < hi)
            boxes, scores, classes = boxes[keep], scores[keep], classes[keep]
            gts = [
                g for g in gts
                if g.is_dont_care
                or (g.box3d is not None and lo <= _gt_distance(g) < hi)
            ]
        boxes, scores, classes = _sort_desc(boxes, scores, classes)
        flags, _ = match_frame(
            boxes, scores, classes, gts, metric, thresholds, difficulty
        )
        n_gt += sum(
            1 for g in gts
            if not g.is_dont_care
            and (metric == "2d" or g.box3d is not None)
            and difficulty.admits(g)
        )
        keep = flags != IGNORED
        all_scores.append(scores[keep])
        all_tp.append(flags[keep] == TP)
    curve = sweep_pr(
        np.concatenate(all_scores) if all_scores else np.zeros(0),
        np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool),
        n_gt,
    )
    return curve, n_gt


def evaluate(
    dets_by_frame: dict[str, FrameCandidates],
    gts_by_frame: dict[str, Sequence[GroundTruthObject]],
    cfg: EvalConfig = EvalConfig(),
) -> list[APResult]:
    """Full evaluation grid over metrics, difficulties, and distance bins.

    Raises:
        DataError: If a detection frame has no ground-truth entry.
    """
    missing = sorted(set(dets_by_frame) - set(gts_by_frame))
    if missing:
        raise DataError(
            f"detection frames lack ground truth: {', '.join(missing[:5])}"
            + (" ..." if len(missing) > 5 else "")
        )
    frame_ids = sorted(dets_by_frame)
    results: list[APResult] = []
    edges = cfg.distance_bin_edges
    for metric in cfg.metrics:
        for difficulty in cfg.difficulties:
            curve, n_gt = _cell(
                dets_by_frame, gts_by_frame, frame_ids, metric, difficulty,
                cfg.iou_thresholds,
            )
            if n_gt > 0:
                results.append(APResult(
                    metric=metric, difficulty=difficulty.level,
                    distance_bin="all", ap=ap_40(curve), n_gt=n_gt, curve=curve,
                ))
            if metric == "2d" or not cfg.include_distance_bins:
                continue
            for lo, hi in zip(edges[:-1], edges[1:]):
                curve, n_gt = _cell(
                    dets_by_frame, gts_by_frame, frame_ids, metric, difficulty,
                    cfg.iou_thresholds, bin_range=(lo, hi),
                )
                if n_gt == 0:
                    continue  # empty bin: absent, not zero
                results.append(APResult(
                    metric=metric, difficulty=difficulty.level,
                    distance_bin=f"{lo:g}-{hi:g}", ap=ap_40(curve), n_gt=n_gt,
                    curve=curve,
                ))
    return results


def format_report(results: Sequence[APResult]) -> str:
    """CSV report: ``metric,difficulty,distance_bin,ap,n_gt``."""
    lines = ["metric,difficulty,distance_bin,ap,n_gt"]
    for r in results:
        lines.append(
            f"{r.metric},{r.difficulty},{r.distance_bin},{r.ap:.9g},{r.n_gt}"
        )
    return "\n".join(lines) + "\n"


def format_pr_points(results: Sequence[APResult]) -> str:
    """CSV plot data: one row per PR point in every cell."""
    lines = ["metric,difficulty,distance_bin,recall,precision"]
    for r in results:
        if r.curve is None:
            continue
        for rec, prec in zip(r.curve.recalls, r.curve.precisions):
            lines.append(
                f"{r.metric},{r.difficulty},{r.distance_bin},"
                f"{rec:.9g},{prec:.9g}"
            )
    return "\n".join(lines) + "\n"
