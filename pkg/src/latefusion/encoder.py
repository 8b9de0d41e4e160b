"""Sparse joint-candidate tensor construction.

For one frame and one category, every 3D candidate is projected into the
image plane and paired with every same-category 2D candidate whose box
overlaps the projected hull.  Each surviving pair becomes one element with
four channels: the 2D IoU between the boxes, the 2D candidate's score, the
3D candidate's score, and the 3D candidate's normalized range.  A 3D
candidate with no overlapping 2D candidate (or an off-image projection)
contributes a single *sentinel* element whose iou and s2d channels are -1,
so every candidate is re-scored exactly once downstream.  Conceptually the
tensor is dense with shape (k+1) x n x 4 — one extra row holds sentinels —
but only the non-empty elements are materialized, together with an index
cache mapping each j to its contiguous element span.

Element order is canonical: j ascending, then i ascending, with a class's
sentinel interleaved at its j position.  Two encodings of the same frame are
byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .candidates import FUSABLE_CLASSES, FrameCandidates, ObjectClass
from .geometry import iou_2d_matrix, project_boxes3d

#: Marker used in the element `i` slot for sentinel elements.
SENTINEL = -1


@dataclass(frozen=True)
class EncoderConfig:
    """Knobs for joint-tensor construction.

    Attributes:
        d_max: Normalization constant for the distance channel, meters;
            distances are divided by it and capped at 1.
        min_iou: Pairs need iou strictly greater than this; the default 0
            admits every positive overlap.
        clip_hulls: Clip projected hulls to the image rectangle before
            pairing (matches how 2D candidates are image-clipped).
    """

    d_max: float = 100.0
    min_iou: float = 0.0
    clip_hulls: bool = True

    def __post_init__(self):
        if not self.d_max > 0:
            raise ValueError(f"d_max must be positive, got {self.d_max}")
        if self.min_iou < 0:
            raise ValueError(f"min_iou must be >= 0, got {self.min_iou}")


@dataclass(frozen=True)
class JointElement:
    """One non-empty tensor element (a candidate pair or a sentinel)."""

    i: int
    j: int
    iou: float
    s2d: float
    s3d: float
    d_norm: float


@dataclass
class SparseJointTensor:
    """Sparse per-class joint tensor plus its index cache.

    Attributes:
        class_id: Category of all candidates in this tensor.
        k: Number of same-class 2D candidates.
        n: Number of same-class 3D candidates.
        channels: (p, 4) float array, columns ``[iou, s2d, s3d, d_norm]``.
        el_i: (p,) int32 class-local 2D index per element; -1 for sentinels.
        el_j: (p,) int32 class-local 3D index per element.
        starts: (n + 1,) int64 index cache; the elements of candidate j
            occupy ``channels[starts[j]:starts[j + 1]]``.
        indices2d: (k,) int64 mapping class-local i to the frame-level
            2D candidate index.
        indices3d: (n,) int64 mapping class-local j to the frame-level
            3D candidate index.
        frame_id: Identifier of the source frame.
    """

    class_id: ObjectClass
    k: int
    n: int
    channels: np.ndarray
    el_i: np.ndarray
    el_j: np.ndarray
    starts: np.ndarray
    indices2d: np.ndarray
    indices3d: np.ndarray
    frame_id: str = ""
    _elements: list[JointElement] | None = field(default=None, repr=False, compare=False)

    @property
    def p(self) -> int:
        """Total element count (pairs plus sentinels)."""
        return self.channels.shape[0]

    def per_j(self, j: int) -> slice:
        """Element span of 3D candidate j (always non-empty when n > 0)."""
        return slice(int(self.starts[j]), int(self.starts[j + 1]))

    @property
    def elements(self) -> list[JointElement]:
        if self._elements is None:
            self._elements = [
                JointElement(
                    i=int(self.el_i[e]), j=int(self.el_j[e]),
                    iou=float(self.channels[e, 0]), s2d=float(self.channels[e, 1]),
                    s3d=float(self.channels[e, 2]), d_norm=float(self.channels[e, 3]),
                )
                for e in range(self.p)
            ]
        return self._elements


def _empty_tensor(
    class_id: ObjectClass, k: int, idx2: np.ndarray, frame_id: str
) -> SparseJointTensor:
    return SparseJointTensor(
        class_id=class_id, k=k, n=0,
        channels=np.zeros((0, 4)),
        el_i=np.zeros(0, dtype=np.int32),
        el_j=np.zeros(0, dtype=np.int32),
        starts=np.zeros(1, dtype=np.int64),
        indices2d=idx2.astype(np.int64),
        indices3d=np.zeros(0, dtype=np.int64),
        frame_id=frame_id,
    )


def encode_frame(
    fc: FrameCandidates, cfg: EncoderConfig = EncoderConfig()
) -> dict[ObjectClass, SparseJointTensor]:
    """Build per-class sparse joint tensors for one frame.

    Args:
        fc: The frame's candidates and calibration.
        cfg: Encoder configuration.

    Returns:
        Mapping from each fusable category present in the frame to its
        tensor.  Categories with 2D but no 3D candidates yield an empty
        tensor (n = 0); the OTHER category never fuses and is omitted.
    """
    out: dict[ObjectClass, SparseJointTensor] = {}
    for class_id in FUSABLE_CLASSES:
        idx2 = np.nonzero(fc.classes2d == int(class_id))[0]
        idx3 = np.nonzero(fc.classes3d == int(class_id))[0]
        if idx2.size == 0 and idx3.size == 0:
            continue
        if idx3.size == 0:
            out[class_id] = _empty_tensor(class_id, int(idx2.size), idx2, fc.frame_id)
            continue

        boxes3d = fc.boxes3d[idx3]
        hulls, valid = project_boxes3d(fc.calib, boxes3d, clip=cfg.clip_hulls)
        k, n = idx2.size, idx3.size

        if k > 0:
            safe_hulls = np.where(valid[:, None], hulls, 0.0)
            iou = iou_2d_matrix(safe_hulls, fc.boxes2d[idx2])  # (n, k)
            mask = (iou > cfg.min_iou) & valid[:, None]
        else:
            iou = np.zeros((n, 0))
            mask = np.zeros((n, 0), dtype=bool)

        counts = mask.sum(axis=1)
        counts_eff = np.maximum(counts, 1)  # sentinel for unmatched j
        starts = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts_eff, out=starts[1:])
        p = int(starts[-1])

        channels = np.empty((p, 4))
        el_i = np.empty(p, dtype=np.int32)
        el_j = np.empty(p, dtype=np.int32)

        xs, ys = boxes3d[:, 3], boxes3d[:, 4]
        dists = np.sqrt(xs * xs + ys * ys)
        d_norm = np.minimum(dists / cfg.d_max, 1.0)
        s3d = fc.scores3d[idx3]

        pair_j, pair_i = np.nonzero(mask)  # j-major, i ascending: canonical order
        if pair_j.size:
            excl = np.concatenate([[0], np.cumsum(counts)[:-1]])
            rank = np.arange(pair_j.size) - np.repeat(excl, counts)
            pos = starts[pair_j] + rank
            channels[pos, 0] = iou[pair_j, pair_i]
            channels[pos, 1] = fc.scores2d[idx2][pair_i]
            channels[pos, 2] = s3d[pair_j]
            channels[pos, 3] = d_norm[pair_j]
            el_i[pos] = pair_i
            el_j[pos] = pair_j

        sent_j = np.nonzero(counts == 0)[0]
        if sent_j.size:
            pos = starts[sent_j]
            channels[pos, 0] = -1.0
            channels[pos, 1] = -1.0
            channels[pos, 2] = s3d[sent_j]
            channels[pos, 3] = d_norm[sent_j]
            el_i[pos] = SENTINEL
            el_j[pos] = sent_j

        out[class_id] = SparseJointTensor(
            class_id=class_id, k=k, n=n,
            channels=channels, el_i=el_i, el_j=el_j, starts=starts,
            indices2d=idx2.astype(np.int64), indices3d=idx3.astype(np.int64),
            frame_id=fc.frame_id,
        )
    return out


def channel_mask(t: SparseJointTensor, mask) -> SparseJointTensor:
    """Zero out disabled channels in every element, sentinels included.

    Args:
        t: Source tensor (left untouched).
        mask: Four flags for the ``[iou, s2d, s3d, d_norm]`` channels; a
            False entry zeroes that channel.

    Returns:
        A new tensor sharing the pairing structure with masked channels.
    """
    mask = np.asarray(mask, dtype=bool).reshape(4)
    channels = t.channels.copy()
    channels[:, ~mask] = 0.0
    return SparseJointTensor(
        class_id=t.class_id, k=t.k, n=t.n,
        channels=channels,
        el_i=t.el_i.copy(), el_j=t.el_j.copy(), starts=t.starts.copy(),
        indices2d=t.indices2d.copy(), indices3d=t.indices3d.copy(),
        frame_id=t.frame_id,
    )


def format_tensor_dump(tensors: dict[ObjectClass, SparseJointTensor]) -> str:
    """Serialize tensors for debugging: ``classId j i iou s2d s3d dNorm``.

    Element indices are class-local (j and i index the per-class candidate
    subsets); sentinel i is written as -1.  Classes appear in ascending id
    order, elements in canonical order.
    """
    lines = []
    for class_id in sorted(tensors):
        t = tensors[class_id]
        for e in range(t.p):
            lines.append(
                f"{int(t.class_id)} {int(t.el_j[e])} {int(t.el_i[e])} "
                f"{t.channels[e, 0]:.9g} {t.channels[e, 1]:.9g} "
                f"{t.channels[e, 2]:.9g} {t.channels[e, 3]:.9g}"
            )
    return "\n".join(lines) + ("\n" if lines else "")
