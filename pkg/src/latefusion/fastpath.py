"""Native fast path for encoding and fused scoring at detector scale.

The pure-Python encoder and network are the reference implementations; they
materialize an (n, k) IoU matrix and run the MLP in float64, which is exact
but too slow when a frame carries tens of thousands of 3D candidates.  This
module wraps the optional C extension ``latefusion._kernels`` with the same
frame-in, scores-out contract: 2D boxes are sorted by their left edge once
per class so the join visits only a bounded x-window per candidate, channels
are stored as four contiguous float32 streams instead of a (p, 4) matrix,
and the element MLP plus per-candidate max run vectorized in C.

The fast path is an accelerator, not a second source of truth: structure
(element order, sentinel placement, index cache) matches the reference
encoder exactly, and channel values and fused logits agree to float32
precision.  When the extension is missing, ``KERNELS_AVAILABLE`` is False
and callers fall back to the reference path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .candidates import FUSABLE_CLASSES, FrameCandidates, ObjectClass
from .encoder import SENTINEL, EncoderConfig, SparseJointTensor
from .network import FusionParams

try:
    from . import _kernels
except ImportError:  # pragma: no cover - exercised only on builds without a compiler
    _kernels = None

#: True when the compiled kernels imported; callers must check before use.
KERNELS_AVAILABLE = _kernels is not None


@dataclass
class FastTensor:
    """Stream-layout joint tensor produced by the native encoder.

    Holds the same information as :class:`SparseJointTensor` with the
    channel matrix split into per-channel float32 streams, which is the
    layout the native MLP kernel consumes directly.

    Attributes:
        class_id: Category of all candidates in this tensor.
        k: Number of same-class 2D candidates.
        n: Number of same-class 3D candidates.
        c_iou: (p,) float32 overlap channel; -1 for sentinels.
        c_s2d: (p,) float32 2D-score channel; -1 for sentinels.
        c_s3d: (p,) float32 3D-score channel.
        c_dn: (p,) float32 normalized-range channel.
        el_i: (p,) int32 class-local 2D index per element; -1 for sentinels.
        starts: (n + 1,) int64 index cache, as in the reference encoder.
        indices2d: (k,) int64 class-local to frame-level 2D index map.
        indices3d: (n,) int64 class-local to frame-level 3D index map.
        frame_id: Identifier of the source frame.
    """

    class_id: ObjectClass
    k: int
    n: int
    c_iou: np.ndarray
    c_s2d: np.ndarray
    c_s3d: np.ndarray
    c_dn: np.ndarray
    el_i: np.ndarray
    starts: np.ndarray
    indices2d: np.ndarray
    indices3d: np.ndarray
    frame_id: str = ""

    @property
    def p(self) -> int:
        """Total element count (pairs plus sentinels)."""
        return self.c_iou.shape[0]


@dataclass(frozen=True)
class FastParams:
    """Network weights pre-packed for the native MLP kernel.

    The kernel wants each weight matrix transposed to (fan_in, fan_out)
    float32 so consecutive output units read consecutive memory, and the
    scalar output layer flattened to a vector plus a bias scalar.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    w4: np.ndarray
    b4: float


def prepare_params(params: FusionParams) -> FastParams:
    """Pack reference float64 weights into the kernel layout.

    Args:
        params: Reference network parameters.

    Returns:
        The same weights transposed, cast to float32, and made contiguous.
    """
    f32 = lambda a: np.ascontiguousarray(a, dtype=np.float32)  # noqa: E731
    return FastParams(
        w1=f32(params.W1.T), b1=f32(params.b1),
        w2=f32(params.W2.T), b2=f32(params.b2),
        w3=f32(params.W3.T), b3=f32(params.b3),
        w4=f32(params.W4[0]), b4=float(params.b4[0]),
    )


def _empty_fast_tensor(
    class_id: ObjectClass, k: int, idx2: np.ndarray, frame_id: str
) -> FastTensor:
    zero32 = np.zeros(0, dtype=np.float32)
    return FastTensor(
        class_id=class_id, k=k, n=0,
        c_iou=zero32, c_s2d=zero32.copy(), c_s3d=zero32.copy(), c_dn=zero32.copy(),
        el_i=np.zeros(0, dtype=np.int32),
        starts=np.zeros(1, dtype=np.int64),
        indices2d=idx2.astype(np.int64),
        indices3d=np.zeros(0, dtype=np.int64),
        frame_id=frame_id,
    )


def encode_frame_fast(
    fc: FrameCandidates, cfg: EncoderConfig = EncoderConfig()
) -> dict[ObjectClass, FastTensor]:
    """Native twin of :func:`latefusion.encoder.encode_frame`.

    Produces per-class tensors with identical structure (element order,
    sentinels, index cache) and float32 channel streams.

    Args:
        fc: The frame's candidates and calibration.
        cfg: Encoder configuration.

    Returns:
        Mapping from each fusable category present in the frame to its
        stream-layout tensor.

    Raises:
        RuntimeError: If the compiled kernels are unavailable.
    """
    if _kernels is None:
        raise RuntimeError("native kernels unavailable; use encoder.encode_frame")

    calib = fc.calib
    m_flat = np.ascontiguousarray(calib.M.reshape(-1), dtype=np.float64)
    out: dict[ObjectClass, FastTensor] = {}
    for class_id in FUSABLE_CLASSES:
        idx2 = np.nonzero(fc.classes2d == int(class_id))[0]
        idx3 = np.nonzero(fc.classes3d == int(class_id))[0]
        if idx2.size == 0 and idx3.size == 0:
            continue
        if idx3.size == 0:
            out[class_id] = _empty_fast_tensor(class_id, int(idx2.size), idx2, fc.frame_id)
            continue

        k, n = int(idx2.size), int(idx3.size)
        # Single-class frames cover every candidate; skip the gather copy.
        if n == fc.boxes3d.shape[0]:
            boxes3d = np.ascontiguousarray(fc.boxes3d, dtype=np.float64)
            s3d = np.ascontiguousarray(fc.scores3d, dtype=np.float64)
        else:
            boxes3d = np.ascontiguousarray(fc.boxes3d[idx3], dtype=np.float64)
            s3d = np.ascontiguousarray(fc.scores3d[idx3], dtype=np.float64)
        hulls = np.empty((n, 4), dtype=np.float64)
        valid = np.empty(n, dtype=np.uint8)
        d_norm = np.empty(n, dtype=np.float64)
        _kernels.project_hulls(
            boxes3d, m_flat, float(calib.image_width), float(calib.image_height),
            bool(cfg.clip_hulls), float(cfg.d_max), hulls, valid, d_norm,
        )

        # Sort the class's 2D boxes by left edge and hand the kernel flat
        # coordinate columns; it binary-searches this order and reports
        # elements by original index.
        boxes2d = fc.boxes2d[idx2]
        order = np.argsort(boxes2d[:, 0], kind="stable").astype(np.int64)
        boxes2d_sorted = boxes2d[order]
        bx1 = np.ascontiguousarray(boxes2d_sorted[:, 0], dtype=np.float64)
        by1 = np.ascontiguousarray(boxes2d_sorted[:, 1], dtype=np.float64)
        bx2 = np.ascontiguousarray(boxes2d_sorted[:, 2], dtype=np.float64)
        by2 = np.ascontiguousarray(boxes2d_sorted[:, 3], dtype=np.float64)
        barea = (bx2 - bx1) * (by2 - by1)
        max_width = float(np.max(bx2 - bx1)) if k else 0.0
        s2d = np.ascontiguousarray(fc.scores2d[idx2], dtype=np.float64)

        # Single-pass join into preallocated streams; the heuristic capacity
        # covers ordinary overlap densities, and a pathological frame just
        # pays for one retry at the exact size the first call reports.
        starts = np.empty(n + 1, dtype=np.int64)
        cap = 2 * n + 64 * k + 64
        while True:
            c_iou = np.empty(cap, dtype=np.float32)
            c_s2d = np.empty(cap, dtype=np.float32)
            c_s3d = np.empty(cap, dtype=np.float32)
            c_dn = np.empty(cap, dtype=np.float32)
            el_i = np.empty(cap, dtype=np.int32)
            p = _kernels.sparse_join(
                hulls, valid, s3d, d_norm, bx1, by1, bx2, by2, barea, s2d,
                order, max_width, float(cfg.min_iou), cap, starts,
                c_iou, c_s2d, c_s3d, c_dn, el_i,
            )
            if p <= cap:
                break
            cap = p
        c_iou, c_s2d, c_s3d = c_iou[:p], c_s2d[:p], c_s3d[:p]
        c_dn, el_i = c_dn[:p], el_i[:p]

        out[class_id] = FastTensor(
            class_id=class_id, k=k, n=n,
            c_iou=c_iou, c_s2d=c_s2d, c_s3d=c_s3d, c_dn=c_dn,
            el_i=el_i, starts=starts,
            indices2d=idx2.astype(np.int64), indices3d=idx3.astype(np.int64),
            frame_id=fc.frame_id,
        )
    return out


def forward_fast(t: FastTensor, params: FastParams) -> np.ndarray:
    """Native twin of :func:`latefusion.network.forward`.

    Runs the element MLP over the channel streams and max-pools per 3D
    candidate.

    Args:
        t: Stream-layout tensor from :func:`encode_frame_fast`.
        params: Pre-packed weights from :func:`prepare_params`.

    Returns:
        (n,) float32 fused logits, one per 3D candidate.

    Raises:
        RuntimeError: If the compiled kernels are unavailable.
    """
    if _kernels is None:
        raise RuntimeError("native kernels unavailable; use network.forward")
    if t.n == 0:
        return np.zeros(0, dtype=np.float32)
    logits = np.empty(t.p, dtype=np.float32)
    _kernels.fused_forward(
        t.c_iou, t.c_s2d, t.c_s3d, t.c_dn,
        params.w1, params.b1, params.w2, params.b2,
        params.w3, params.b3, params.w4, params.b4,
        logits,
    )
    fused = np.empty(t.n, dtype=np.float32)
    _kernels.segment_max(logits, t.starts, fused)
    return fused


def to_tensor(t: FastTensor) -> SparseJointTensor:
    """Convert a stream-layout tensor to the reference representation.

    Channel values keep their float32 precision (upcast to float64 storage);
    structure converts losslessly.
    """
    channels = np.empty((t.p, 4))
    channels[:, 0] = t.c_iou
    channels[:, 1] = t.c_s2d
    channels[:, 2] = t.c_s3d
    channels[:, 3] = t.c_dn
    el_j = np.repeat(
        np.arange(t.n, dtype=np.int32), np.diff(t.starts).astype(np.int64)
    )
    return SparseJointTensor(
        class_id=t.class_id, k=t.k, n=t.n,
        channels=channels,
        el_i=t.el_i.copy(), el_j=el_j, starts=t.starts.copy(),
        indices2d=t.indices2d.copy(), indices3d=t.indices3d.copy(),
        frame_id=t.frame_id,
    )


# Re-export for callers that want to assert sentinel slots explicitly.
__all__ = [
    "KERNELS_AVAILABLE",
    "FastTensor",
    "FastParams",
    "prepare_params",
    "encode_frame_fast",
    "forward_fast",
    "to_tensor",
    "SENTINEL",
]
