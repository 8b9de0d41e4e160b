"""Target assignment, focal loss, Adam, and the training loop.

Training pairs each frame's joint tensors with binary targets: a 3D
candidate is positive when it overlaps a same-class ground-truth box at
or above that class's IoU threshold (the same threshold the metric uses).
The loop runs batch-size-1 Adam over shuffled frames with an exponential
learning-rate decay, and everything is fully determined by the seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .candidates import FrameCandidates, GroundTruthObject, ObjectClass
from .encoder import SparseJointTensor
from .network import FusionParams, backward, forward, init_params, sigmoid

logger = logging.getLogger(__name__)

#: p_t is clamped here inside the log (and only there).
PT_FLOOR = 1e-7

DEFAULT_IOU_THRESHOLDS = {
    ObjectClass.CAR: 0.7,
    ObjectClass.PEDESTRIAN: 0.5,
    ObjectClass.CYCLIST: 0.5,
}


@dataclass(frozen=True)
class LossConfig:
    """Focal-loss settings.

    Attributes:
        alpha: Weight on the positive class, in (0, 1).
        gamma: Focusing exponent, >= 0.
        focal_enabled: When False the loss is plain binary cross-entropy
            (equivalent to alpha_t = 1, gamma = 0).
    """

    alpha: float = 0.25
    gamma: float = 2.0
    focal_enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer schedule and target-assignment settings."""

    lr0: float = 3e-3
    lr_decay: float = 0.8
    epochs: int = 15
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    positive_iou_threshold: dict = field(
        default_factory=lambda: dict(DEFAULT_IOU_THRESHOLDS)
    )
    match_metric: str = "3d"

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.match_metric not in ("bev", "3d"):
            raise ValueError(
                f"match_metric must be 'bev' or '3d', got {self.match_metric!r}"
            )

    def lr_at(self, epoch: int) -> float:
        """Learning rate used in the given zero-based epoch."""
        return self.lr0 * self.lr_decay**epoch


@dataclass
class AdamState:
    """First/second moment accumulators over the flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size))


def assign_targets(
    fc: FrameCandidates,
    gts: Sequence[GroundTruthObject],
    cfg: TrainConfig = TrainConfig(),
) -> np.ndarray:
    """Binary label per 3D candidate, in candidate order.

    A candidate is positive iff its best IoU (cfg.match_metric) against a
    same-class, non-DontCare ground-truth box reaches that class's
    threshold.  One ground-truth box may support any number of candidates
    — labeling happens before suppression.  Classes without a threshold
    (OTHER) are always negative.
    """
    from .geometry import iou_3d_matrix, iou_bev_matrix

    labels = np.zeros(fc.n)
    matrix_fn = iou_3d_matrix if cfg.match_metric == "3d" else iou_bev_matrix
    for class_id, threshold in cfg.positive_iou_threshold.items():
        idx = np.nonzero(fc.classes3d == int(class_id))[0]
        if idx.size == 0:
            continue
        gt_rows = [
            [g.box3d.h, g.box3d.w, g.box3d.l, g.box3d.x, g.box3d.y, g.box3d.z,
             g.box3d.theta]
            for g in gts
            if g.class_id == class_id and not g.is_dont_care and g.box3d is not None
        ]
        if not gt_rows:
            continue
        iou = matrix_fn(fc.boxes3d[idx], np.array(gt_rows))
        labels[idx] = (iou.max(axis=1) >= threshold).astype(float)
    return labels


def focal_loss(
    logits: np.ndarray, labels: np.ndarray, cfg: LossConfig = LossConfig()
) -> tuple[float, np.ndarray]:
    """Mean focal loss and its exact per-logit derivative.

    Per candidate: p = sigmoid(logit), p_t = p for positives and 1 - p for
    negatives, alpha_t likewise alpha / 1 - alpha, and
    loss = -alpha_t * (1 - p_t)^gamma * ln(p_t), averaged over candidates.
    Logits are clamped to +-30 before the sigmoid and p_t is floored at
    1e-7 inside the log only; the returned gradient differentiates the
    clamped expression exactly, so it vanishes outside the clamp.
    """
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if logits.shape != labels.shape:
        raise ValueError(
            f"logits shape {logits.shape} != labels shape {labels.shape}"
        )
    if logits.size == 0:
        return 0.0, np.zeros_like(logits)

    if cfg.focal_enabled:
        alpha, gamma = cfg.alpha, cfg.gamma
        alpha_t = np.where(labels == 1.0, alpha, 1.0 - alpha)
    else:
        gamma = 0.0
        alpha_t = np.ones_like(labels)

    inside = np.abs(logits) < 30.0
    p = sigmoid(logits)
    sign = np.where(labels == 1.0, 1.0, -1.0)
    p_t = np.where(labels == 1.0, p, 1.0 - p)
    u = 1.0 - p_t
    log_pt = np.log(np.maximum(p_t, PT_FLOOR))
    floored = p_t < PT_FLOOR

    loss_terms = -alpha_t * u**gamma * log_pt
    total = float(loss_terms.mean())

    # d loss / d logit = sign * alpha_t * (gamma u^g p_t ln p_t - u^(g+1)),
    # with the cross-entropy term dropped where the log floor is active.
    term_log = gamma * u**gamma * p_t * log_pt if gamma != 0.0 else 0.0
    term_ce = np.where(floored, 0.0, u ** (gamma + 1.0))
    dlogits = sign * alpha_t * (term_log - term_ce) / logits.size
    dlogits = np.where(inside, dlogits, 0.0)
    return total, dlogits


def adam_step(
    params: FusionParams,
    grads: FusionParams,
    state: AdamState,
    lr: float,
    cfg: TrainConfig = TrainConfig(),
) -> tuple[FusionParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    g = grads.flat()
    state = AdamState(m=state.m.copy(), v=state.v.copy(), step=state.step + 1)
    state.m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * g
    state.v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * g * g
    m_hat = state.m / (1.0 - cfg.adam_beta1**state.step)
    v_hat = state.v / (1.0 - cfg.adam_beta2**state.step)
    theta = params.flat() - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return FusionParams.from_flat(theta), state


def train(
    dataset: Sequence[tuple[SparseJointTensor, np.ndarray]],
    cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    progress: Callable[[int, float, float], None] | None = None,
) -> tuple[FusionParams, list[tuple[int, float, float]]]:
    """Run the full training loop.

    Args:
        dataset: (tensor, labels) pairs; labels align with the tensor's
            3D candidates.  Tensors with zero candidates are skipped with
            a log line.
        cfg: Optimizer and schedule settings; ``cfg.seed`` fixes the
            parameter init and the per-epoch shuffles, so the result is
            bitwise reproducible.
        loss_cfg: Loss settings.
        progress: Optional callback invoked per epoch with
            (epoch, mean_loss, lr).

    Returns:
        Final parameters and the loss log as (epoch, mean_loss, lr) rows.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    for t, labels in dataset:
        if labels.shape != (t.n,):
            raise ValueError(
                f"labels shape {labels.shape} does not match tensor n={t.n}"
            )

    params = init_params(cfg.seed)
    state = AdamState.zeros(params.flat().size)
    shuffle_rng = np.random.default_rng((cfg.seed, 1))
    log_rows: list[tuple[int, float, float]] = []

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(len(dataset))
        losses = []
        for frame_idx in order:
            tensor, labels = dataset[frame_idx]
            if tensor.n == 0:
                logger.info(
                    "skipping zero-candidate frame %s (class %d)",
                    tensor.frame_id, int(tensor.class_id),
                )
                continue
            scores, cache = forward(params, tensor)
            loss, dlogits = focal_loss(scores.logits, labels, loss_cfg)
            grads = backward(params, cache, dlogits)
            params, state = adam_step(params, grads, state, lr, cfg)
            losses.append(loss)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        log_rows.append((epoch, mean_loss, lr))
        if progress is not None:
            progress(epoch, mean_loss, lr)
    return params, log_rows


def format_loss_log(rows: Sequence[tuple[int, float, float]]) -> str:
    """CSV serialization of the per-epoch loss log."""
    lines = ["epoch,mean_loss,lr"]
    for epoch, mean_loss, lr in rows:
        lines.append(f"{epoch},{mean_loss:.9g},{lr:.9g}")
    return "\n".join(lines) + "\n"
