"""The fusion network: a fixed per-element MLP with max-pool readout.

Every non-empty tensor element's 4-channel vector passes through three
ReLU layers (4 -> 18 -> 36 -> 36) and one linear layer (36 -> 1), giving
one logit per element.  The fused logit of 3D candidate j is the maximum
over j's element logits; conceptually the (k+1) x n grid is filled with
negative infinity outside the non-empty elements, so absent pairs never
win the pool, and the encoder guarantees every candidate owns at least
one element (a sentinel if nothing overlaps).  This is equivalent to a
stack of 1x1 convolutions over the dense grid, evaluated sparsely.

Gradients are hand-written and exact: the max-pool routes each
candidate's gradient through its argmax element only (ties break to the
lowest element index), then through the ReLU masks and affine layers.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .encoder import SparseJointTensor
from .errors import ContractError, DataError

#: Layer widths, input to output.
LAYER_WIDTHS = (4, 18, 36, 36, 1)

#: Logits are clamped to this magnitude before any sigmoid.
LOGIT_CLAMP = 30.0

CHECKPOINT_VERSION = 1

_LAYER_NAMES = ("fc1", "fc2", "fc3", "fc4")


@dataclass(frozen=True)
class FusionParams:
    """Dense layer parameters (also used as the gradient container).

    Weight matrices are stored (out_features, in_features); ``W4`` keeps
    its leading singleton axis so shapes mirror the layer list exactly.
    """

    W1: np.ndarray  # (18, 4)
    b1: np.ndarray  # (18,)
    W2: np.ndarray  # (36, 18)
    b2: np.ndarray  # (36,)
    W3: np.ndarray  # (36, 36)
    b3: np.ndarray  # (36,)
    W4: np.ndarray  # (1, 36)
    b4: np.ndarray  # (1,)

    def __post_init__(self):
        expected = {
            "W1": (18, 4), "b1": (18,), "W2": (36, 18), "b2": (36,),
            "W3": (36, 36), "b3": (36,), "W4": (1, 36), "b4": (1,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")

    def layers(self):
        """Yield (name, weight, bias) triples in forward order."""
        return (
            (_LAYER_NAMES[0], self.W1, self.b1),
            (_LAYER_NAMES[1], self.W2, self.b2),
            (_LAYER_NAMES[2], self.W3, self.b3),
            (_LAYER_NAMES[3], self.W4, self.b4),
        )

    def flat(self) -> np.ndarray:
        """All parameters concatenated (W1, b1, ..., W4, b4 order)."""
        return np.concatenate([a.ravel() for pair in self.layers() for a in pair[1:]])

    @classmethod
    def from_flat(cls, vec: np.ndarray) -> "FusionParams":
        arrays = []
        offset = 0
        for w_shape, b_shape in _layer_shapes():
            w_size = w_shape[0] * w_shape[1]
            arrays.append(vec[offset:offset + w_size].reshape(w_shape).copy())
            offset += w_size
            arrays.append(vec[offset:offset + b_shape[0]].copy())
            offset += b_shape[0]
        if offset != vec.size:
            raise ValueError(f"expected {offset} entries, got {vec.size}")
        return cls(*arrays)


def _layer_shapes():
    widths = LAYER_WIDTHS
    return [((widths[i + 1], widths[i]), (widths[i + 1],)) for i in range(4)]


@dataclass
class ForwardCache:
    """Intermediates recorded by forward() for exact backprop."""

    x: np.ndarray        # (p, 4) input channels
    z1: np.ndarray       # (p, 18) pre-activations
    a1: np.ndarray       # (p, 18) post-ReLU
    z2: np.ndarray       # (p, 36)
    a2: np.ndarray       # (p, 36)
    z3: np.ndarray       # (p, 36)
    a3: np.ndarray       # (p, 36)
    logits: np.ndarray   # (p,) element logits
    argmax: np.ndarray   # (n,) winning element index per candidate

    @property
    def p(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.argmax.shape[0]


@dataclass(frozen=True)
class FusedFrameScores:
    """One fused logit per 3D candidate of a (frame, class) tensor."""

    logits: np.ndarray
    class_id: int
    frame_id: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("fused logits must be finite")

    @property
    def n(self) -> int:
        return self.logits.shape[0]


def init_params(seed: int) -> FusionParams:
    """Fan-in scaled uniform initialization; biases zero.

    Weights for each layer are drawn uniform in +-sqrt(6 / fan_in), in
    layer order, from a generator seeded with ``seed`` — the same seed
    always yields bitwise-identical parameters.
    """
    rng = np.random.default_rng(seed)
    arrays = []
    for w_shape, b_shape in _layer_shapes():
        bound = np.sqrt(6.0 / w_shape[1])
        arrays.append(rng.uniform(-bound, bound, size=w_shape))
        arrays.append(np.zeros(b_shape))
    return FusionParams(*arrays)


def forward(
    params: FusionParams, t: SparseJointTensor
) -> tuple[FusedFrameScores, ForwardCache]:
    """Score every element and max-pool per 3D candidate.

    Returns the fused logits (one per candidate j) and the cache needed
    by backward().  The argmax tie-break is the lowest element index.
    """
    x = t.channels
    z1 = x @ params.W1.T + params.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params.W2.T + params.b2
    a2 = np.maximum(z2, 0.0)
    z3 = a2 @ params.W3.T + params.b3
    a3 = np.maximum(z3, 0.0)
    logits = a3 @ params.W4[0] + params.b4[0]

    n = t.n
    if n > 0:
        seg_max = np.maximum.reduceat(logits, t.starts[:-1])
        # Lowest element index among the per-segment maxima.
        hit = np.where(logits == seg_max[t.el_j], np.arange(t.p), t.p)
        argmax = np.minimum.reduceat(hit, t.starts[:-1])
    else:
        seg_max = np.zeros(0)
        argmax = np.zeros(0, dtype=np.int64)

    scores = FusedFrameScores(
        logits=seg_max, class_id=int(t.class_id), frame_id=t.frame_id
    )
    cache = ForwardCache(
        x=x, z1=z1, a1=a1, z2=z2, a2=a2, z3=z3, a3=a3,
        logits=logits, argmax=argmax.astype(np.int64),
    )
    return scores, cache


def backward(
    params: FusionParams, cache: ForwardCache, grad_out: np.ndarray
) -> FusionParams:
    """Exact parameter gradients for d(loss)/d(fused logits) = grad_out.

    Only each candidate's argmax element carries gradient (the max-pool
    subgradient); all other elements contribute nothing.

    Raises:
        ContractError: If grad_out's length does not match the cache.
    """
    grad_out = np.asarray(grad_out, dtype=float)
    if grad_out.shape != (cache.n,):
        raise ContractError(
            f"grad_out has shape {grad_out.shape}, cache holds {cache.n} candidates"
        )
    if np.any(cache.argmax >= cache.p):
        raise ContractError("cache argmax indices exceed element count")

    sel = cache.argmax
    x_s = cache.x[sel]
    a1_s, a2_s, a3_s = cache.a1[sel], cache.a2[sel], cache.a3[sel]
    z1_s, z2_s, z3_s = cache.z1[sel], cache.z2[sel], cache.z3[sel]

    d4 = grad_out  # (n,)
    gW4 = (d4 @ a3_s)[None, :]
    gb4 = np.array([d4.sum()])

    da3 = d4[:, None] * params.W4[0]
    dz3 = da3 * (z3_s > 0.0)
    gW3 = dz3.T @ a2_s
    gb3 = dz3.sum(axis=0)

    da2 = dz3 @ params.W3
    dz2 = da2 * (z2_s > 0.0)
    gW2 = dz2.T @ a1_s
    gb2 = dz2.sum(axis=0)

    da1 = dz2 @ params.W2
    dz1 = da1 * (z1_s > 0.0)
    gW1 = dz1.T @ x_s
    gb1 = dz1.sum(axis=0)

    return FusionParams(gW1, gb1, gW2, gb2, gW3, gb3, gW4, gb4)


def fuse_probabilities(scores: FusedFrameScores) -> np.ndarray:
    """Element-wise sigmoid of the fused logits, clamped to +-30 first."""
    return sigmoid(scores.logits)


def sigmoid(logits: np.ndarray) -> np.ndarray:
    """Numerically stable sigmoid with the standard logit clamp."""
    z = np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def save_checkpoint(params: FusionParams, path, seed: int | None = None) -> None:
    """Write parameters as JSON; floats round-trip exactly.

    The write is atomic (temp file in the same directory, then rename).
    """
    layers = []
    for name, w, b in params.layers():
        layers.append({
            "name": name,
            "rows": int(w.shape[0]),
            "cols": int(w.shape[1]),
            "weights": [float(v) for v in w.ravel()],
            "bias": [float(v) for v in b],
        })
    doc = {"version": CHECKPOINT_VERSION, "seed": seed, "layers": layers}
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as f:
        json.dump(doc, f)
        f.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[FusionParams, int | None]:
    """Read a checkpoint written by save_checkpoint().

    Returns:
        The parameters and the recorded seed (None if absent).

    Raises:
        DataError: On version, layer-name, or shape mismatches.
    """
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(
            f"unsupported checkpoint version {doc.get('version')!r} in {path}"
        )
    layers = doc.get("layers", [])
    if len(layers) != 4:
        raise DataError(f"checkpoint {path} must list 4 layers, got {len(layers)}")
    arrays = []
    for layer, (name, (w_shape, b_shape)) in zip(
        layers, zip(_LAYER_NAMES, _layer_shapes())
    ):
        if layer.get("name") != name:
            raise DataError(f"expected layer {name!r}, got {layer.get('name')!r}")
        if (layer.get("rows"), layer.get("cols")) != w_shape:
            raise DataError(
                f"layer {name}: expected shape {w_shape}, "
                f"got ({layer.get('rows')}, {layer.get('cols')})"
            )
        w = np.array(layer["weights"], dtype=float)
        b = np.array(layer["bias"], dtype=float)
        if w.size != w_shape[0] * w_shape[1] or b.shape != b_shape:
            raise DataError(f"layer {name}: weight/bias length mismatch")
        arrays.append(w.reshape(w_shape))
        arrays.append(b)
    try:
        params = FusionParams(*arrays)
    except ValueError as exc:
        raise DataError(f"invalid checkpoint {path}: {exc}") from exc
    return params, doc.get("seed")
