"""Command-line pipeline driver: ``synth -> train -> fuse -> eval``.

Every command works on dataset directories with one fixed layout, so the
synthetic path and externally produced candidate files are
interchangeable::

    <dir>/calib.txt              shared calibration (KITTI-style text)
    <dir>/frames/<id>_2d.txt     per-frame 2D candidates
    <dir>/frames/<id>_3d.txt     per-frame 3D candidates
    <dir>/labels/<id>.txt        per-frame ground truth (KITTI 15-column)
    <dir>/manifest.json          run manifest

Each run writes exactly one JSON manifest recording the command, a config
snapshot, the seed, input and output paths with sha256 content hashes,
and wall-clock timings per stage.  Two runs produced the same artifacts
iff their manifests carry the same hashes — no file diffing needed.
Manifests themselves are provenance, not data: directory hashing skips
them, and they are the one output whose bytes may differ between
otherwise identical runs (timings).

Configuration is a JSON object with optional sections ``synth``,
``encoder``, ``train``, ``loss``, ``nms``, ``eval``, and ``data``, each
mirroring the matching config dataclass; unknown sections or keys are
rejected by name.  The image size used to parse calibrations comes from
``synth.camera`` (calibration files carry no size).

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal
contract violation.

Fused candidates have their 3D score replaced by the fusion probability;
categories outside the fusable set pass through with their original
detector score.  Plots are not rendered here — ``eval`` emits the PR
points as CSV for external tooling.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import multiprocessing
import sys
import time
from contextlib import contextmanager
from functools import partial
from pathlib import Path

import numpy as np

from .candidates import (
    Detection3D,
    FrameCandidates,
    ObjectClass,
    class_name,
    format_detections_2d,
    format_detections_3d,
    format_labels,
    parse_detections_2d,
    parse_detections_3d,
    parse_labels,
)
from .encoder import EncoderConfig, channel_mask, encode_frame
from .errors import ContractError, DataError, ParseError, UsageError
from .evaluation import (
    EASY,
    HARD,
    MODERATE,
    Difficulty,
    EvalConfig,
    evaluate,
    format_pr_points,
    format_report,
)
from .fastpath import KERNELS_AVAILABLE, encode_frame_fast, forward_fast, prepare_params
from .geometry import Box3D, format_calibration, parse_calibration, project_boxes3d
from .network import load_checkpoint, save_checkpoint, sigmoid
from .network import forward as net_forward
from .nms import NmsConfig, nms
from .synth import SynthConfig, generate_frame, make_calibration
from .training import LossConfig, TrainConfig, assign_targets, format_loss_log, train

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Configuration file
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class DataConfig:
    """How candidate files are interpreted when read."""

    score_scale: str = "log"

    def __post_init__(self):
        if self.score_scale not in ("log", "sigmoid"):
            raise ValueError(
                f"score_scale must be 'log' or 'sigmoid', got {self.score_scale!r}"
            )


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    """All per-run settings, one section per pipeline stage."""

    synth: SynthConfig
    encoder: EncoderConfig
    train: TrainConfig
    loss: LossConfig
    nms: NmsConfig
    eval: EvalConfig
    data: DataConfig


_CLASS_BY_NAME = {
    "car": ObjectClass.CAR,
    "pedestrian": ObjectClass.PEDESTRIAN,
    "cyclist": ObjectClass.CYCLIST,
    "other": ObjectClass.OTHER,
}

_DIFFICULTY_BY_NAME = {"easy": EASY, "moderate": MODERATE, "hard": HARD}


def _object_class(value, path: str) -> ObjectClass:
    if isinstance(value, str):
        try:
            return _CLASS_BY_NAME[value.lower()]
        except KeyError:
            raise UsageError(f"{path}: unknown object class {value!r}") from None
    try:
        return ObjectClass(int(value))
    except (TypeError, ValueError):
        raise UsageError(f"{path}: unknown object class {value!r}") from None


def _difficulty(value, path: str) -> Difficulty:
    try:
        return _DIFFICULTY_BY_NAME[str(value).lower()]
    except KeyError:
        raise UsageError(f"{path}: unknown difficulty {value!r}") from None


def _convert(current, value, path: str):
    """Coerce a JSON value onto the type of the default it replaces."""
    if isinstance(current, ObjectClass):
        return _object_class(value, path)
    if isinstance(current, dict):
        if not isinstance(value, dict):
            raise UsageError(f"{path} must be an object of class-name keys")
        merged = dict(current)
        for name, v in value.items():
            merged[_object_class(name, path)] = float(v)
        return merged
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise UsageError(f"{path} must be true or false")
        return value
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise UsageError(f"{path} must be a list")
        if current and isinstance(current[0], Difficulty):
            return tuple(_difficulty(v, path) for v in value)
        return tuple(value)
    return value


def _from_dict(default, data, path: str):
    """Rebuild a config dataclass with overrides from a JSON object."""
    if not isinstance(data, dict):
        raise UsageError(f"config section {path} must be a JSON object")
    known = {f.name: getattr(default, f.name) for f in dataclasses.fields(default)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise UsageError(f"unknown config key {path}.{key}")
        current = known[key]
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            kwargs[key] = _from_dict(current, value, f"{path}.{key}")
        else:
            kwargs[key] = _convert(current, value, f"{path}.{key}")
    try:
        return dataclasses.replace(default, **kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config section {path}: {exc}") from exc


_SECTION_DEFAULTS = (
    ("synth", SynthConfig),
    ("encoder", EncoderConfig),
    ("train", TrainConfig),
    ("loss", LossConfig),
    ("nms", NmsConfig),
    ("eval", EvalConfig),
    ("data", DataConfig),
)


def load_config(path=None, seed: int | None = None) -> PipelineConfig:
    """Read a JSON config file; ``seed`` overrides synth and train seeds.

    Args:
        path: Config file path, or None for all defaults.
        seed: When given, replaces ``synth.seed`` and ``train.seed``.

    Raises:
        UsageError: Unreadable file, invalid JSON, or an unknown/invalid
            section, key, or value (the message names it).
    """
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"config {path} must be a JSON object")
    raw = dict(raw)
    sections = {}
    for name, cls in _SECTION_DEFAULTS:
        sections[name] = _from_dict(cls(), raw.pop(name, {}), name)
    if raw:
        raise UsageError(f"unknown config section {sorted(raw)[0]}")
    cfg = PipelineConfig(**sections)
    if seed is not None:
        cfg = dataclasses.replace(
            cfg,
            synth=dataclasses.replace(cfg.synth, seed=seed),
            train=dataclasses.replace(cfg.train, seed=seed),
        )
    return cfg


def _jsonable(obj):
    """Recursively convert configs to JSON-serializable structures."""
    if isinstance(obj, ObjectClass):
        return class_name(obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {
            f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)
        }
    if isinstance(obj, dict):
        return {str(_jsonable(k)): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise DataError(f"cannot read input {path}: {exc}") from exc


class RunManifest:
    """Accumulates one run's provenance and serializes it as JSON.

    ``inputs`` maps each input path as given to its content hash — for a
    directory, to a ``{relative path: hash}`` object (skipping nested
    manifests).  ``outputs`` maps output paths relative to the run's
    output root to their hashes, so runs into different directories stay
    comparable.  ``timings_s`` holds per-stage wall-clock seconds.
    """

    def __init__(self, command: str, cfg: PipelineConfig, seed: int | None):
        self.doc = {
            "command": command,
            "seed": seed,
            "config": _jsonable(cfg),
            "inputs": {},
            "outputs": {},
            "timings_s": {},
        }

    def add_input(self, path) -> None:
        p = Path(path)
        if not p.exists():
            raise DataError(f"input path {path} does not exist")
        if p.is_dir():
            self.doc["inputs"][str(path)] = {
                f.relative_to(p).as_posix(): _sha256(f)
                for f in sorted(p.rglob("*"))
                if f.is_file() and f.name != "manifest.json"
            }
        else:
            self.doc["inputs"][str(path)] = _sha256(p)

    def add_output(self, path, root) -> None:
        rel = Path(path).relative_to(Path(root)).as_posix()
        self.doc["outputs"][rel] = _sha256(path)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        yield
        self.doc["timings_s"][name] = round(time.perf_counter() - t0, 6)

    def write(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.doc, indent=2, sort_keys=True) + "\n"
        )


# ---------------------------------------------------------------------------
# Dataset directory I/O
# ---------------------------------------------------------------------------


def _write(path: Path, text: str, manifest: RunManifest, root: Path) -> None:
    path.write_text(text)
    manifest.add_output(path, root)


def write_dataset(out_dir: Path, frames, calib, manifest: RunManifest) -> None:
    """Write candidate, label, and calibration files for all frames."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    _write(out_dir / "calib.txt", format_calibration(calib), manifest, out_dir)
    for fc, gts in frames:
        fid = fc.frame_id
        _write(out_dir / "frames" / f"{fid}_2d.txt",
               format_detections_2d(fc.dets2d), manifest, out_dir)
        _write(out_dir / "frames" / f"{fid}_3d.txt",
               format_detections_3d(fc.dets3d), manifest, out_dir)
        _write(out_dir / "labels" / f"{fid}.txt",
               format_labels(gts, calib), manifest, out_dir)


def _read_text(path: Path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _parse_file(parse_fn, path: Path, *args, **kwargs):
    """Run a parser over a file's text, prefixing errors with the path."""
    try:
        return parse_fn(_read_text(path), *args, **kwargs)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def read_calibration(data_dir: Path, cfg: PipelineConfig):
    """Parse ``calib.txt``; the image size comes from ``synth.camera``."""
    cam = cfg.synth.camera
    return _parse_file(parse_calibration, Path(data_dir) / "calib.txt",
                       cam.image_width, cam.image_height)


def frame_ids(data_dir: Path) -> list[str]:
    """Frame ids present under ``frames/``, sorted."""
    frames_dir = Path(data_dir) / "frames"
    if not frames_dir.is_dir():
        raise DataError(f"no frames directory under {data_dir}")
    return sorted(p.name[: -len("_3d.txt")]
                  for p in frames_dir.glob("*_3d.txt"))


def read_frame(data_dir: Path, fid: str, calib, score_scale: str) -> FrameCandidates:
    """Read one frame's candidates; a missing 2D file means no 2D candidates."""
    path2 = Path(data_dir) / "frames" / f"{fid}_2d.txt"
    dets2 = (_parse_file(parse_detections_2d, path2, score_scale=score_scale)
             if path2.exists() else [])
    dets3 = _parse_file(
        parse_detections_3d, Path(data_dir) / "frames" / f"{fid}_3d.txt",
        score_scale=score_scale,
    )
    return FrameCandidates.from_detections(fid, calib, dets2, dets3)


def read_dataset(data_dir: Path, cfg: PipelineConfig, with_labels: bool):
    """Read every frame (and optionally labels) from a dataset directory.

    Returns:
        ``(frames, calib)`` where frames is a list of ``FrameCandidates``
        or, with labels, of ``(FrameCandidates, [GroundTruthObject])``.

    Raises:
        DataError: No frames found, or label files missing — the message
            lists each affected frame id.
    """
    data_dir = Path(data_dir)
    calib = read_calibration(data_dir, cfg)
    ids = frame_ids(data_dir)
    if not ids:
        raise DataError(f"no candidate files under {data_dir}/frames")
    if with_labels:
        missing = [fid for fid in ids
                   if not (data_dir / "labels" / f"{fid}.txt").exists()]
        if missing:
            raise DataError(
                "missing label files for frames: " + ", ".join(missing[:10])
                + (" ..." if len(missing) > 10 else "")
            )
    scale = cfg.data.score_scale
    frames = []
    for fid in ids:
        fc = read_frame(data_dir, fid, calib, scale)
        if with_labels:
            gts = _parse_file(parse_labels, data_dir / "labels" / f"{fid}.txt", calib)
            frames.append((fc, gts))
        else:
            frames.append(fc)
    return frames, calib


def read_labels_dir(gt_dir: Path, calib) -> dict[str, list]:
    """All ground-truth frames under ``labels/``, keyed by frame id."""
    labels_dir = Path(gt_dir) / "labels"
    if not labels_dir.is_dir():
        raise DataError(f"no labels directory under {gt_dir}")
    out = {}
    for path in sorted(labels_dir.glob("*.txt")):
        out[path.stem] = _parse_file(parse_labels, path, calib)
    if not out:
        raise DataError(f"no label files under {labels_dir}")
    return out


def _empty_frame(fid: str, calib) -> FrameCandidates:
    return FrameCandidates.from_arrays(
        fid, calib,
        boxes2d=np.zeros((0, 4)), scores2d=np.zeros(0),
        classes2d=np.zeros(0, dtype=np.int8),
        boxes3d=np.zeros((0, 7)), scores3d=np.zeros(0),
        classes3d=np.zeros(0, dtype=np.int8),
    )


# ---------------------------------------------------------------------------
# Worker-pool helpers (picklable, order-preserving)
# ---------------------------------------------------------------------------


def _map_ordered(fn, items, jobs: int) -> list:
    """Map preserving order, optionally across a process pool."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with multiprocessing.Pool(processes=jobs) as pool:
        return pool.map(fn, items)


def _encode_with_labels(item, enc_cfg: EncoderConfig, train_cfg: TrainConfig):
    """One frame -> [(per-class tensor, aligned binary labels)]."""
    fc, gts = item
    tensors = encode_frame(fc, enc_cfg)
    labels = assign_targets(fc, gts, train_cfg)
    return [(tensors[cid], labels[tensors[cid].indices3d])
            for cid in sorted(tensors)]


def _fused_scores(fc: FrameCandidates, enc_cfg: EncoderConfig, params,
                  fast_params) -> tuple[np.ndarray, float]:
    """Fusion probabilities per 3D candidate plus the encode+forward time.

    Non-fusable candidates keep their original score.  Uses the native
    float32 path when compiled kernels are present, else the reference
    encoder and network.
    """
    t0 = time.perf_counter()
    if fast_params is not None:
        tensors = encode_frame_fast(fc, enc_cfg)
        fused = [(t.indices3d, forward_fast(t, fast_params))
                 for t in tensors.values() if t.n]
    else:
        tensors = encode_frame(fc, enc_cfg)
        fused = [(t.indices3d, net_forward(params, t)[0].logits)
                 for t in tensors.values() if t.n]
    elapsed = time.perf_counter() - t0
    scores = fc.scores3d.copy()
    for indices, logits in fused:
        scores[indices] = sigmoid(np.asarray(logits, dtype=np.float64))
    return scores, elapsed


def _fuse_frame(fc: FrameCandidates, enc_cfg: EncoderConfig, nms_cfg: NmsConfig,
                params, fast_params):
    """Worker: fuse (unless baseline), suppress, and serialize one frame.

    Returns:
        ``(frame_id, detection file text, fusion seconds or None)``.
    """
    if params is None and fast_params is None:
        scores, elapsed = fc.scores3d, None
    else:
        scores, elapsed = _fused_scores(fc, enc_cfg, params, fast_params)
    keep = nms(fc.boxes3d, scores, fc.classes3d, nms_cfg)
    dets = [
        Detection3D(
            box=Box3D(*fc.boxes3d[j]),
            score=float(scores[j]),
            class_id=ObjectClass(int(fc.classes3d[j])),
        )
        for j in keep
    ]
    return fc.frame_id, format_detections_3d(dets), elapsed


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(config_path, out_dir, seed: int | None = None, jobs: int = 1) -> dict:
    """Generate a synthetic dataset into ``out_dir``; returns the manifest."""
    cfg = load_config(config_path, seed=seed)
    out_dir = Path(out_dir)
    manifest = RunManifest("synth", cfg, cfg.synth.seed)
    if config_path is not None:
        manifest.add_input(config_path)
    with manifest.stage("generate"):
        frames = _map_ordered(
            partial(generate_frame, cfg.synth), range(cfg.synth.n_frames), jobs
        )
    with manifest.stage("write"):
        write_dataset(out_dir, frames, make_calibration(cfg.synth.camera), manifest)
    manifest.write(out_dir / "manifest.json")
    return manifest.doc


def cmd_train(data_dir, config_path, out_checkpoint,
              seed: int | None = None, jobs: int = 1) -> dict:
    """Encode a labeled dataset, train the fusion network, write a checkpoint.

    Writes ``out_checkpoint``, a ``loss.csv`` epoch log beside it, and the
    manifest; returns the manifest.
    """
    cfg = load_config(config_path, seed=seed)
    out_checkpoint = Path(out_checkpoint)
    out_root = out_checkpoint.parent
    out_root.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train", cfg, cfg.train.seed)
    if config_path is not None:
        manifest.add_input(config_path)
    manifest.add_input(data_dir)
    with manifest.stage("read"):
        frames, _ = read_dataset(data_dir, cfg, with_labels=True)
    with manifest.stage("encode"):
        per_frame = _map_ordered(
            partial(_encode_with_labels, enc_cfg=cfg.encoder, train_cfg=cfg.train),
            frames, jobs,
        )
        dataset = [entry for group in per_frame for entry in group]
    with manifest.stage("train"):
        params, log_rows = train(dataset, cfg.train, cfg.loss)
    with manifest.stage("write"):
        save_checkpoint(params, out_checkpoint, seed=cfg.train.seed)
        manifest.add_output(out_checkpoint, out_root)
        _write(out_root / "loss.csv", format_loss_log(log_rows), manifest, out_root)
    manifest.write(out_root / "manifest.json")
    return manifest.doc


def cmd_fuse(data_dir, checkpoint, out_dir, nms_config: NmsConfig | None = None,
             config_path=None, seed: int | None = None, jobs: int = 1) -> dict:
    """Fuse every frame's candidates and write post-NMS detection files.

    With ``checkpoint=None`` the fusion step is skipped and the raw 3D
    scores go straight to NMS — the unfused baseline detector.  Per-frame
    fusion (encode+forward) times land in the manifest under
    ``frame_times_ms``; returns the manifest.
    """
    cfg = load_config(config_path, seed=seed)
    nms_cfg = cfg.nms if nms_config is None else nms_config
    out_dir = Path(out_dir)
    manifest = RunManifest("fuse", cfg, seed)
    if config_path is not None:
        manifest.add_input(config_path)
    manifest.add_input(data_dir)
    params = fast_params = None
    if checkpoint is not None:
        manifest.add_input(checkpoint)
        params, _ = load_checkpoint(checkpoint)
        if KERNELS_AVAILABLE:
            fast_params = prepare_params(params)
    with manifest.stage("read"):
        frames, calib = read_dataset(data_dir, cfg, with_labels=False)
    with manifest.stage("fuse"):
        results = _map_ordered(
            partial(_fuse_frame, enc_cfg=cfg.encoder, nms_cfg=nms_cfg,
                    params=params, fast_params=fast_params),
            frames, jobs,
        )
    frame_times = {}
    with manifest.stage("write"):
        (out_dir / "frames").mkdir(parents=True, exist_ok=True)
        _write(out_dir / "calib.txt", format_calibration(calib), manifest, out_dir)
        for fid, text, elapsed in results:
            _write(out_dir / "frames" / f"{fid}_3d.txt", text, manifest, out_dir)
            if elapsed is not None:
                frame_times[fid] = round(elapsed * 1e3, 4)
    if frame_times:
        manifest.doc["frame_times_ms"] = frame_times
    manifest.write(out_dir / "manifest.json")
    return manifest.doc


def cmd_eval(det_dir, gt_dir, config_path, report_path,
             seed: int | None = None) -> dict:
    """Evaluate detections against ground truth; write report and PR data.

    Every ground-truth frame is scored; a missing detection file counts
    as zero detections for that frame, while detection frames without
    ground truth are an error.  Writes the AP report CSV to
    ``report_path`` and PR plot points beside it; returns the manifest.
    """
    cfg = load_config(config_path, seed=seed)
    report_path = Path(report_path)
    out_root = report_path.parent
    out_root.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("eval", cfg, seed)
    if config_path is not None:
        manifest.add_input(config_path)
    manifest.add_input(det_dir)
    manifest.add_input(gt_dir)
    with manifest.stage("read"):
        calib = read_calibration(gt_dir, cfg)
        gts_by_frame = read_labels_dir(gt_dir, calib)
        det_ids = set(frame_ids(det_dir))
        extra = sorted(det_ids - set(gts_by_frame))
        if extra:
            raise DataError(
                "detection frames lack ground truth: " + ", ".join(extra[:10])
                + (" ..." if len(extra) > 10 else "")
            )
        if not det_ids:
            logger.warning(
                "no detection files under %s; every AP will be 0", det_dir
            )
        scale = cfg.data.score_scale
        dets_by_frame = {
            fid: (read_frame(det_dir, fid, calib, scale)
                  if fid in det_ids else _empty_frame(fid, calib))
            for fid in gts_by_frame
        }
    with manifest.stage("evaluate"):
        results = evaluate(dets_by_frame, gts_by_frame, cfg.eval)
    with manifest.stage("write"):
        _write(report_path, format_report(results), manifest, out_root)
        pr_path = report_path.with_name(report_path.stem + "_pr.csv")
        _write(pr_path, format_pr_points(results), manifest, out_root)
    manifest.write(out_root / "manifest.json")
    return manifest.doc


#: Ablation rows: name, channel mask ``[iou, s2d, s3d, d_norm]``, focal flag.
#: The first row is the unfused detector; the last two isolate the loss.
ABLATION_ROWS = (
    ("baseline", None, False),
    ("no_iou", (False, True, True, True), True),
    ("no_s2d", (True, False, True, True), True),
    ("no_s3d", (True, True, False, True), True),
    ("no_dnorm", (True, True, True, False), True),
    ("no_focal", (True, True, True, True), False),
    ("full", (True, True, True, True), True),
)


def _moderate_ap(results, metric: str) -> float:
    for r in results:
        if r.metric == metric and r.difficulty == "moderate" and r.distance_bin == "all":
            return r.ap
    raise ContractError(f"no moderate {metric} AP row in evaluation results")


def format_ablation(rows: list[tuple]) -> str:
    """CSV: one row per mask/loss configuration with moderate-level APs."""
    lines = ["row,iou,s2d,s3d,d_norm,focal,ap_3d_moderate,ap_bev_moderate"]
    for name, mask, focal, ap3d, apbev in rows:
        bits = (0, 0, 0, 0) if mask is None else tuple(int(b) for b in mask)
        lines.append(
            f"{name},{bits[0]},{bits[1]},{bits[2]},{bits[3]},{int(focal)},"
            f"{ap3d:.9g},{apbev:.9g}"
        )
    return "\n".join(lines) + "\n"


def cmd_ablate(data_dir, config_path, report_path,
               seed: int | None = None, jobs: int = 1) -> dict:
    """Train and evaluate once per channel-mask/loss row; write the table.

    Each fused row masks the disabled channels, trains from scratch, and
    is evaluated in-sample on the same dataset; the baseline row is the
    unfused detector after NMS.  Returns the manifest.
    """
    cfg = load_config(config_path, seed=seed)
    report_path = Path(report_path)
    out_root = report_path.parent
    out_root.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("ablate", cfg, cfg.train.seed)
    if config_path is not None:
        manifest.add_input(config_path)
    manifest.add_input(data_dir)
    with manifest.stage("read"):
        frames, calib = read_dataset(data_dir, cfg, with_labels=True)
        gts_by_frame = {fc.frame_id: gts for fc, gts in frames}
    with manifest.stage("encode"):
        per_frame = _map_ordered(
            partial(_encode_with_labels, enc_cfg=cfg.encoder, train_cfg=cfg.train),
            frames, jobs,
        )
    eval_cfg = EvalConfig(
        metrics=("bev", "3d"),
        difficulties=(MODERATE,),
        iou_thresholds=cfg.eval.iou_thresholds,
        include_distance_bins=False,
    )
    table = []
    for name, mask, focal in ABLATION_ROWS:
        with manifest.stage(f"row_{name}"):
            dets_by_frame = {}
            if mask is None:
                for fc, _ in frames:
                    keep = nms(fc.boxes3d, fc.scores3d, fc.classes3d, cfg.nms)
                    dets_by_frame[fc.frame_id] = FrameCandidates.from_arrays(
                        fc.frame_id, calib,
                        boxes2d=np.zeros((0, 4)), scores2d=np.zeros(0),
                        classes2d=np.zeros(0, dtype=np.int8),
                        boxes3d=fc.boxes3d[keep], scores3d=fc.scores3d[keep],
                        classes3d=fc.classes3d[keep],
                    )
            else:
                dataset = [(channel_mask(t, mask), labels)
                           for group in per_frame for t, labels in group]
                loss_cfg = dataclasses.replace(cfg.loss, focal_enabled=focal)
                params, _ = train(dataset, cfg.train, loss_cfg)
                masked_by_frame: dict[str, list] = {}
                for group in [
                    [(channel_mask(t, mask), labels) for t, labels in g]
                    for g in per_frame
                ]:
                    for t, _labels in group:
                        masked_by_frame.setdefault(t.frame_id, []).append(t)
                for fc, _ in frames:
                    scores = fc.scores3d.copy()
                    for t in masked_by_frame.get(fc.frame_id, []):
                        if t.n:
                            logits = net_forward(params, t)[0].logits
                            scores[t.indices3d] = sigmoid(logits)
                    keep = nms(fc.boxes3d, scores, fc.classes3d, cfg.nms)
                    dets_by_frame[fc.frame_id] = FrameCandidates.from_arrays(
                        fc.frame_id, calib,
                        boxes2d=np.zeros((0, 4)), scores2d=np.zeros(0),
                        classes2d=np.zeros(0, dtype=np.int8),
                        boxes3d=fc.boxes3d[keep], scores3d=scores[keep],
                        classes3d=fc.classes3d[keep],
                    )
            results = evaluate(dets_by_frame, gts_by_frame, eval_cfg)
            table.append((name, mask, focal,
                          _moderate_ap(results, "3d"), _moderate_ap(results, "bev")))
    with manifest.stage("write"):
        _write(report_path, format_ablation(table), manifest, out_root)
    manifest.write(out_root / "manifest.json")
    return manifest.doc


def cmd_project(data_dir, frame_id: str, out_path=None, config_path=None) -> str:
    """Debug dump of one frame's projected 3D hulls as CSV.

    Returns the CSV text; when ``out_path`` is given it is also written
    there together with a manifest beside it.
    """
    cfg = load_config(config_path)
    data_dir = Path(data_dir)
    path3 = data_dir / "frames" / f"{frame_id}_3d.txt"
    if not path3.exists():
        raise DataError(f"frame {frame_id} not found under {data_dir}/frames")
    calib = read_calibration(data_dir, cfg)
    fc = read_frame(data_dir, frame_id, calib, cfg.data.score_scale)
    hulls, valid = project_boxes3d(calib, fc.boxes3d, clip=cfg.encoder.clip_hulls)
    lines = ["j,class,x1,y1,x2,y2,valid"]
    for j in range(fc.n):
        x1, y1, x2, y2 = hulls[j]
        lines.append(
            f"{j},{class_name(ObjectClass(int(fc.classes3d[j])))},"
            f"{x1:.9g},{y1:.9g},{x2:.9g},{y2:.9g},{int(valid[j])}"
        )
    text = "\n".join(lines) + "\n"
    if out_path is not None:
        out_path = Path(out_path)
        out_root = out_path.parent
        out_root.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest("project", cfg, None)
        if config_path is not None:
            manifest.add_input(config_path)
        manifest.add_input(data_dir)
        _write(out_path, text, manifest, out_root)
        manifest.write(out_root / "manifest.json")
    return text


# ---------------------------------------------------------------------------
# Argument parsing and entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage failures raise UsageError (exit code 1)."""

    def error(self, message):  # noqa: D102 — argparse hook
        raise UsageError(message)


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError(f"{args.command} requires --out")
    return Path(args.out)


def _check_jobs(jobs: int) -> int:
    if jobs < 1:
        raise UsageError(f"--jobs must be >= 1, got {jobs}")
    return jobs


def _run_synth(args) -> int:
    cmd_synth(args.config, _require_out(args), seed=args.seed,
              jobs=_check_jobs(args.jobs))
    return 0


def _run_train(args) -> int:
    out = _require_out(args)
    cmd_train(args.data, args.config, out / "checkpoint.json",
              seed=args.seed, jobs=_check_jobs(args.jobs))
    return 0


def _run_fuse(args) -> int:
    if args.baseline == (args.checkpoint is not None):
        raise UsageError("fuse needs a checkpoint or --baseline, not both")
    cmd_fuse(args.data, args.checkpoint, _require_out(args),
             config_path=args.config, seed=args.seed,
             jobs=_check_jobs(args.jobs))
    return 0


def _run_eval(args) -> int:
    out = _require_out(args)
    cmd_eval(args.dets, args.gts, args.config, out / "report.csv", seed=args.seed)
    return 0


def _run_ablate(args) -> int:
    out = _require_out(args)
    cmd_ablate(args.data, args.config, out / "ablation.csv",
               seed=args.seed, jobs=_check_jobs(args.jobs))
    return 0


def _run_project(args) -> int:
    out_path = Path(args.out) / "hulls.csv" if args.out is not None else None
    text = cmd_project(args.data, args.frame, out_path=out_path,
                       config_path=args.config)
    if out_path is None:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, metavar="INT",
                        help="override the synth/train seeds")
    common.add_argument("--jobs", type=int, default=1, metavar="INT",
                        help="worker processes for per-frame stages")
    common.add_argument("--out", metavar="DIR", help="output directory")

    parser = _Parser(prog="latefusion",
                     description="Candidate-level camera-LiDAR late fusion.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic dataset")
    p.set_defaults(func=_run_synth)

    p = sub.add_parser("train", parents=[common],
                       help="train the fusion network on a labeled dataset")
    p.add_argument("data", metavar="DATA_DIR")
    p.set_defaults(func=_run_train)

    p = sub.add_parser("fuse", parents=[common],
                       help="fuse candidates and write post-NMS detections")
    p.add_argument("data", metavar="DATA_DIR")
    p.add_argument("checkpoint", nargs="?", metavar="CHECKPOINT")
    p.add_argument("--baseline", action="store_true",
                   help="skip fusion; NMS on the raw 3D scores")
    p.set_defaults(func=_run_fuse)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate detections against ground truth")
    p.add_argument("dets", metavar="DET_DIR")
    p.add_argument("gts", metavar="GT_DIR")
    p.set_defaults(func=_run_eval)

    p = sub.add_parser("ablate", parents=[common],
                       help="per-channel/loss ablation table")
    p.add_argument("data", metavar="DATA_DIR")
    p.set_defaults(func=_run_ablate)

    p = sub.add_parser("project", parents=[common],
                       help="debug: dump one frame's projected hulls")
    p.add_argument("data", metavar="DATA_DIR")
    p.add_argument("frame", metavar="FRAME_ID")
    p.set_defaults(func=_run_project)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
