"""Tests for config loading, run manifests, dataset I/O, and the commands."""

import json
import logging
import shutil

import numpy as np
import pytest

from latefusion.candidates import ObjectClass
from latefusion.cli import (
    ABLATION_ROWS,
    RunManifest,
    cmd_ablate,
    cmd_eval,
    cmd_fuse,
    cmd_project,
    cmd_synth,
    cmd_train,
    frame_ids,
    load_config,
    main,
    read_calibration,
    read_dataset,
    read_frame,
)
from latefusion.errors import DataError, ParseError, UsageError
from latefusion.evaluation import MODERATE
from latefusion.network import init_params, load_checkpoint

SMALL = {"synth": {"n_frames": 5, "seed": 3}, "train": {"epochs": 3}}


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory, small_cfg):
    out = tmp_path_factory.mktemp("data") / "ds"
    cmd_synth(small_cfg, out)
    return out


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, small_cfg, dataset):
    path = tmp_path_factory.mktemp("train") / "checkpoint.json"
    cmd_train(dataset, small_cfg, path)
    return path


def read_report(path):
    header, *rows = path.read_text().strip().split("\n")
    return header, [r.split(",") for r in rows]


class TestLoadConfig:
    def test_defaults_without_file(self):
        cfg = load_config(None)
        assert cfg.synth.n_frames == 100
        assert cfg.train.epochs == 15
        assert cfg.data.score_scale == "log"

    def test_overrides_apply(self, small_cfg):
        cfg = load_config(small_cfg)
        assert cfg.synth.n_frames == 5
        assert cfg.train.epochs == 3
        assert cfg.nms.iou_threshold == load_config(None).nms.iou_threshold

    def test_seed_overrides_synth_and_train(self, small_cfg):
        cfg = load_config(small_cfg, seed=11)
        assert cfg.synth.seed == 11
        assert cfg.train.seed == 11

    def test_unknown_key_is_named(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"train": {"epoch": 2}}')
        with pytest.raises(UsageError, match=r"unknown config key train\.epoch"):
            load_config(path)

    def test_unknown_section_is_named(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"trian": {}}')
        with pytest.raises(UsageError, match="unknown config section trian"):
            load_config(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        with pytest.raises(UsageError, match="not valid JSON"):
            load_config(path)

    def test_invalid_value_names_section(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"train": {"epochs": -1}}')
        with pytest.raises(UsageError, match="train"):
            load_config(path)

    def test_class_names_in_threshold_dict(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"eval": {"iou_thresholds": {"car": 0.6}}}')
        cfg = load_config(path)
        assert cfg.eval.iou_thresholds[ObjectClass.CAR] == 0.6

    def test_difficulties_by_name(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"eval": {"difficulties": ["moderate"]}}')
        assert load_config(path).eval.difficulties == (MODERATE,)

    def test_score_scale_validated(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"data": {"score_scale": "probability"}}')
        with pytest.raises(UsageError):
            load_config(path)


class TestRunManifest:
    def test_synth_manifest_contents(self, dataset):
        doc = json.loads((dataset / "manifest.json").read_text())
        assert doc["command"] == "synth"
        assert doc["seed"] == 3
        assert doc["config"]["synth"]["n_frames"] == 5
        assert "calib.txt" in doc["outputs"]
        assert "frames/000000_3d.txt" in doc["outputs"]
        assert "labels/000000.txt" in doc["outputs"]
        assert set(doc["timings_s"]) == {"generate", "write"}

    def test_directory_hash_matches_outputs_and_skips_manifest(self, dataset):
        doc = json.loads((dataset / "manifest.json").read_text())
        m = RunManifest("check", load_config(None), None)
        m.add_input(dataset)
        hashes = m.doc["inputs"][str(dataset)]
        assert "manifest.json" not in hashes
        assert hashes == doc["outputs"]

    def test_missing_input_raises(self):
        m = RunManifest("check", load_config(None), None)
        with pytest.raises(DataError, match="does not exist"):
            m.add_input("/nonexistent/input")


class TestDatasetIO:
    def test_round_trip(self, dataset):
        frames, calib = read_dataset(dataset, load_config(None), with_labels=True)
        assert [fc.frame_id for fc, _ in frames] == [
            f"{i:06d}" for i in range(5)
        ]
        assert all(fc.n > 0 and len(gts) > 0 for fc, gts in frames)
        assert calib.image_width == 1242

    def test_reread_is_identical(self, dataset):
        cfg = load_config(None)
        a, _ = read_dataset(dataset, cfg, with_labels=False)
        b, _ = read_dataset(dataset, cfg, with_labels=False)
        for fa, fb in zip(a, b):
            assert np.array_equal(fa.boxes3d, fb.boxes3d)
            assert np.array_equal(fa.scores3d, fb.scores3d)
            assert np.array_equal(fa.boxes2d, fb.boxes2d)

    def test_missing_2d_file_means_no_2d(self, dataset, tmp_path):
        ds = tmp_path / "ds"
        shutil.copytree(dataset, ds)
        (ds / "frames" / "000001_2d.txt").unlink()
        calib = read_calibration(ds, load_config(None))
        fc = read_frame(ds, "000001", calib, "log")
        assert fc.boxes2d.shape == (0, 4)
        assert fc.n > 0

    def test_parse_error_names_file(self, dataset, tmp_path):
        ds = tmp_path / "ds"
        shutil.copytree(dataset, ds)
        bad = ds / "frames" / "000002_3d.txt"
        bad.write_text("not a detection line\n")
        calib = read_calibration(ds, load_config(None))
        with pytest.raises(ParseError, match="000002_3d.txt"):
            read_frame(ds, "000002", calib, "log")

    def test_missing_labels_are_listed(self, dataset, tmp_path):
        ds = tmp_path / "ds"
        shutil.copytree(dataset, ds)
        (ds / "labels" / "000003.txt").unlink()
        with pytest.raises(DataError, match="000003"):
            read_dataset(ds, load_config(None), with_labels=True)


class TestSynth:
    def test_bitwise_deterministic(self, small_cfg, dataset, tmp_path):
        doc = cmd_synth(small_cfg, tmp_path / "again")
        first = json.loads((dataset / "manifest.json").read_text())
        assert doc["outputs"] == first["outputs"]

    def test_jobs_do_not_change_output(self, small_cfg, dataset, tmp_path):
        doc = cmd_synth(small_cfg, tmp_path / "par", jobs=2)
        first = json.loads((dataset / "manifest.json").read_text())
        assert doc["outputs"] == first["outputs"]


class TestTrain:
    def test_epochs_zero_keeps_initialization(self, dataset, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text('{"train": {"epochs": 0}}')
        ckpt = tmp_path / "run" / "checkpoint.json"
        cmd_train(dataset, cfg_path, ckpt)
        params, seed = load_checkpoint(ckpt)
        reference = init_params(0)
        for (name, w, b), (_, w0, b0) in zip(
            params.layers(), reference.layers()
        ):
            assert np.array_equal(w, w0), name
            assert np.array_equal(b, b0), name
        assert (tmp_path / "run" / "loss.csv").read_text() == "epoch,mean_loss,lr\n"

    def test_manifest_stages_and_outputs(self, checkpoint):
        doc = json.loads((checkpoint.parent / "manifest.json").read_text())
        assert doc["command"] == "train"
        assert set(doc["timings_s"]) == {"read", "encode", "train", "write"}
        assert set(doc["outputs"]) == {"checkpoint.json", "loss.csv"}


class TestFuse:
    def test_baseline_only_suppresses(self, dataset, tmp_path):
        doc = cmd_fuse(dataset, None, tmp_path / "base")
        assert "frame_times_ms" not in doc
        cfg = load_config(None)
        calib = read_calibration(dataset, cfg)
        source = read_frame(dataset, "000000", calib, "log")
        out = read_frame(tmp_path / "base", "000000", calib, "log")
        assert out.n <= source.n
        assert set(np.round(out.scores3d, 6)) <= set(np.round(source.scores3d, 6))

    def test_fused_scores_differ_and_times_recorded(
        self, dataset, checkpoint, tmp_path
    ):
        doc = cmd_fuse(dataset, checkpoint, tmp_path / "fused")
        assert sorted(doc["frame_times_ms"]) == [f"{i:06d}" for i in range(5)]
        assert all(t >= 0.0 for t in doc["frame_times_ms"].values())
        assert str(checkpoint) in doc["inputs"]
        cfg = load_config(None)
        calib = read_calibration(dataset, cfg)
        source = read_frame(dataset, "000000", calib, "log")
        out = read_frame(tmp_path / "fused", "000000", calib, "log")
        # Fused candidates carry probabilities, not raw detector logits.
        assert not set(np.round(out.scores3d, 6)) <= set(
            np.round(source.scores3d, 6)
        )

    def test_deterministic(self, dataset, checkpoint, tmp_path):
        a = cmd_fuse(dataset, checkpoint, tmp_path / "a")
        b = cmd_fuse(dataset, checkpoint, tmp_path / "b")
        assert a["outputs"] == b["outputs"]


class TestEval:
    def test_report_and_pr_points(self, dataset, checkpoint, tmp_path):
        fused = tmp_path / "fused"
        cmd_fuse(dataset, checkpoint, fused)
        doc = cmd_eval(fused, dataset, None, tmp_path / "report.csv")
        header, rows = read_report(tmp_path / "report.csv")
        assert header == "metric,difficulty,distance_bin,ap,n_gt"
        cells = {(r[0], r[1], r[2]) for r in rows}
        assert ("3d", "moderate", "all") in cells
        assert ("bev", "moderate", "all") in cells
        # Distance bins appear for the 3D metrics (empty bins are absent).
        assert any(r[0] == "3d" and "-" in r[2] for r in rows)
        assert all(0.0 <= float(r[3]) <= 1.0 for r in rows)
        assert (tmp_path / "report_pr.csv").exists()
        assert set(doc["outputs"]) == {"report.csv", "report_pr.csv"}

    def test_empty_det_dir_scores_zero_with_warning(
        self, dataset, tmp_path, caplog
    ):
        dets = tmp_path / "dets"
        (dets / "frames").mkdir(parents=True)
        with caplog.at_level(logging.WARNING):
            cmd_eval(dets, dataset, None, tmp_path / "report.csv")
        assert any("no detection files" in r.message for r in caplog.records)
        _, rows = read_report(tmp_path / "report.csv")
        assert all(float(r[3]) == 0.0 for r in rows)

    def test_det_frame_without_ground_truth(self, dataset, tmp_path):
        dets = tmp_path / "dets"
        shutil.copytree(dataset, dets)
        frame = dets / "frames" / "000000_3d.txt"
        (dets / "frames" / "000099_3d.txt").write_text(frame.read_text())
        with pytest.raises(DataError, match="000099"):
            cmd_eval(dets, dataset, None, tmp_path / "report.csv")


@pytest.fixture(scope="module")
def table(dataset, small_cfg, tmp_path_factory):
    path = tmp_path_factory.mktemp("abl") / "ablation.csv"
    cmd_ablate(dataset, small_cfg, path)
    return read_report(path)


class TestAblate:
    def test_rows_and_order(self, table):
        header, rows = table
        assert header == (
            "row,iou,s2d,s3d,d_norm,focal,ap_3d_moderate,ap_bev_moderate"
        )
        assert [r[0] for r in rows] == [name for name, _, _ in ABLATION_ROWS]
        assert rows[0][1:6] == ["0", "0", "0", "0", "0"]
        assert rows[-1][1:6] == ["1", "1", "1", "1", "1"]
        assert all(0.0 <= float(r[6]) <= 1.0 for r in rows)

    def test_full_row_matches_separate_pipeline(
        self, table, dataset, small_cfg, checkpoint, tmp_path
    ):
        fused = tmp_path / "fused"
        cmd_fuse(dataset, checkpoint, fused, config_path=small_cfg)
        cmd_eval(fused, dataset, small_cfg, tmp_path / "report.csv")
        _, rows = read_report(tmp_path / "report.csv")
        ap = next(
            float(r[3]) for r in rows if (r[0], r[1], r[2]) == ("3d", "moderate", "all")
        )
        _, table_rows = table
        full = next(float(r[6]) for r in table_rows if r[0] == "full")
        # The ablation's full row uses the reference float64 forward; the
        # fuse command may use the float32 kernels.  Rank flips between
        # near-tied scores can move AP by a hair, never more.
        assert full == pytest.approx(ap, abs=1e-3)


class TestProject:
    def test_text_matches_candidates(self, dataset):
        text = cmd_project(dataset, "000001")
        lines = text.strip().split("\n")
        assert lines[0] == "j,class,x1,y1,x2,y2,valid"
        cfg = load_config(None)
        calib = read_calibration(dataset, cfg)
        fc = read_frame(dataset, "000001", calib, "log")
        assert len(lines) == fc.n + 1
        assert lines[1].split(",")[1] == "Car"

    def test_out_path_writes_file_and_manifest(self, dataset, tmp_path):
        out = tmp_path / "proj" / "hulls.csv"
        text = cmd_project(dataset, "000001", out_path=out)
        assert out.read_text() == text
        doc = json.loads((tmp_path / "proj" / "manifest.json").read_text())
        assert doc["command"] == "project"
        assert "hulls.csv" in doc["outputs"]

    def test_unknown_frame(self, dataset):
        with pytest.raises(DataError, match="000440"):
            cmd_project(dataset, "000440")


class TestMainExitCodes:
    def test_success_is_zero(self, dataset, capsys):
        assert main(["project", str(dataset), "000000"]) == 0
        assert capsys.readouterr().out.startswith("j,class,")

    def test_no_command(self, capsys):
        assert main([]) == 1
        assert "usage error" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert main(["synth", "--bogus"]) == 1

    def test_missing_out(self, capsys):
        assert main(["synth"]) == 1
        assert "--out" in capsys.readouterr().err

    def test_jobs_must_be_positive(self, tmp_path, capsys):
        code = main(["synth", "--jobs", "0", "--out", str(tmp_path / "o")])
        assert code == 1

    def test_bad_config_names_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"train": {"epoch": 2}}')
        code = main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "train.epoch" in capsys.readouterr().err

    def test_missing_data_is_data_error(self, tmp_path, capsys):
        code = main(["train", "/nonexistent", "--out", str(tmp_path / "o")])
        assert code == 2
        assert "data error" in capsys.readouterr().err

    def test_fuse_needs_checkpoint_xor_baseline(self, dataset, tmp_path, capsys):
        out = str(tmp_path / "o")
        assert main(["fuse", str(dataset), "--out", out]) == 1
        assert main(
            ["fuse", str(dataset), "ck.json", "--baseline", "--out", out]
        ) == 1

    def test_corrupt_frame_is_data_error(self, dataset, tmp_path, capsys):
        ds = tmp_path / "ds"
        shutil.copytree(dataset, ds)
        (ds / "frames" / "000000_3d.txt").write_text("garbage\n")
        code = main(["fuse", str(ds), "--baseline", "--out", str(tmp_path / "o")])
        assert code == 2
        assert "000000_3d.txt" in capsys.readouterr().err
