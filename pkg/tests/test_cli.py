"""Command-line surface tests: argument handling, per-subcommand artifacts,
the synth -> labels -> train -> infer -> eval pipeline, and the occlusion
wedge in the classical baseline's render."""

import os
import subprocess
import sys

import numpy as np
import pytest

from dogm import dataio as dio
from dogm import scene
from dogm.bev import encode_core
from dogm.cli import main, read_scene_config
from dogm.grid import GridSpec, Pose
from dogm.ism import FREE, OCCUPIED, UNKNOWN
from dogm.labels import rasterize_polygon

SCENE_CFG = """\
frames = 8
walls = 2
arena_half_extent = 1.8
vehicles.count = 1
vehicles.static_count = 0
vehicles.speed_min = 0.9
vehicles.speed_max = 1.6
pedestrians.count = 1
pedestrians.static_count = 1
sensor.rings = 24
sensor.elevation_min_deg = -30.0
sensor.elevation_max_deg = 10.0
grid.length_cells = 26
grid.width_cells = 26
grid.cell_length = 0.15
grid.cell_width = 0.15
grid.height_min = -0.2
grid.height_max = 0.7
grid.cell_height = 0.2
"""

TRAIN_CFG = """\
n_in = 3
supervised_steps = 2
base_lr = 0.0005
decay_interval = 1000
max_iterations = 10
dropout = 0.1
rotation_augmentation = false
seed = 2
checkpoint_interval = 100
"""

MODEL_CFG = """\
length_cells = 26
width_cells = 26
input_channels = 7
channels = 2 3 4 128
kernel_size = 3
n_in = 3
dropout = 0.1
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scene.cfg").write_text(SCENE_CFG)
    (root / "train.cfg").write_text(TRAIN_CFG)
    (root / "model.cfg").write_text(MODEL_CFG)
    return root


@pytest.fixture(scope="module")
def pipeline(workdir):
    """Artifacts of one full CLI run: synth -> labels -> train -> infer -> eval."""
    seq = str(workdir / "seq")
    run = str(workdir / "run")
    codes = {
        "synth": main(["synth", "--config", str(workdir / "scene.cfg"), "--seed", "4", "--out", seq]),
        "labels": main(["labels", "--in", seq]),
        "train": main([
            "train", "--data", seq,
            "--model-config", str(workdir / "model.cfg"),
            "--train-config", str(workdir / "train.cfg"),
            "--iterations", "200", "--out", run,
        ]),
        "infer": main([
            "infer", "--checkpoint", os.path.join(run, "model.ckpt"),
            "--data", seq, "--out", str(workdir / "pred"),
        ]),
        "stream": main([
            "infer", "--checkpoint", os.path.join(run, "model.ckpt"),
            "--data", seq, "--stream", "--out", str(workdir / "pred_stream"),
        ]),
        "eval": main(["eval", "--pred", str(workdir / "pred"), "--data", seq]),
    }
    return workdir, codes


class TestUsage:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["transmogrify"])
        assert exc.value.code == 2

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--out", "x", "--frobnicate"])
        assert exc.value.code == 2

    def test_missing_required_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth"])
        assert exc.value.code == 2

    def test_missing_path_exits_1(self, tmp_path, capsys):
        assert main(["ism", "--in", str(tmp_path / "nowhere")]) == 1
        assert "manifest" in capsys.readouterr().err

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "dogm", "eval", "--pred", str(tmp_path), "--data", str(tmp_path)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 1
        assert "dogm eval:" in proc.stderr


class TestSceneConfig:
    def test_defaults_without_file(self):
        scene_cfg, sensor, spec, resolution = read_scene_config(None)
        assert scene_cfg == scene.SceneConfig()
        assert sensor == scene.DESK_SENSOR
        assert spec.length_cells == 80
        assert resolution == pytest.approx(0.15)

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("framez = 9\n")
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 1
        assert "framez" in capsys.readouterr().err

    def test_type_mismatch_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("frames = many\n")
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 1
        assert "frames" in capsys.readouterr().err


class TestSynth:
    def test_deterministic_for_seed(self, workdir, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        cfg = str(workdir / "scene.cfg")
        assert main(["synth", "--config", cfg, "--seed", "11", "--out", a]) == 0
        assert main(["synth", "--config", cfg, "--seed", "11", "--out", b]) == 0
        for name in ("manifest.txt", "poses.txt", "frame_000003.pts", "boxes_000003.txt"):
            with open(os.path.join(a, name), "rb") as fa, open(os.path.join(b, name), "rb") as fb:
                assert fa.read() == fb.read(), name

    def test_frames_flag_overrides_config(self, workdir, tmp_path):
        out = str(tmp_path / "short")
        code = main(["synth", "--config", str(workdir / "scene.cfg"), "--frames", "3", "--out", out])
        assert code == 0
        assert os.path.exists(os.path.join(out, "frame_000002.pts"))
        assert not os.path.exists(os.path.join(out, "frame_000003.pts"))


class TestEncode:
    def test_cached_cells_match_encoder(self, pipeline):
        workdir, codes = pipeline
        seq_dir = str(workdir / "seq")
        assert main(["encode", "--in", seq_dir]) == 0
        seq = dio.read_sequence(seq_dir)
        cached = dio.read_tensor_bundle(os.path.join(seq_dir, "bev", "bev_000002.bin"))
        direct = encode_core(seq.bundles[2].cloud.xyz, seq.bundles[2].pose, seq.spec)
        np.testing.assert_array_equal(cached["cells"], direct)


def occluder_sequence():
    """Closed square arena with one tall wall segment in front of the sensor."""
    spec = GridSpec(26, 26, 0.15, 0.15, height_min=-0.2, height_max=0.7, cell_height=0.2)
    h = 1.725
    walls = [
        scene.Wall(-h, -h, h, -h, 2.5),
        scene.Wall(h, -h, h, h, 2.5),
        scene.Wall(h, h, -h, h, 2.5),
        scene.Wall(-h, h, -h, -h, 2.5),
        scene.Wall(0.9375, -0.6, 0.9375, 0.6, 2.5),  # the occluder
    ]
    polygon = np.array([(-h, -h), (h, -h), (h, h), (-h, h)])
    seq = scene.SceneSequence(1, 0.1, [Pose(0.0, 0.0, 0.0, 0.0)], [], walls, polygon)
    return seq, spec


@pytest.fixture(scope="module")
def ism_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("wedge")
    seq, spec = occluder_sequence()
    clouds = scene.simulate_sequence(seq, scene.DESK_SENSOR)
    raster = rasterize_polygon(seq.driveable_polygon, 0.15)
    dio.write_sequence(seq, clouds, raster, spec, str(root))
    assert main(["ism", "--in", str(root)]) == 0
    return str(root)


class TestIsmWedge:
    @staticmethod
    def cell(x, y):
        return int(np.floor(x / 0.15)) + 13, int(np.floor(y / 0.15)) + 13

    def test_unknown_wedge_behind_occluder(self, ism_dir):
        states = dio.read_tensor_bundle(os.path.join(ism_dir, "ism", "ism_000000.bin"))["states"]
        assert states[self.cell(0.5, 0.0)] == FREE  # in front of the occluder
        assert states[self.cell(0.9375, 0.0)] == OCCUPIED  # the occluder itself
        assert states[self.cell(1.4, 0.0)] == UNKNOWN  # shadowed corridor
        assert states[self.cell(0.0, 1.4)] == FREE  # unblocked side corridor
        assert states[self.cell(0.0, 1.725)] == OCCUPIED  # arena wall

    def test_render_written(self, ism_dir):
        with open(os.path.join(ism_dir, "ism", "ism_000000.pgm"), "rb") as fh:
            blob = fh.read()
        assert blob.startswith(b"P5")
        # all three evidence levels appear in the image
        assert len(set(blob[-26 * 26:])) >= 3


class TestPipeline:
    def test_all_stages_exit_zero(self, pipeline):
        _, codes = pipeline
        assert codes == {name: 0 for name in codes}

    def test_train_artifacts(self, pipeline):
        workdir, _ = pipeline
        run = workdir / "run"
        assert (run / "checkpoint_000200.npz").exists()
        assert (run / "model.ckpt").exists()
        assert (run / "model.cfg").exists()
        assert (run / "train.cfg").exists()
        rows = (run / "train_log.csv").read_text().strip().splitlines()
        assert len(rows) == 201  # header + one row per iteration
        assert rows[0].startswith("iteration,occ,")

    def test_infer_artifacts(self, pipeline):
        workdir, _ = pipeline
        pred = workdir / "pred"
        outputs = sorted(p.name for p in pred.glob("output_*.bin"))
        assert len(outputs) == 8
        rows = (pred / "latency.csv").read_text().strip().splitlines()
        assert rows[0] == "frame,seconds"
        assert len(rows) == 9
        tensors = dio.read_tensor_bundle(str(pred / "output_000000.bin"))
        assert set(tensors) == {"occ", "road", "gc", "v", "dyn", "cls"}
        assert tensors["occ"].shape == (26, 26)

    def test_stream_equals_batch(self, pipeline):
        workdir, _ = pipeline
        for k in range(8):
            batch = dio.read_tensor_bundle(str(workdir / "pred" / f"output_{k:06d}.bin"))
            stream = dio.read_tensor_bundle(str(workdir / "pred_stream" / f"output_{k:06d}.bin"))
            for name in batch:
                err = np.abs(batch[name].astype(np.float64) - stream[name].astype(np.float64))
                assert err.max() <= 1e-5, (k, name)

    def test_eval_writes_report(self, pipeline, capsys):
        workdir, _ = pipeline
        assert (workdir / "pred" / "metrics.csv").exists()
        # re-run eval to capture its stdout in this test
        assert main(["eval", "--pred", str(workdir / "pred"), "--data", str(workdir / "seq")]) == 0
        out = capsys.readouterr().out
        assert "EPE (occupied cells)" in out
        assert "mIoU" in out

    def test_trainer_bundle_also_infers(self, pipeline, tmp_path):
        workdir, _ = pipeline
        code = main([
            "infer", "--checkpoint", str(workdir / "run" / "checkpoint_000200.npz"),
            "--model-config", str(workdir / "run" / "model.cfg"),
            "--data", str(workdir / "seq"), "--out", str(tmp_path / "pred64"),
        ])
        assert code == 0
        t64 = dio.read_tensor_bundle(str(tmp_path / "pred64" / "output_000003.bin"))
        t32 = dio.read_tensor_bundle(str(workdir / "pred" / "output_000003.bin"))
        assert np.abs(t64["occ"] - t32["occ"]).max() < 1e-4  # float32 rounding only

    def test_infer_needs_model_config(self, pipeline, tmp_path, capsys):
        workdir, _ = pipeline
        orphan = tmp_path / "model.ckpt"
        orphan.write_bytes((workdir / "run" / "model.ckpt").read_bytes())
        code = main(["infer", "--checkpoint", str(orphan), "--data", str(workdir / "seq")])
        assert code == 1
        assert "model config" in capsys.readouterr().err

    def test_infer_rejects_wrong_model_config(self, pipeline, tmp_path, capsys):
        workdir, _ = pipeline
        from dogm.model import ModelConfig, write_model_config

        write_model_config(ModelConfig(), str(tmp_path / "model.cfg"))
        code = main([
            "infer", "--checkpoint", str(workdir / "run" / "model.ckpt"),
            "--model-config", str(tmp_path / "model.cfg"),
            "--data", str(workdir / "seq"),
        ])
        assert code == 1
        assert "has shape" in capsys.readouterr().err

    def test_infer_rejects_grid_mismatch(self, pipeline, tmp_path, capsys):
        workdir, _ = pipeline
        big = str(tmp_path / "big_seq")
        assert main(["synth", "--frames", "2", "--out", big]) == 0  # default 80x80 grid
        code = main([
            "infer", "--checkpoint", str(workdir / "run" / "model.ckpt"),
            "--data", big,
        ])
        assert code == 1
        assert "does not match" in capsys.readouterr().err


class TestRender:
    def test_prediction_layers(self, pipeline, tmp_path):
        workdir, _ = pipeline
        out = str(tmp_path / "imgs")
        for layer, ext in [
            ("occupancy", "pgm"), ("velocity", "ppm"),
            ("semantics", "ppm"), ("driveable", "ppm"),
        ]:
            assert main(["render", "--in", str(workdir / "pred"), "--layer", layer, "--out", out]) == 0
            assert os.path.exists(os.path.join(out, f"pred_{layer}_000007.{ext}"))

    def test_single_frame_from_labels(self, pipeline, tmp_path):
        workdir, _ = pipeline
        out = str(tmp_path / "one")
        code = main([
            "render", "--in", str(workdir / "seq"), "--kind", "labels",
            "--layer", "occupancy", "--frame", "2", "--out", out,
        ])
        assert code == 0
        assert os.listdir(out) == ["labels_occupancy_000002.pgm"]

    def test_missing_frame_exits_1(self, pipeline, tmp_path, capsys):
        workdir, _ = pipeline
        code = main([
            "render", "--in", str(workdir / "pred"), "--layer", "occupancy",
            "--frame", "99", "--out", str(tmp_path / "x"),
        ])
        assert code == 1
        assert "missing" in capsys.readouterr().err

    def test_empty_directory_exits_1(self, tmp_path, capsys):
        assert main(["render", "--in", str(tmp_path), "--layer", "occupancy"]) == 1
        assert "renderable" in capsys.readouterr().err


class TestEvalErrors:
    def test_no_predictions_exits_1(self, pipeline, tmp_path, capsys):
        workdir, _ = pipeline
        code = main(["eval", "--pred", str(tmp_path), "--data", str(workdir / "seq")])
        assert code == 1
        assert "predictions" in capsys.readouterr().err
