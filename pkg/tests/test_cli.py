import json

import numpy as np
import pytest

from ramp_odo.cli import main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.txt").write_text("n_frames=10\nn_points=200\nseed=3\n")
    assert main(["synth", "--spec", str(root / "spec.txt"), "--out", str(root / "ds")]) == 0
    (root / "cfg.txt").write_text("correction_mode=oracle\nscale=0.005\n")
    return root


def test_synth_layout(dataset):
    ds = dataset / "ds"
    for name in ("frames", "events.evt", "gt.tum", "tracks.csv", "calib.txt"):
        assert (ds / name).exists()


def test_synth_seed_changes_events(dataset, tmp_path):
    spec = str(dataset / "spec.txt")
    assert main(["synth", "--spec", spec, "--out", str(tmp_path / "a"), "--seed", "11"]) == 0
    assert (tmp_path / "a" / "events.evt").read_bytes() != (dataset / "ds" / "events.evt").read_bytes()


def test_synth_bad_key_is_usage_error(tmp_path, capsys):
    (tmp_path / "bad.txt").write_text("n_frames=5\nwobble=2\n")
    assert main(["synth", "--spec", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "o")]) == 2
    assert "wobble" in capsys.readouterr().err


def test_run_writes_trajectory_and_ate(dataset, tmp_path, capsys):
    ds = dataset / "ds"
    args = ["run", "--frames", str(ds / "frames"), "--events", str(ds / "events.evt"),
            "--config", str(dataset / "cfg.txt"), "--gt", str(ds / "gt.tum")]
    assert main(args + ["--out", str(tmp_path / "a.tum")]) == 0
    out = capsys.readouterr().out
    assert "ATE_RMSE=" in out
    assert float(out.split("ATE_RMSE=")[1].split()[0]) < 1e-4
    assert len((tmp_path / "a.tum").read_text().splitlines()) == 10
    assert main(args + ["--out", str(tmp_path / "b.tum")]) == 0
    assert (tmp_path / "a.tum").read_bytes() == (tmp_path / "b.tum").read_bytes()


def test_eval_identical_files(dataset, capsys):
    gt = str(dataset / "ds" / "gt.tum")
    assert main(["eval", "--est", gt, "--gt", gt]) == 0
    assert "ATE_RMSE=0.000000000" in capsys.readouterr().out


def test_eval_length_mismatch(dataset, tmp_path, capsys):
    gt = dataset / "ds" / "gt.tum"
    lines = gt.read_text().splitlines()
    (tmp_path / "short.tum").write_text("\n".join(lines[:-2]) + "\n")
    assert main(["eval", "--est", str(tmp_path / "short.tum"), "--gt", str(gt)]) == 1
    err = capsys.readouterr().err
    assert "8" in err and "10" in err


def test_eval_manifest_report(dataset, tmp_path, capsys):
    gt = str(dataset / "ds" / "gt.tum")
    (tmp_path / "m.txt").write_text(f"a {gt} {gt}\nb {gt} {gt}\n")
    assert main(["eval", "--manifest", str(tmp_path / "m.txt"), "--n-grid", "10",
                 "--report-csv", str(tmp_path / "r.csv"), "--report-json", str(tmp_path / "r.json")]) == 0
    assert "AUC=1.000000000" in capsys.readouterr().out
    assert json.loads((tmp_path / "r.json").read_text())["sequences"] == 2


def test_malformed_input_exit_code(tmp_path, capsys):
    (tmp_path / "x.tum").write_text("1 2 3\n")
    assert main(["eval", "--est", str(tmp_path / "x.tum"), "--gt", str(tmp_path / "x.tum")]) == 1
    assert "byte offset 0" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 2


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 7


def test_bench_encoder_json(capsys):
    assert main(["bench-encoder", "--width", "64", "--height", "48", "--samples", "3", "--workers", "2",
                 "--heads", "m"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["workers"] == 2 and rep["speedup_vs_reference"] > 0
    assert set(rep["stages_ms"]) >= {"sensor_encode", "intra_sensor_fuse", "inter_sensor_fuse"}


def test_seed_from_environment(monkeypatch, dataset, tmp_path):
    monkeypatch.setenv("RAMP_ODO_SEED", "11")
    assert main(["synth", "--spec", str(dataset / "spec.txt"), "--out", str(tmp_path / "e")]) == 0
    monkeypatch.setenv("RAMP_ODO_SEED", "x")
    assert main(["synth", "--spec", str(dataset / "spec.txt"), "--out", str(tmp_path / "f")]) == 2
