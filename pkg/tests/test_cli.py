import json
import subprocess
import sys

import numpy as np
import pytest

from splidar.cli import main
from splidar.data import read_calibration, read_cube, read_ply
from splidar.simulate import SceneSpec, Surface, format_scene

SCENE = SceneSpec((Surface(depth=0.4, reflectivity=1.0),
                   Surface(kind="cap", depth=0.3, height=0.08, center=(0.12, 0.12),
                           radii=(0.08, 0.08))),
                  n_rows=12, n_cols=12, n_bins=60, pixel_pitch=0.02, bin_resolution=0.01,
                  irf_sigma=1.5, signal_ppp=10.0, sbr=4.0)


@pytest.fixture
def scene_file(tmp_path):
    path = tmp_path / "scene.cfg"
    path.write_text(format_scene(SCENE))
    return path


@pytest.fixture
def cube_file(tmp_path, scene_file):
    out = tmp_path / "cube.spcb"
    assert main(["simulate", str(scene_file), "-o", str(out), "--seed", "3"]) == 0
    return out


def test_simulate_writes_cube_and_sidecars(tmp_path, cube_file):
    cube = read_cube(cube_file)
    assert cube.shape == (12, 12, 60)
    sensor = read_calibration(tmp_path / "cube.cal", 12, 12, 60)
    assert sensor.pixel_pitch == 0.02
    truth = read_ply(tmp_path / "cube.truth.ply")
    csv = np.loadtxt(tmp_path / "cube.truth.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(csv[:, :3], truth.positions)
    info = json.loads((tmp_path / "cube.sim.json").read_text())
    assert info["seed"] == 3 and info["truth_points"] == len(truth)


def test_reconstruct_outputs(tmp_path, cube_file):
    out = tmp_path / "cloud.ply"
    rep = tmp_path / "report.json"
    code = main(["reconstruct", str(cube_file), "-o", str(out), "--report", str(rep),
                 "--background", str(tmp_path / "bg.csv"), "--figure", str(tmp_path / "d.png"),
                 "--set", "max_iters=3", "--set", "r_min=0.5"])
    assert code == 0
    assert len(read_ply(out)) > 0
    report = json.loads(rep.read_text())
    assert "timing" not in report
    assert report["config"]["max_iters"] == 3 and report["iterations"] <= 3
    assert np.loadtxt(tmp_path / "bg.csv", delimiter=",").shape == (12, 12)
    assert (tmp_path / "d.png").read_bytes()[:4] == b"\x89PNG"


def test_reconstruct_with_config_file_and_timing(tmp_path, cube_file):
    cfg = tmp_path / "recon.cfg"
    cfg.write_text("max_iters = 2\napss.kernel_radius = 0.1\n")
    rep = tmp_path / "r.json"
    assert main(["reconstruct", str(cube_file), "-c", str(cfg), "-o", str(tmp_path / "c.ply"),
                 "--report", str(rep), "--with-timing"]) == 0
    report = json.loads(rep.read_text())
    assert report["config"]["apss.kernel_radius"] == 0.1
    assert set(report["timing"]) == {"init", "depth", "intensity", "background"}


def test_baseline_and_eval(tmp_path, cube_file, capsys):
    base = tmp_path / "base.ply"
    assert main(["baseline", str(cube_file), "-o", str(base)]) == 0
    assert len(read_ply(base)) <= 144
    capsys.readouterr()
    assert main(["eval", str(base), str(tmp_path / "cube.truth.ply"), "--tau", "0.04"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert 0 <= res["recall"] <= 1 and res["tau"] == 0.04


def test_bench_writes_csv_with_fit_and_figure(tmp_path, cube_file):
    out = tmp_path / "bench.csv"
    assert main(["bench", str(cube_file), "--levels", "1,2", "--iterations", "1",
                 "--repeats", "1", "-o", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "axis,level,pixels,active_bins,seconds"
    assert len(lines) == 4 and lines[-1].startswith("# slope=")
    assert (tmp_path / "bench.png").exists()


def test_sweep_writes_csv_and_figure(tmp_path, scene_file):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", str(scene_file), "--ppp", "5", "--sbr", "1,4", "--seeds", "1",
                 "--set", "max_iters=2", "-o", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("photons_per_pixel,sbr,")
    assert len(lines) == 3
    assert (tmp_path / "sweep.png").exists()


def test_preset_files(tmp_path):
    scene, cfg = tmp_path / "m.cfg", tmp_path / "m.recon"
    assert main(["preset", "mannequin", "-o", str(scene), "-c", str(cfg)]) == 0
    assert "[surface]" in scene.read_text()
    assert "apss.kernel_radius = 0.2" in cfg.read_text()


def test_runs_are_bit_identical(tmp_path, scene_file):
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        assert main(["simulate", str(scene_file), "-o", str(d / "cube.spcb"), "--seed", "9"]) == 0
        assert main(["reconstruct", str(d / "cube.spcb"), "-o", str(d / "cloud.ply"),
                     "--report", str(d / "report.json"), "--set", "max_iters=3"]) == 0
        outputs.append([(d / f).read_bytes() for f in ("cube.spcb", "cloud.ply", "report.json")])
    assert outputs[0] == outputs[1]


# -- exit codes --------------------------------------------------------------


def test_argument_errors_exit_2(tmp_path, cube_file):
    with pytest.raises(SystemExit) as exc:
        main(["reconstruct"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["bench", str(cube_file), "--levels", "one,two"])
    assert exc.value.code == 2
    assert main(["reconstruct", str(tmp_path / "missing.spcb"), "-o", str(tmp_path / "x")]) == 2
    assert main(["reconstruct", str(cube_file), "-o", str(tmp_path / "x"),
                 "--set", "nonsense"]) == 2
    assert main(["reconstruct", str(cube_file), "-o", str(tmp_path / "x"),
                 "--set", "max_iters=0"]) == 2
    ply = tmp_path / "cube.truth.ply"
    assert main(["eval", str(ply), str(ply), "--tau", "0"]) == 2


def test_missing_calibration_exit_2(tmp_path, cube_file):
    (tmp_path / "cube.cal").unlink()
    assert main(["reconstruct", str(cube_file), "-o", str(tmp_path / "x.ply")]) == 2


def test_data_errors_exit_3(tmp_path, cube_file):
    bad = tmp_path / "bad.spcb"
    bad.write_bytes(b"not a cube at all")
    (tmp_path / "bad.cal").write_bytes((tmp_path / "cube.cal").read_bytes())
    assert main(["reconstruct", str(bad), "-o", str(tmp_path / "x.ply")]) == 3
    scene = tmp_path / "bad.cfg"
    scene.write_text("n_rows = 4\n[surface]\nreflectivity = -2\n")
    assert main(["simulate", str(scene), "-o", str(tmp_path / "y.spcb")]) == 3
    ply = tmp_path / "bad.ply"
    ply.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n")
    assert main(["eval", str(ply), str(ply)]) == 3
    cal = tmp_path / "cube.cal"
    cal.write_text("garbage without equals\n")
    assert main(["reconstruct", str(cube_file), "-o", str(tmp_path / "z.ply")]) == 3


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "splidar.cli", "--version"],
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "0.1.0"
