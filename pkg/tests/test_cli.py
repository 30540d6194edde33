import json
import shutil
import subprocess

import numpy as np
import pytest

from pansharp.cli import main
from pansharp.raster import load_raster, upsample_poly23

SHIFTS = [[0.0, 0.0], [1.0, -0.5], [-1.0, 0.0], [0.5, 1.5]]


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    shifts = ";".join(f"{dx},{dy}" for dx, dy in SHIFTS)
    assert main(["synth", "--out", str(d), "--size", "256", "--seed", "4", "--shifts", shifts]) == 0
    return d


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    d = tmp_path_factory.mktemp("small")
    assert main(["synth", "--out", str(d), "--size", "64", "--seed", "9", "--shifts", "0,0;0.5,0;0,0;0,-1"]) == 0
    return d


def _pair(d):
    return ["--pan", str(d / "pan.json"), "--ms", str(d / "ms.json")]


def test_synth_outputs(scene):
    for name in ("pan.json", "pan.bin", "ms.json", "ms.bin", "gt.json", "sensor.json", "manifest.json"):
        assert (scene / name).exists()
    manifest = json.loads((scene / "manifest.json").read_text())
    assert manifest["band_shifts"] == SHIFTS
    assert load_raster(scene / "gt.json").values.shape == (4, 256, 256)


def test_align_matches_manifest(scene, tmp_path):
    assert main(["align", *_pair(scene), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "alignment.json").read_text())
    manifest = json.loads((scene / "manifest.json").read_text())
    assert [b["shift"] for b in report["bands"]] == manifest["band_shifts"]
    assert (tmp_path / "alignment.png").stat().st_size > 0
    assert (tmp_path / "config.ini").exists()


def test_zero_trunk_without_adaptation_is_exp(small, tmp_path):
    assert main(["init", "--bands", "4", "--out", str(tmp_path / "w"), "--zero-trunk"]) == 0
    out = tmp_path / "run"
    assert main(["pansharpen", *_pair(small), "--weights", str(tmp_path / "w.json"), "--adapt", "0",
                 "--out", str(out)]) == 0
    fused = load_raster(out / "fused.json").values
    exp = upsample_poly23(load_raster(small / "ms.json").values, 4)
    assert np.array_equal(fused, exp.astype(np.float32))
    report = json.loads((out / "report.json").read_text())
    assert {"d_lambda_align", "r_ergas", "d_lambda", "d_rho"} <= set(report)


def _metrics(scene, fused, tmp_path, *extra):
    out = tmp_path / "report.json"
    code = main(["metrics", *_pair(scene), "--fused", str(fused), "--out", str(out), *extra])
    return code, (json.loads(out.read_text()) if code == 0 else None)


def test_metrics_exp_and_ground_truth(scene, tmp_path):
    from pansharp.raster import MultispectralRaster, save_raster

    ms = load_raster(scene / "ms.json")
    save_raster(tmp_path / "exp", MultispectralRaster(upsample_poly23(ms.values, 4), ms.radiometric_range))
    code, exp = _metrics(scene, tmp_path / "exp.json", tmp_path)
    assert code == 0
    # interpolation keeps the spectra but none of the PAN detail
    assert exp["d_rho"] > 0.3 and exp["d_lambda_align"] < 0.1
    code, gt = _metrics(scene, scene / "gt.json", tmp_path)
    assert code == 0
    assert gt["d_lambda_align"] < 1e-6 and gt["r_ergas"] < 1e-3
    assert gt["d_rho"] < exp["d_rho"]
    code, plain = _metrics(scene, scene / "gt.json", tmp_path, "--no-align")
    assert code == 0 and plain["d_lambda"] == pytest.approx(gt["d_lambda"])
    assert all(b["shift"] == [0.0, 0.0] for b in plain["per_band"])


def test_input_errors_exit_two(small, tmp_path, capsys):
    missing = tmp_path / "nowhere.json"
    assert main(["pansharpen", *_pair(small), "--weights", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err
    assert main(["metrics", *_pair(small), "--fused", str(small / "ms.json")]) == 2
    assert main(["init", "--bands", "3", "--out", str(tmp_path / "w3")]) == 0
    assert main(["pansharpen", *_pair(small), "--weights", str(tmp_path / "w3.json"),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["align", "--pan", str(small / "pan.json"), "--ms", str(tmp_path / "no.json"),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["align", *_pair(small), "--out", str(tmp_path / "o"), "--bogus.key=1"]) == 2
    assert main(["align", *_pair(small), "--out", str(tmp_path / "o"), "--model.nonsense=1"]) == 2


def test_overrides_are_echoed(small, tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[model]\nwidth = 12\n[adaptation]\nlr = 0.002\n")
    out = tmp_path / "o"
    assert main(["adapt", *_pair(small), "--config", str(ini), "--iterations", "1", "--model.width=8",
                 "--threads", "1", "--no-figures", "--out", str(out)]) == 0
    echoed = (out / "config.ini").read_text()
    assert "width = 8" in echoed and "lr = 0.002" in echoed
    assert json.loads((out / "weights.json").read_text())["width"] == 8


def _snapshot(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.mark.parametrize("command", [
    ["adapt", "--iterations", "3", "--model.width=8", "--adaptation.lr=0.001"],
    ["align"],
    ["select-tiles", "--adaptation.tile_size=16", "--adaptation.n_clusters=4"],
])
def test_commands_are_reproducible(small, tmp_path, command):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main([command[0], *_pair(small), *command[1:], "--threads", "1", "--out", str(out)]) == 0
        outs.append(_snapshot(out))
    assert outs[0].keys() == outs[1].keys() and len(outs[0]) > 1
    assert outs[0] == outs[1]


def test_adapt_then_pansharpen(small, tmp_path):
    assert main(["init", "--bands", "4", "--out", str(tmp_path / "w"), "--model.width=8"]) == 0
    out = tmp_path / "run"
    assert main(["pansharpen", *_pair(small), "--weights", str(tmp_path / "w.json"), "--adapt", "2",
                 "--full-ta", "--threads", "1", "--out", str(out)]) == 0
    lines = (out / "log.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["wall_ms"] is None
    assert (out / "trajectory.png").exists() and (out / "weights.json").exists()


def test_gradcheck_passes():
    assert main(["gradcheck"]) == 0


@pytest.mark.skipif(shutil.which("pansharp") is None, reason="console script not installed")
def test_console_script(tmp_path):
    proc = subprocess.run(["pansharp", "init", "--bands", "2", "--out", str(tmp_path / "w")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["parameters"] > 0
