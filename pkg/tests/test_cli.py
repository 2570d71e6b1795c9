import json
import shutil

import pytest

from heleshaw import cli
from heleshaw.scenarios import load_preset

SMALL = {
    "solver": "limit",
    "geometry": {"kind": "radial", "n": 2, "inner": 1.0, "outer": 3.0},
    "n_cells": 100,
    "lambda": {"stages": [[0.0, 0.0]]},
    "initial": {"front": 1.5},
    "t_end": 0.2,
    "output_times": {"every": 0.1},
}


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_run_and_verify(tmp_path, small_cfg, capsys):
    out = tmp_path / "run"
    assert cli.main(["run", "--config", str(small_cfg), "--out", str(out), "--strict"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["diagnostics"]["ok"]
    assert (out / "plot.gp").exists() and (out / "frames" / "frame_0002.csv").exists()
    assert cli.main(["verify", "--out", str(out), "--strict"]) == 0
    assert "match stored report" in capsys.readouterr().out


def test_manifest_rerun_is_bit_identical(tmp_path, small_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "--config", str(small_cfg), "--out", str(a)]) == 0
    assert cli.main(["run", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
    for f in sorted(a.rglob("*.csv")) + [a / "diagnostics.json"]:
        assert f.read_bytes() == (b / f.relative_to(a)).read_bytes(), f
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    ma.pop("wall_time"), mb.pop("wall_time")
    assert ma == mb


@pytest.mark.parametrize("argv", [
    ["run", "--preset", "no-such", "--out", "x"],
    ["run", "--config", "/nonexistent.json", "--out", "x"],
    ["sweep-m", "--preset", "figure1", "--m", "0.5,2", "--out", "x"],
    ["sweep-m", "--preset", "figure1", "--m", "ten", "--out", "x"],
    ["run", "--out", "x"],
    ["bogus"],
])
def test_config_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == 2


def test_invalid_config_exit_2(tmp_path):
    bad = dict(SMALL, n_cells=2)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert cli.main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


def test_corrupt_output_exit_3(tmp_path, small_cfg):
    out = tmp_path / "run"
    cli.main(["run", "--config", str(small_cfg), "--out", str(out)])
    (out / "frames" / "frame_0001.csv").write_text("x,rho,p\n1,abc,0\n")
    assert cli.main(["verify", "--out", str(out)]) == 3
    (out / "manifest.json").write_text("not json")
    assert cli.main(["verify", "--out", str(out)]) == 3


def test_diagnostic_failure_exit_4_only_when_strict(tmp_path, small_cfg):
    out = tmp_path / "run"
    cli.main(["run", "--config", str(small_cfg), "--out", str(out)])
    path = out / "frames" / "frame_0001.csv"
    lines = path.read_text().splitlines()
    cells = lines[1].split(",")
    cells[1] = "-0.5"                       # negative density at the first node
    lines[1] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n")
    assert cli.main(["verify", "--out", str(out)]) == 0
    assert cli.main(["verify", "--out", str(out), "--strict"]) == 4


def test_sweep_single_m_degenerates_to_run(tmp_path, small_cfg, capsys):
    out = tmp_path / "s"
    cfg = dict(SMALL, solver="pme", m=10)
    small_cfg.write_text(json.dumps(cfg))
    assert cli.main(["sweep-m", "--config", str(small_cfg), "--m", "10", "--out", str(out)]) == 0
    assert "single m" in capsys.readouterr().out
    assert (out / "manifest.json").exists()


def test_sweep_two_m(tmp_path, small_cfg, monkeypatch):
    monkeypatch.setenv("MESA_THREADS", "1")
    out = tmp_path / "s"
    small_cfg.write_text(json.dumps(dict(SMALL, solver="pme", m=10)))
    assert cli.main(["sweep-m", "--config", str(small_cfg), "--m", "10,20", "--out", str(out)]) == 0
    data = json.loads((out / "convergence.json").read_text())
    assert len(data["table"]) == 2 and (out / "limit" / "manifest.json").exists()


def test_bad_thread_env(tmp_path, small_cfg, monkeypatch):
    monkeypatch.setenv("MESA_THREADS", "many")
    small_cfg.write_text(json.dumps(dict(SMALL, solver="pme", m=10)))
    assert cli.main(["sweep-m", "--config", str(small_cfg), "--m", "10,20", "--out", str(tmp_path / "s")]) == 2


def test_oracle_compare_radial_preset(tmp_path, capsys):
    assert cli.main(["oracle-compare", "--preset", "radial-hs", "--out", str(tmp_path), "--strict"]) == 0
    res = json.loads((tmp_path / "oracle.json").read_text())
    assert res["ok"] and res["max_gap"] <= 2 * res["h"]


def test_radial_oracle_solver_run(tmp_path):
    cfg = load_preset("radial-hs")
    cfg["solver"] = "radial_oracle"
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 0
    assert cli.main(["verify", "--out", str(tmp_path / "o")]) == 0


def test_console_script_installed():
    assert shutil.which("heleshaw") is not None


def test_tumor_preset_runs_strict(tmp_path):
    cfg = dict(load_preset("tumor"), t_end=0.1, n_cells=120)
    path = tmp_path / "t.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "o"
    assert cli.main(["run", "--config", str(path), "--out", str(out), "--strict"]) == 0
    assert cli.main(["verify", "--out", str(out), "--strict"]) == 0
