import json
import subprocess
import sys

import numpy as np
import pytest

from stereomotion.cli import (
    SWEEP_FIELDS,
    SweepConfig,
    cell_seed,
    main,
    read_sweep_csv,
    run_sequence,
    run_sweep,
)
from stereomotion.formats import read_trajectory, write_matches, write_rig
from stereomotion.geometry import Rigid3, StereoRig
from stereomotion.metrics import relative_error

from conftest import scene

SMALL = dict(n_matches_grid=[100], outlier_fraction_grid=[0.1], repetitions=2, methods=["rdcr"])


def test_sweep_counting(tmp_path):
    recs = run_sweep(SweepConfig(**SMALL), tmp_path, threads=1)
    assert len(recs) == 2
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert rows[0].split(",") == list(SWEEP_FIELDS) and len(rows) == 3
    assert len((tmp_path / "sweep_means.csv").read_text().splitlines()) == 2
    assert len((tmp_path / "sweep_timings.csv").read_text().splitlines()) == 3


def test_sweep_rows_parse_back(tmp_path):
    cfg = SweepConfig(**{**SMALL, "methods": ["rdcr", "cls", "ransac"], "ransac_models": 20})
    recs = run_sweep(cfg, tmp_path, threads=1)
    assert read_sweep_csv(tmp_path / "sweep.csv") == recs


def test_sweep_byte_identical_and_parallel(tmp_path):
    cfg = SweepConfig(n_matches_grid=[100, 200], outlier_fraction_grid=[0.1, 0.5], repetitions=2, methods=["rdcr", "apg"])
    run_sweep(cfg, tmp_path / "a", threads=1)
    run_sweep(cfg, tmp_path / "b", threads=1)
    run_sweep(cfg, tmp_path / "c", threads=2)
    for name in ("sweep.csv", "sweep_means.csv"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes() == (tmp_path / "c" / name).read_bytes()


def test_cell_seed():
    assert cell_seed(0, 100, 0.1, 0) != cell_seed(0, 100, 0.1, 1)
    assert cell_seed(5, 100, 0.1, 0) == 5 ^ cell_seed(0, 100, 0.1, 0)
    assert 0 <= cell_seed(2**64 - 1, 2000, 0.9, 49) < 2**64


def test_sweep_config_validation():
    with pytest.raises(ValueError):
        SweepConfig(n_matches_grid=[])
    with pytest.raises(ValueError):
        SweepConfig(repetitions=0)
    with pytest.raises(ValueError):
        SweepConfig(methods=["lasso"])
    with pytest.raises(ValueError):
        SweepConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        SweepConfig(outlier_fraction_grid=[1.5])


def _sequence(tmp_path, n_pairs=10, p=0.0, sigma_n=0.0):
    d = tmp_path / "pairs"
    d.mkdir()
    rig_file = tmp_path / "rig.txt"
    write_rig(rig_file, StereoRig.kitti())
    truth = Rigid3.identity()
    for k in range(n_pairs):
        sc = scene(300, p, sigma_n, seed=500 + k)
        write_matches(d / f"{k:04d}.txt", sc.corrupt)
        truth = truth @ sc.motion_true.inverse()
    return d, rig_file, truth


def test_sequence_chain(tmp_path):
    d, rig_file, truth = _sequence(tmp_path)
    out = tmp_path / "traj.txt"
    res = run_sequence(d, rig_file, "rdcr", out)
    assert len(res.poses) == 11 and not res.failures
    assert relative_error(res.poses[-1], truth) < 1e-4
    assert len(read_trajectory(out)) == 11


def test_sequence_empty_dir(tmp_path, caplog):
    (tmp_path / "pairs").mkdir()
    write_rig(tmp_path / "rig.txt", StereoRig.kitti())
    out = tmp_path / "t.txt"
    res = run_sequence(tmp_path / "pairs", tmp_path / "rig.txt", "rdcr", out)
    assert res.poses == [] and out.read_text() == ""
    assert "empty" in caplog.text


def test_sequence_fault_isolation(tmp_path, caplog):
    d, rig_file, _ = _sequence(tmp_path)
    (d / "0004.txt").write_text("1 2 3\n")
    res = run_sequence(d, rig_file, "rdcr", tmp_path / "t.txt")
    assert res.n_estimated == 9 and len(res.failures) == 1
    assert "0004.txt:1" in res.failures[0][1]
    assert res.poses[5] == res.poses[4]
    assert "0004.txt" in caplog.text


def test_main_estimate(tmp_path, capsys):
    sc = scene(300, 0.2, 1.0, seed=3)
    write_matches(tmp_path / "m.txt", sc.corrupt)
    write_rig(tmp_path / "rig.txt", sc.rig)
    rc = main(["estimate", "--matches", str(tmp_path / "m.txt"), "--rig", str(tmp_path / "rig.txt"), "--method", "rdcr"])
    out = capsys.readouterr().out.splitlines()
    assert rc == 0
    assert len(out[0].split()) == 12
    assert json.loads(out[1])["n_matches"] == 300


def test_main_errors(tmp_path, capsys):
    assert main(["estimate", "--matches", str(tmp_path / "none"), "--rig", str(tmp_path / "none")]) != 0
    assert "error" in capsys.readouterr().err
    bad = tmp_path / "cfg.json"
    bad.write_text('{"repetitions": 0}')
    assert main(["sweep", "--config", str(bad), "--out", str(tmp_path / "o")]) != 0


def test_module_entry_point(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    r = subprocess.run(
        [sys.executable, "-m", "stereomotion", "sweep", "--config", str(cfg), "--out", str(tmp_path / "o")],
        capture_output=True,
        text=True,
    )
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "o" / "sweep.csv").exists()
    r = subprocess.run([sys.executable, "-m", "stereomotion", "frobnicate"], capture_output=True, text=True)
    assert r.returncode != 0 and r.stderr
