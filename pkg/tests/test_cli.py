import csv
import json
import math
import re
from pathlib import Path

import numpy as np
import pytest

from myopic_adhesion.cli import load_trajectory, main, sha256
from myopic_adhesion.config import reference_config
from myopic_adhesion.fields import load_snapshot

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _small(tmp_path, name="small.json", **overrides):
    base = {"domain.cells": [8, 8, 8], "model.T": 0.02, "model.snapshot_stride": 2,
            "audit.delta_schedule": [0.25, 0.125, 0.0625]}
    base.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(reference_config(base)))
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_outputs(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", str(_small(tmp_path)), "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    for key in ("config", "admissibility", "warnings", "seed", "versions", "files", "run"):
        assert key in man
    assert man["versions"]["numpy"]
    assert "diagnostics.csv" in man["files"]
    for rel, digest in man["files"].items():
        assert sha256(out / rel) == digest
    rows = _rows(out / "diagnostics.csv")
    assert list(rows[0]) == ["step", "t", "mass", "l1", "lr", "minc", "h1_B", "lrp1_B", "mass_residual"]
    assert float(rows[-1]["t"]) == pytest.approx(0.02)
    snap, meta = load_snapshot(sorted((out / "snapshots").glob("c_*.bin"))[-1].with_suffix(""))
    assert meta["time"] == pytest.approx(0.02) and snap.domain.cells == (8, 8, 8)


def test_logistic_config_matches_closed_form(tmp_path):
    out = tmp_path / "logistic"
    assert main(["run", "--config", str(CONFIGS / "logistic.json"), "--out", str(out)]) == 0
    final = float(_rows(out / "diagnostics.csv")[-1]["mass"])
    assert final == pytest.approx(math.exp(2) / (1 + math.exp(2)), abs=1e-6)


def test_zero_initial_density_stays_zero(tmp_path):
    out = tmp_path / "zero"
    cfg = _small(tmp_path, **{"initial": {"kind": "constant", "value": 0.0}})
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    assert all(float(r["mass"]) == 0 and float(r["minc"]) == 0 for r in _rows(out / "diagnostics.csv"))


def test_inadmissible_exponent_is_reported(tmp_path, capsys):
    out = tmp_path / "r3"
    assert main(["run", "--config", str(_small(tmp_path, **{"model.r": 3.0})), "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert not man["admissibility"]["admissible"]
    assert any("d/(d-2)" in w for w in man["warnings"])
    assert "d/(d-2)" in capsys.readouterr().out


def test_run_is_deterministic(tmp_path):
    cfg = _small(tmp_path)
    digests = []
    for k in range(2):
        out = tmp_path / f"det{k}"
        assert main(["run", "--config", str(cfg), "--out", str(out), "--seed", "7"]) == 0
        digests.append(json.loads((out / "manifest.json").read_text())["files"])
    assert digests[0] == digests[1]


def test_invalid_config_exit_code(tmp_path, capsys):
    out = tmp_path / "bad"
    cfg = _small(tmp_path, **{"model.mu": -1.0})
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 2
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["error"] == "ConfigError" and "mu" in rec["message"]
    assert json.loads((out / "error.json").read_text()) == rec
    assert main(["run", "--config", str(tmp_path / "missing.json"), "--out", str(out)]) == 2


def test_runtime_failure_exit_code(tmp_path):
    # a fixed step far above the stability bound is refused mid-run
    cfg = _small(tmp_path, **{"model.dt": 0.01})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "unstable")]) == 1
    assert (tmp_path / "unstable" / "error.json").exists()


def test_trajectory_roundtrip(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", str(_small(tmp_path)), "--out", str(out)]) == 0
    traj, cfg = load_trajectory(out)
    assert cfg.domain.cells == (8, 8, 8)
    assert traj.times[0] == 0 and traj.times[-1] == pytest.approx(0.02)
    assert len(traj.diagnostics["t"]) == traj.steps + 1


@pytest.mark.parametrize("axis", ["eps", "dt", "h"])
def test_sweep(tmp_path, axis):
    out = tmp_path / f"sweep_{axis}"
    cfg = _small(tmp_path, **{"model.T": 0.005, "model.eps_schedule": [0.04, 0.02, 0.01]})
    assert main(["sweep", "--config", str(cfg), "--out", str(out), "--axis", axis, "--workers", "2"]) == 0
    rows = _rows(out / "sweep.csv")
    assert len(rows) == 3 and not any(r["error"] for r in rows)
    d = [float(r["l1_distance_to_next"]) for r in rows[:2]]
    assert all(np.isfinite(d)) and d[1] < d[0]
    if axis == "eps":
        assert all(r["tensor_checks_ok"] == "true" for r in rows)


def test_sweep_dt_on_logistic_is_second_order(tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(CONFIGS / "logistic.json"), "--out", str(out), "--axis", "dt"]) == 0
    d = [float(r["l1_distance_to_next"]) for r in _rows(out / "sweep.csv")[:2]]
    assert d[0] / d[1] == pytest.approx(4.0, rel=0.1)


def test_sweep_rejects_short_schedule(tmp_path):
    assert main(["sweep", "--config", str(_small(tmp_path)), "--out", str(tmp_path / "s"), "--count", "2"]) == 2


def test_dim_command(tmp_path):
    out = tmp_path / "dim"
    assert main(["dim", "--config", str(CONFIGS / "point_dim.json"), "--out", str(out)]) == 0
    assert len(_rows(out / "dim.csv")) == 5
    man = json.loads((out / "manifest.json").read_text())
    assert man["dim"]["estimate"] <= 0.05 and man["dim"]["passed"]
    cfg = _small(tmp_path, "seg.json", **{"audit.compact_set": {"kind": "segment",
                                                               "points": [[0.5, 1, 1], [1.5, 1, 1]]},
                                         "audit.expected_dim": 0.0, "audit.dim_tolerance": 0.05})
    assert main(["dim", "--config", str(cfg), "--out", str(tmp_path / "dim2")]) == 1


def test_dim_requires_schedule(tmp_path):
    raw = reference_config({"domain.cells": [8, 8, 8]})
    del raw["audit"]["delta_schedule"]
    path = tmp_path / "nosched.json"
    path.write_text(json.dumps(raw))
    assert main(["dim", "--config", str(path), "--out", str(tmp_path / "d")]) == 2


def test_cutoff_command(tmp_path):
    out = tmp_path / "cutoff"
    cfg = _small(tmp_path, **{"audit.delta_schedule": [0.1, 0.05, 0.025]})
    assert main(["cutoff", "--config", str(cfg), "--out", str(out)]) == 0
    rows = _rows(out / "cutoff.csv")
    assert [float(r["delta"]) for r in rows] == [0.1, 0.05, 0.025]
    assert float(rows[-1]["decay_value"]) == 0.0


def test_cutoff_command_flags_coarse_schedule(tmp_path, capsys):
    # at delta = 1/16 the support still reaches the fixed decay probe
    assert main(["cutoff", "--config", str(_small(tmp_path)), "--out", str(tmp_path / "c")]) == 1
    assert "decay" in capsys.readouterr().out


def test_tensor_check_command(tmp_path):
    out = tmp_path / "tensor"
    cfg = _small(tmp_path, **{"domain.cells": [16, 16, 16], "audit.eps_list": [0.08, 0.04]})
    assert main(["tensor-check", "--config", str(cfg), "--out", str(out)]) == 0
    rows = _rows(out / "tensor_check.csv")
    assert [float(r["eps"]) for r in rows] == [0.08, 0.04]
    assert all(r["bound_ok"] == "true" and r["elliptic_ok"] == "true" for r in rows)


def test_weak_residual_command(tmp_path):
    cfg = _small(tmp_path, **{"model.T": 0.02, "model.snapshot_stride": 1, "audit.T_support": 0.015,
                              "audit.ramp": 0.25})
    out = tmp_path / "weak"
    assert main(["weak-residual", "--config", str(cfg), "--out", str(out)]) == 0
    rows = _rows(out / "weak_residual.csv")
    assert [r["mode"] for r in rows] == ["constant", "polynomial-interior"]
    assert list(rows[0])[:6] == ["h", "dt", "eps", "mode", "residual", "residual_regularized"]
    const = rows[0]
    assert abs(float(const["residual"]) - abs(float(const["integrated_mass_residual"]))) \
        <= float(const["quadrature_tolerance"]) + 1e-12
    # reuse the stored trajectory
    out2 = tmp_path / "weak2"
    assert main(["weak-residual", "--config", str(cfg), "--out", str(out2),
                 "--trajectory", str(out / "trajectory"), "--mode", "collar-bump"]) == 0
    assert [r["mode"] for r in _rows(out2 / "weak_residual.csv")] == ["collar-bump"]


def test_weak_residual_of_zero_run_is_zero(tmp_path):
    cfg = _small(tmp_path, **{"initial": {"kind": "constant", "value": 0.0}, "model.snapshot_stride": 1,
                              "audit.T_support": 0.015})
    out = tmp_path / "weak0"
    assert main(["weak-residual", "--config", str(cfg), "--out", str(out)]) == 0
    assert all(float(r["residual"]) == 0 for r in _rows(out / "weak_residual.csv"))


def test_verify_subset(tmp_path, capsys):
    out = tmp_path / "verify"
    assert main(["verify", "--only", "7", "--only", "5", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert re.search(r"\[PASS\]\s+5 ", text) and re.search(r"\[PASS\]\s+7 ", text)
    assert "2/2 criteria passed" in text
    assert len(_rows(out / "verify.csv")) == 2


def test_verify_detects_sign_fault(tmp_path, capsys):
    assert main(["verify", "--only", "1", "--inject-sign-fault", "--out", str(tmp_path / "v")]) == 1
    assert re.search(r"\[FAIL\]\s+1 ", capsys.readouterr().out)


def test_verify_rejects_negative_growth_rate(tmp_path, capsys):
    assert main(["verify", "--force-mu", "-1", "--out", str(tmp_path / "v")]) == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "ConfigError"


def test_unknown_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["explode"])
    assert exc.value.code == 2
