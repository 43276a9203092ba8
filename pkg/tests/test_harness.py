import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dopplerloc import cli
from dopplerloc.harness import (PRESETS, ExperimentReport, duty_blocks, emit_direction, emit_report,
                                get_profile, run_direction_experiment, run_localization_experiment,
                                trial_rng)
from dopplerloc.localization import GeometryError
from dopplerloc.scenario import ScenarioError

from conftest import tracking_run

PAPER_SPOTS = [(x, y) for y in (-3.0, -6.0) for x in range(6, 25, 3)]


def report_of(errors, name="r"):
    errors = np.asarray(errors, float)
    rows = [{"index": i, "error_m": e} for i, e in enumerate(errors)]
    return ExperimentReport(name, "m", ("index", "error_m"), rows, errors)


# --------------------------------------------------------------------------- reports

def test_zero_trials_empty_report(single_scene, tmp_path):
    rep = run_direction_experiment(single_scene, 0)
    assert rep.rows == [] and rep.summary() == {"n": 0, "failed": 0}
    paths = emit_report(rep, tmp_path)
    assert paths[0].read_text().splitlines() == [",".join(rep.columns)]
    assert paths[1].read_text().splitlines() == ["error_deg,fraction"]


def test_fifty_row_report(tmp_path):
    rep = report_of(np.linspace(0.0, 1.0, 50))
    paths = emit_report(rep, tmp_path)
    assert len(paths[0].read_text().splitlines()) == 51
    summary = paths[2].read_text()
    assert "n: 50" in summary and "p90: " in summary and "mean: 0.500000" in summary


def test_failed_trials_counted():
    s = report_of([0.1, float("nan"), 0.3]).summary()
    assert s["n"] == 2 and s["failed"] == 1
    assert s["mean"] == pytest.approx(0.2)


@given(st.lists(st.floats(-100.0, 100.0), min_size=1, max_size=300))
def test_percentiles_and_cdf_monotone(errors):
    rep = report_of(errors)
    s = rep.summary()
    assert s["p50"] <= s["p90"] <= s["p95"] <= s["p100"]
    assert s["p100"] == pytest.approx(max(abs(e) for e in errors))
    e, frac = rep.cdf()
    assert np.all(np.diff(e) >= 0) and np.all(np.diff(frac) > 0)
    assert frac[-1] == pytest.approx(1.0)


def test_trial_rng_is_counter_based():
    a = trial_rng(1, 5, "x").random(3)
    np.testing.assert_array_equal(a, trial_rng(1, 5, "x").random(3))
    assert not np.array_equal(a, trial_rng(1, 6, "x").random(3))
    assert not np.array_equal(a, trial_rng(1, 5, "y").random(3))


def test_profiles():
    p = get_profile("paper-like")
    assert (p.snr_db, p.accel_noise, p.accel_bias, p.gyro_noise) == (30.0, 0.02, 0.05, 0.002)
    assert set(PRESETS) == {"noiseless", "paper-like"}
    with pytest.raises(ScenarioError, match="unknown noise profile"):
        get_profile("studio")


def test_duty_blocks():
    blocks = duty_blocks(44100, 44100.0, 0.2)
    assert blocks[0] == (0, 2205) and blocks[1] == (11025, 13230)
    assert len(blocks) == 4
    assert duty_blocks(44100, 44100.0, 1.0)[0] == (0, 11025)


# --------------------------------------------------------------------------- experiments

def test_direction_determinism(single_scene, tmp_path):
    outs = []
    for k in range(2):
        rep = run_direction_experiment(single_scene, 2, "paper-like", seed=11)
        outs.append([p.read_bytes() for p in emit_direction(rep, tmp_path / str(k))])
    assert outs[0] == outs[1]
    other = run_direction_experiment(single_scene, 2, "paper-like", seed=12)
    assert other.rows[0]["alpha_r_true_deg"] != rep.rows[0]["alpha_r_true_deg"]


def test_direction_noiseless_small_errors(single_scene):
    rep = run_direction_experiment(single_scene, 6, "noiseless", seed=2, distance=16.0)
    assert rep.flags["failed"] == 0
    assert rep.summary()["mean"] <= 0.5


def test_direction_needs_an_anchor(single_scene):
    from dataclasses import replace
    with pytest.raises(ScenarioError):
        run_direction_experiment(replace(single_scene, anchors=()), 1)


def test_localization_determinism(layout_scene, tmp_path):
    a = run_localization_experiment(layout_scene, PAPER_SPOTS, 3, angle_noise_deg=2.66, seed=4)
    b = run_localization_experiment(layout_scene, PAPER_SPOTS, 3, angle_noise_deg=2.66, seed=4)
    pa, pb = emit_report(a, tmp_path / "a"), emit_report(b, tmp_path / "b")
    assert [p.read_bytes() for p in pa] == [p.read_bytes() for p in pb]


def test_exact_angles_all_small(layout_scene):
    rep = run_localization_experiment(layout_scene, PAPER_SPOTS, 2, angle_noise_deg=0.0)
    assert rep.flags["failed"] == 0
    assert np.max(rep.errors) < 0.02


def test_more_anchors_help(layout_scene):
    kw = dict(angle_noise_deg=2.66, seed=9)
    three = run_localization_experiment(layout_scene, PAPER_SPOTS, 15, anchors=["A2", "A4", "A6"], **kw)
    six = run_localization_experiment(layout_scene, PAPER_SPOTS, 15, **kw)
    assert np.median(six.errors) < np.median(three.errors)


def test_localization_contract(layout_scene):
    with pytest.raises(ScenarioError, match="three"):
        run_localization_experiment(layout_scene, PAPER_SPOTS, 1, anchors=["A1", "A2"])
    with pytest.raises(ScenarioError, match="mode"):
        run_localization_experiment(layout_scene, PAPER_SPOTS, 1, mode="magic")


def test_tracking_needs_walk(layout_scene):
    from dopplerloc.harness import run_tracking_experiment
    with pytest.raises(ScenarioError, match="walk_path"):
        run_tracking_experiment(layout_scene)


def test_duty_monotone():
    """Median over 20 seeds of the mean tracking error, for duty 100%, 20%, 10%."""
    medians = [np.median([tracking_run(duty, seed)[0].report.summary()["mean"] for seed in range(20)])
               for duty in (1.0, 0.2, 0.1)]
    assert medians[0] <= medians[1] <= medians[2]


@pytest.mark.xfail(strict=True, reason="a constant-speed simulated walk lets linear phase extrapolation "
                                       "bridge 90% gaps; the error stays near 0.3 m, below 0.5 m")
def test_tenth_duty_error_band():
    mean = tracking_run(0.1, 0)[0].report.summary()["mean"]
    assert 0.5 <= mean <= 1.6


# --------------------------------------------------------------------------- CLI

def test_cli_plan_channels(tmp_path, capsys):
    assert cli.main(["--out-dir", str(tmp_path), "plan-channels"]) == 0
    rows = (tmp_path / "channels.csv").read_text().splitlines()
    assert rows[0] == "channel,center_hz,low_hz,high_hz" and len(rows) == 24
    assert "capacity 23 channels" in capsys.readouterr().out
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["command"] == "plan-channels" and manifest["outputs"] == ["channels.csv"]


def test_cli_localize_and_eval(tmp_path):
    assert cli.main(["--out-dir", str(tmp_path), "--trials", "2", "localize"]) == 0
    report = tmp_path / "localize.csv"
    assert len(report.read_text().splitlines()) == 1 + 2 * len(PAPER_SPOTS)
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["seed"] == 0 and len(manifest["config_sha256"]) == 64
    ev = tmp_path / "ev"
    assert cli.main(["--out-dir", str(ev), "eval", "--input", str(report)]) == 0
    assert (ev / "localize_eval_cdf.csv").exists()
    assert cli.main(["--out-dir", str(ev), "eval", "--input", str(report), "--column", "nope"]) == 2


def test_cli_synth(tmp_path):
    assert cli.main(["--out-dir", str(tmp_path), "--profile", "noiseless", "synth"]) == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["audio.wav", "imu.csv", "phase_oracle.csv", "run_manifest.json", "trajectory.csv"]


def test_cli_direction(tmp_path):
    assert cli.main(["--out-dir", str(tmp_path), "--trials", "1", "direction"]) == 0
    assert (tmp_path / "direction_estimates.csv").exists()


def test_cli_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("anchors: [{id: A, x_m: 0}]\n")
    assert cli.main(["--config", str(bad), "--out-dir", str(tmp_path), "localize"]) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_pipeline_error(tmp_path, monkeypatch, capsys):
    def boom(args):
        raise GeometryError("anchors coincide")
    monkeypatch.setitem(cli.COMMANDS, "plan-channels", boom)
    assert cli.main(["--out-dir", str(tmp_path), "plan-channels"]) == 3
    assert "pipeline error" in capsys.readouterr().err


def test_cli_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["--out-dir", str(blocker), "plan-channels"]) == 4


def test_cli_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2
