"""Command-line entry point.

Exit codes: 0 success, 2 bad configuration or arguments, 3 pipeline failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .acoustic import phase_oracle, synthesize_scene
from .direction import DirectionError
from .dsp import FilterDesignError
from .harness import (PRESETS, ExperimentReport, emit_direction, emit_report, emit_tracking,
                      get_profile, noise_level, run_direction_experiment,
                      run_localization_experiment, run_tracking_experiment, simulate_imu,
                      trial_rng, write_manifest)
from .imu import FrameError
from .localization import GeometryError
from .motion import gen_trajectory
from .scenario import ScenarioError, load_scenario, plan_channels

DEFAULT_CONFIGS = {
    "synth": "single_anchor.yaml",
    "direction": "single_anchor.yaml",
    "localize": "paper_layout.yaml",
    "track": "paper_walk.yaml",
}
PAPER_SPOTS = [(x, y) for y in (-3.0, -6.0) for x in range(6, 25, 3)]


def _load(args):
    if args.config:
        text = Path(args.config).read_text(encoding="utf-8")
    else:
        text = resources.files("dopplerloc.scenarios").joinpath(DEFAULT_CONFIGS[args.command]).read_text()
    return load_scenario(text)


def _cmd_synth(args) -> list[Path]:
    scene = _load(args)
    profile = get_profile(args.profile)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = trial_rng(args.seed, 0, "synth")
    traj = gen_trajectory(scene.motion, scene.world)
    center = np.array(scene.motion.center if scene.motion.is_shake else scene.motion.waypoints[0])
    dist = float(np.median([np.hypot(a.x - center[0], a.y - center[1]) for a in scene.anchors]))
    pcm = synthesize_scene(traj, scene, noise_level(scene, profile, dist), rng)
    imu = simulate_imu(traj, profile, rng)
    paths = [out / "trajectory.csv", out / "imu.csv", out / "audio.wav", out / "phase_oracle.csv"]
    traj.to_csv(paths[0])
    imu.to_csv(paths[1])
    clipped = pcm.to_wav(paths[2])
    phase_oracle(traj, scene.anchors, scene.world).to_csv(paths[3])
    if clipped:
        print(f"warning: {clipped} samples clipped", file=sys.stderr)
    return paths


def _cmd_direction(args) -> list[Path]:
    scene = _load(args)
    report = run_direction_experiment(scene, args.trials if args.trials is not None else 50, args.profile,
                                      args.seed, args.distance, args.pattern, workers=args.workers)
    _print_summary(report)
    return emit_direction(report, args.out_dir)


def _cmd_localize(args) -> list[Path]:
    scene = _load(args)
    subset = args.anchors.split(",") if args.anchors else None
    report = run_localization_experiment(scene, PAPER_SPOTS, args.trials if args.trials is not None else 30,
                                         args.profile, args.seed, args.angle_noise_deg, args.mode, subset,
                                         use_side=not args.unsigned, workers=args.workers)
    _print_summary(report)
    return emit_report(report, args.out_dir)


def _cmd_track(args) -> list[Path]:
    scene = _load(args)
    result = run_tracking_experiment(scene, args.duty, args.initial_error, args.profile, args.seed)
    _print_summary(result.report)
    return emit_tracking(result, args.out_dir)


def _cmd_eval(args) -> list[Path]:
    with open(args.input, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and args.column not in rows[0]:
        raise ScenarioError(f"column '{args.column}' not in {args.input}")
    errors = np.array([float(r[args.column]) for r in rows], float)
    unit = "deg" if args.column.endswith("deg") else "m"
    report = ExperimentReport(Path(args.input).stem + "_eval", unit, ("index", args.column),
                              [{"index": i, args.column: e} for i, e in enumerate(errors)], errors,
                              seed=args.seed)
    _print_summary(report)
    return emit_report(report, args.out_dir)


def _cmd_plan(args) -> list[Path]:
    plan = plan_channels(args.band_low, args.band_high, args.v_max, args.v_a, args.f_a)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "channels.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", "center_hz", "low_hz", "high_hz"])
        for i, c in enumerate(plan.centers):
            w.writerow([i, f"{c:.3f}", f"{c - plan.pass_band / 2:.3f}", f"{c + plan.pass_band / 2:.3f}"])
    print(f"pass band {plan.pass_band:.1f} Hz, capacity {plan.capacity} channels")
    return [path]


def _print_summary(report: ExperimentReport) -> None:
    s = report.summary()
    parts = [f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in s.items()]
    print(f"{report.experiment} [{report.unit}]: " + " ".join(parts))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dopplerloc", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="scenario YAML (defaults to a bundled scenario)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="out")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--duty", type=float, default=1.0, help="fraction of each 0.25 s frame processed")
    p.add_argument("--profile", default="paper-like", choices=sorted(PRESETS))
    p.add_argument("--workers", type=int, default=1)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="write trajectory, IMU, audio and phase-oracle files")

    d = sub.add_parser("direction", help="direction-finding trials")
    d.add_argument("--distance", type=float, default=None, help="anchor range in metres")
    d.add_argument("--pattern", default=None, help="override the shake pattern")

    lo = sub.add_parser("localize", help="static localization at the standard spots")
    lo.add_argument("--mode", choices=("inject", "pipeline"), default="inject")
    lo.add_argument("--angle-noise-deg", type=float, default=2.66)
    lo.add_argument("--anchors", default=None, help="comma-separated anchor ids to use")
    lo.add_argument("--unsigned", action="store_true", help="ignore which side of each chord the phone is on")

    t = sub.add_parser("track", help="phase-only tracking along the scenario walk")
    t.add_argument("--initial-error", type=float, default=0.0)

    e = sub.add_parser("eval", help="error statistics and CDF of a report column")
    e.add_argument("--input", required=True)
    e.add_argument("--column", default="error_m")

    c = sub.add_parser("plan-channels", help="Doppler-safe channel plan")
    c.add_argument("--band-low", type=float, default=17000.0)
    c.add_argument("--band-high", type=float, default=22050.0)
    c.add_argument("--v-max", type=float, default=2.0)
    c.add_argument("--v-a", type=float, default=340.0)
    c.add_argument("--f-a", type=float, default=19000.0)
    return p


COMMANDS = {"synth": _cmd_synth, "direction": _cmd_direction, "localize": _cmd_localize,
            "track": _cmd_track, "eval": _cmd_eval, "plan-channels": _cmd_plan}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        outputs = COMMANDS[args.command](args)
        scene = _load(args) if args.command in DEFAULT_CONFIGS else None
        write_manifest(args.out_dir, args.command, scene, args.seed, outputs,
                       trials=args.trials, duty=args.duty, profile=args.profile)
    except ScenarioError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DirectionError, GeometryError, FrameError, FilterDesignError) as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
