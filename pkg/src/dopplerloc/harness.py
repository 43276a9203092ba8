"""End-to-end experiments: direction finding, static localization, tracking.

Every trial draws its randomness from ``np.random.default_rng([seed, trial,
tag])`` so results do not depend on execution order or worker count.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .acoustic import PcmStream, inband_noise_dbfs, synthesize_scene
from .direction import (DirectionError, DirectionEstimate, align_to, detect_shake_window,
                        normalize_angle, regress_direction, relative_angle, write_direction_csv)
from .dsp import (FilterSpec, agc, apply_filter, design_bandpass, phase_to_kinematics,
                  pll_track, pll_track_blocks)
from .imu import (FrameError, estimate_wcs_frame, integrate_motion, synthesize_imu)
from .localization import (GeometryError, PositionFix, arcs_from_angles, locate_initial,
                           track_step, write_fix_csv)
from .motion import Trajectory, gen_trajectory
from .scenario import AnchorNode, Scene, ScenarioError, with_anchors

INIT_WINDOW = 0.5
TRACK_FRAME = 0.25
PIPELINE_ERRORS = (DirectionError, FrameError, GeometryError, ScenarioError, ValueError)


@dataclass(frozen=True)
class NoiseProfile:
    """Sensor impairments for one experiment.

    ``snr_db`` is the in-band acoustic SNR for an anchor at
    ``reference_distance`` (None = at the trial's actual distance); the noise
    floor then stays fixed as the phone moves further away.
    """
    name: str
    snr_db: float | None = None
    reference_distance: float | None = None
    accel_noise: float = 0.0
    accel_bias: float = 0.0
    gyro_noise: float = 0.0


PRESETS = {
    "noiseless": NoiseProfile("noiseless"),
    "paper-like": NoiseProfile("paper-like", snr_db=30.0, reference_distance=8.0,
                               accel_noise=0.02, accel_bias=0.05, gyro_noise=0.002),
}


def get_profile(name: str) -> NoiseProfile:
    try:
        return PRESETS[name]
    except KeyError:
        raise ScenarioError(f"unknown noise profile '{name}' (have {', '.join(PRESETS)})") from None


def trial_rng(seed: int, trial: int, tag: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(trial), zlib.crc32(tag.encode())])


def config_digest(scene: Scene) -> str:
    return hashlib.sha256(scene.text.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------- report

@dataclass
class ExperimentReport:
    experiment: str
    unit: str
    columns: tuple[str, ...]
    rows: list = field(default_factory=list)
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    config_digest: str = ""
    seed: int = 0
    flags: dict = field(default_factory=dict)
    estimates: list = field(default_factory=list)

    def summary(self) -> dict:
        e = np.sort(np.abs(self.errors[np.isfinite(self.errors)]))
        failed = int(np.count_nonzero(~np.isfinite(self.errors)))
        if len(e) == 0:
            return {"n": 0, "failed": failed}
        p50, p90, p95, p100 = np.percentile(e, [50, 90, 95, 100])
        return {"n": int(len(e)), "failed": failed, "mean": float(e.mean()), "std": float(e.std()),
                "p50": float(p50), "p90": float(p90), "p95": float(p95), "p100": float(p100)}

    def cdf(self) -> tuple[np.ndarray, np.ndarray]:
        e = np.sort(np.abs(self.errors[np.isfinite(self.errors)]))
        return e, np.arange(1, len(e) + 1) / max(len(e), 1)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if not np.isfinite(v) else f"{float(v):.6f}"
    return str(v)


def emit_report(report: ExperimentReport, out_dir) -> list[Path]:
    """Write ``<id>.csv`` (one row per trial/step), ``<id>_cdf.csv`` and ``<id>_summary.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{report.experiment}.csv", out / f"{report.experiment}_cdf.csv",
             out / f"{report.experiment}_summary.txt"]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(report.columns)
        for row in report.rows:
            w.writerow([_fmt(row.get(c, "")) for c in report.columns])
    err, frac = report.cdf()
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"error_{report.unit}", "fraction"])
        for e, f in zip(err, frac):
            w.writerow([f"{e:.6f}", f"{f:.6f}"])
    summary = report.summary()
    lines = [f"experiment: {report.experiment}", f"unit: {report.unit}", f"seed: {report.seed}",
             f"config_sha256: {report.config_digest}"]
    lines += [f"{k}: {_fmt(v)}" for k, v in summary.items()]
    lines += [f"flag.{k}: {_fmt(v)}" for k, v in sorted(report.flags.items())]
    paths[2].write_text("\n".join(lines) + "\n")
    return paths


def write_manifest(out_dir, command: str, scene: Scene | None, seed: int, outputs, **extra) -> Path:
    path = Path(out_dir) / "run_manifest.json"
    doc = {"command": command, "seed": int(seed), "version": __version__,
           "config_sha256": None if scene is None else config_digest(scene),
           "outputs": sorted(Path(p).name for p in outputs), **extra}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# --------------------------------------------------------------------------- pipeline pieces

def channel_filter(scene: Scene, anchor: AnchorNode, cache: dict | None = None) -> FilterSpec:
    """Band-pass for one anchor: pass band from the scene, else twice the peak Doppler shift."""
    w = scene.world
    pb = scene.pass_band or 2.0 * w.max_speed * anchor.frequency / w.speed_of_sound
    key = (anchor.frequency, pb, w.audio_rate)
    if cache is not None and key in cache:
        return cache[key]
    filt = design_bandpass(FilterSpec(anchor.frequency, pb), w.audio_rate)
    if cache is not None:
        cache[key] = filt
    return filt


_FILTERS: dict = {}


def front_end(pcm: PcmStream, scene: Scene, anchor: AnchorNode) -> PcmStream:
    """Band-pass and gain-normalise one anchor's channel."""
    return agc(apply_filter(pcm, channel_filter(scene, anchor, _FILTERS)))


def noise_level(scene: Scene, profile: NoiseProfile, distance: float) -> float | None:
    if profile.snr_db is None or not scene.anchors:
        return None
    ref = profile.reference_distance or distance
    a = scene.anchors[0]
    pb = scene.pass_band or 2.0 * scene.world.max_speed * a.frequency / scene.world.speed_of_sound
    return inband_noise_dbfs(a.amplitude / ref, profile.snr_db, pb, scene.world.audio_rate)


def simulate_imu(traj: Trajectory, profile: NoiseProfile, rng: np.random.Generator):
    bias = np.zeros(3)
    if profile.accel_bias > 0:
        bias[:2] = rng.uniform(-profile.accel_bias, profile.accel_bias, size=2)
    return synthesize_imu(traj, bias=bias, noise_std=profile.accel_noise,
                          gyro_noise_std=profile.gyro_noise, rng=rng, bias_onset=INIT_WINDOW)


def estimate_directions(pcm: PcmStream, imu, scene: Scene, heading: float = 0.0,
                        anchors: Sequence[AnchorNode] | None = None) -> dict[str, DirectionEstimate]:
    """Per-anchor direction from one shake recording."""
    world = scene.world
    frame = estimate_wcs_frame(imu, INIT_WINDOW, heading)
    integrals = integrate_motion(imu, frame)
    window = detect_shake_window(integrals, min_start=INIT_WINDOW)
    out = {}
    for anchor in anchors or scene.anchors:
        track = phase_to_kinematics(pll_track(front_end(pcm, scene, anchor), anchor.frequency,
                                              anchor_id=anchor.id), world)
        f = align_to(integrals.t, track.t, track.f_shift)
        est = regress_direction(integrals, f, world, anchor.frequency, window, anchor.id)
        est.alpha_r = relative_angle(est.alpha, frame)
        out[anchor.id] = est
    return out


# --------------------------------------------------------------------------- direction

DIRECTION_COLUMNS = ("trial", "anchor_id", "pattern", "distance_m", "alpha_r_true_deg", "alpha_r_deg",
                     "error_deg", "lambda_x", "lambda_y", "lambda_0", "lambda_1", "residual_hz", "n",
                     "status")


def _direction_trial(job):
    scene, profile, seed, trial, distance, pattern, randomize = job
    geo = trial_rng(seed, trial, "geometry")
    motion = scene.motion
    if pattern is not None:
        motion = replace(motion, pattern=pattern)
    anchor = scene.anchors[0]
    center = np.array(motion.center)
    if randomize:
        bearing = geo.uniform(0.0, 2.0 * math.pi)
        yaw = geo.uniform(-math.pi, math.pi)
        heading = geo.uniform(-math.pi, math.pi)
    else:
        bearing = math.atan2(anchor.y - center[1], anchor.x - center[0])
        yaw, heading = motion.yaw, 0.0
    if distance is None:
        distance = float(np.hypot(anchor.x - center[0], anchor.y - center[1]))
    anchor = replace(anchor, x=float(center[0] + distance * math.cos(bearing)),
                     y=float(center[1] + distance * math.sin(bearing)))
    motion = replace(motion, yaw=yaw, seed=int(motion.seed + trial))
    trial_scene = replace(scene, anchors=(anchor,), motion=motion, interferers=())
    truth = normalize_angle(math.pi / 2.0 - (bearing - yaw))
    row = {"trial": trial, "anchor_id": anchor.id, "pattern": motion.pattern, "distance_m": distance,
           "alpha_r_true_deg": math.degrees(truth)}
    rng = trial_rng(seed, trial, "sensors")
    try:
        traj = gen_trajectory(motion, scene.world)
        pcm = synthesize_scene(traj, trial_scene, noise_level(trial_scene, profile, distance), rng)
        imu = simulate_imu(traj, profile, rng)
        est = estimate_directions(pcm, imu, trial_scene, heading)[anchor.id]
    except PIPELINE_ERRORS as exc:
        row.update(status=f"error: {exc}", error_deg=float("nan"))
        return row, None
    err = math.degrees(abs(normalize_angle(est.alpha_r - truth)))
    row.update(alpha_r_deg=math.degrees(est.alpha_r), error_deg=err, lambda_x=est.lambda_x,
               lambda_y=est.lambda_y, lambda_0=est.lambda_0, lambda_1=est.lambda_1,
               residual_hz=est.residual_rms, n=est.n, status="ok")
    return row, est


def run_direction_experiment(scene: Scene, trials: int, profile: NoiseProfile | str = "noiseless",
                             seed: int = 0, distance: float | None = None, pattern: str | None = None,
                             randomize: bool = True, workers: int = 1,
                             experiment: str = "direction") -> ExperimentReport:
    """Shake, synthesize, track and regress ``trials`` times; errors in degrees.

    With ``randomize`` each trial draws the anchor bearing, phone yaw and
    world-frame heading afresh; ``distance`` overrides the anchor range.
    """
    if isinstance(profile, str):
        profile = get_profile(profile)
    if not scene.anchors:
        raise ScenarioError("direction experiment needs at least one anchor")
    jobs = [(scene, profile, seed, t, distance, pattern, randomize) for t in range(trials)]
    results = _map(_direction_trial, jobs, workers)
    rows = [r for r, _ in results]
    report = ExperimentReport(experiment, "deg", DIRECTION_COLUMNS, rows,
                              np.array([r["error_deg"] for r in rows], float),
                              config_digest(scene), seed)
    report.flags["failed"] = sum(1 for r in rows if r["status"] != "ok")
    report.estimates = [(r["trial"], e) for r, e in results if e is not None]
    return report


# --------------------------------------------------------------------------- static localization

LOCALIZATION_COLUMNS = ("spot", "trial", "x_true", "y_true", "x", "y", "error_m", "objective",
                        "degenerate", "ambiguous", "status")


def _bearings(anchors, p, heading):
    return np.array([math.atan2(a.y - p[1], a.x - p[0]) - heading for a in anchors])


def _localization_trial(job):
    scene, profile, seed, spot_idx, spot, trial, sigma_deg, mode, use_side = job
    rng = trial_rng(seed, spot_idx * 100003 + trial, "localize")
    anchors = list(scene.anchors)
    heading = rng.uniform(-math.pi, math.pi)
    row = {"spot": spot_idx, "trial": trial, "x_true": spot[0], "y_true": spot[1]}
    try:
        if mode == "inject":
            alphas = _bearings(anchors, spot, heading)
            if sigma_deg:
                alphas = alphas + rng.normal(0.0, math.radians(sigma_deg), size=len(alphas))
        else:
            motion = replace(scene.motion, center=(float(spot[0]), float(spot[1])),
                             yaw=rng.uniform(-math.pi, math.pi), seed=int(scene.motion.seed + trial))
            trial_scene = replace(scene, motion=motion)
            traj = gen_trajectory(motion, scene.world)
            dist = float(np.median([np.hypot(a.x - spot[0], a.y - spot[1]) for a in anchors]))
            pcm = synthesize_scene(traj, trial_scene, noise_level(trial_scene, profile, dist), rng)
            imu = simulate_imu(traj, profile, rng)
            est = estimate_directions(pcm, imu, trial_scene, heading)
            alphas = np.array([est[a.id].alpha for a in anchors])
        arcs = arcs_from_angles(anchors, alphas, use_side)
        fix = locate_initial(arcs, scene.search_room())
    except PIPELINE_ERRORS as exc:
        row.update(status=f"error: {exc}", error_m=float("nan"))
        return row
    row.update(x=fix.x, y=fix.y, error_m=float(np.hypot(fix.x - spot[0], fix.y - spot[1])),
               objective=fix.objective, degenerate=int(fix.flags["degenerate"]),
               ambiguous=int(fix.flags["ambiguous"]), status="ok")
    return row


def run_localization_experiment(scene: Scene, spots, trials_per_spot: int,
                                profile: NoiseProfile | str = "noiseless", seed: int = 0,
                                angle_noise_deg: float | None = None, mode: str = "inject",
                                anchors: Sequence[str] | None = None, use_side: bool = True,
                                workers: int = 1, experiment: str = "localize") -> ExperimentReport:
    """Initial-fix error at each spot.

    ``mode="inject"`` feeds true bearings plus Gaussian noise of
    ``angle_noise_deg`` straight to the solver; ``mode="pipeline"`` runs a
    full shake at every spot. ``anchors`` restricts the anchor subset by id.
    """
    if isinstance(profile, str):
        profile = get_profile(profile)
    if anchors is not None:
        scene = with_anchors(scene, [scene.anchor(i) for i in anchors])
    if len(scene.anchors) < 3:
        raise ScenarioError("localization needs at least three anchors")
    if mode not in ("inject", "pipeline"):
        raise ScenarioError(f"unknown localization mode '{mode}'")
    jobs = [(scene, profile, seed, i, tuple(map(float, s)), t, angle_noise_deg, mode, use_side)
            for i, s in enumerate(spots) for t in range(trials_per_spot)]
    rows = _map(_localization_trial, jobs, workers)
    report = ExperimentReport(experiment, "m", LOCALIZATION_COLUMNS, rows,
                              np.array([r["error_m"] for r in rows], float), config_digest(scene), seed)
    report.flags["failed"] = sum(1 for r in rows if r["status"] != "ok")
    report.flags["degenerate"] = sum(int(r.get("degenerate", 0)) for r in rows)
    report.flags["ambiguous"] = sum(int(r.get("ambiguous", 0)) for r in rows)
    return report


# --------------------------------------------------------------------------- tracking

TRACKING_COLUMNS = ("t", "x", "y", "x_true", "y_true", "error_m", "n_locked", "dead_reckon")


@dataclass
class TrackingResult:
    report: ExperimentReport
    fixes: list[PositionFix]
    truth: np.ndarray


def duty_blocks(n_samples: int, rate: float, duty: float, frame: float = TRACK_FRAME):
    """Sample ranges covering the leading ``duty`` fraction of each frame."""
    step = int(round(frame * rate))
    width = max(1, int(round(duty * frame * rate)))
    return [(s, min(s + width, n_samples)) for s in range(0, n_samples - width + 1, step)]


def _channel_phases(y: PcmStream, anchor: AnchorNode, duty: float, frame: float):
    """(times, theta, lock quality) sampled once per frame."""
    if duty >= 1.0:
        tr = pll_track(y, anchor.frequency, anchor_id=anchor.id)
        t0 = tr.t[0]
        times = t0 + frame * np.arange(int((tr.t[-1] - t0) / frame) + 1)
        theta = np.interp(times, tr.t, tr.theta)
        n = int(round(frame * y.rate))
        q = np.array([tr.lock_quality[max(0, i - n):i + 1].mean()
                      for i in np.searchsorted(tr.t, times).clip(0, len(tr.t) - 1)])
        return times, theta, q
    blocks = duty_blocks(len(y.samples), y.rate, duty, frame)
    bp = pll_track_blocks(y, anchor.frequency, blocks, anchor_id=anchor.id)
    return bp.t_end, bp.theta_end, bp.lock_quality


def run_tracking_experiment(scene: Scene, duty: float = 1.0, initial_error: float = 0.0,
                            profile: NoiseProfile | str = "paper-like", seed: int = 0,
                            frame: float = TRACK_FRAME, lock_threshold: float = 0.5,
                            experiment: str = "track") -> TrackingResult:
    """Walk the scene's path and track it from per-anchor phase alone.

    The first fix is the true start displaced by ``initial_error`` metres in a
    seeded random direction. With ``duty < 1`` only the leading fraction of
    each ``frame`` is run through the PLL.
    """
    if isinstance(profile, str):
        profile = get_profile(profile)
    if scene.motion.pattern != "walk_path":
        raise ScenarioError("tracking needs a walk_path motion")
    if not 0.0 < duty <= 1.0:
        raise ScenarioError("duty cycle must be in (0, 1]")
    rng = trial_rng(seed, 0, "track")
    traj = gen_trajectory(scene.motion, scene.world)
    start = np.array(scene.motion.waypoints[0], float)
    dist = float(np.median([np.hypot(a.x - start[0], a.y - start[1]) for a in scene.anchors]))
    pcm = synthesize_scene(traj, scene, noise_level(scene, profile, dist), rng)
    anchors = list(scene.anchors)
    series = [_channel_phases(front_end(pcm, scene, a), a, duty, frame) for a in anchors]
    n = min(len(s[0]) for s in series)
    times = series[0][0][:n]
    theta = np.array([s[1][:n] for s in series])
    quality = np.array([s[2][:n] for s in series])
    truth = traj.motion.position(times)[:, :2]

    direction = rng.uniform(0.0, 2.0 * math.pi)
    p0 = truth[0] + initial_error * np.array([math.cos(direction), math.sin(direction)])
    fixes = [PositionFix(p0, 0.0, np.zeros(len(anchors)), float(times[0]), len(anchors), {})]
    radius = 0.8 * frame / TRACK_FRAME
    for k in range(1, n):
        locked = quality[:, k] >= lock_threshold
        fx = track_step(fixes[-1], theta[:, k] - theta[:, k - 1], anchors, scene.world,
                        locked=locked, t=float(times[k]), search_radius=radius)
        radius = fx.flags["next_radius"] if fx.flags.get("dead_reckon") else 0.8 * frame / TRACK_FRAME
        fixes.append(fx)
    pos = np.array([f.position for f in fixes])
    err = np.hypot(*(pos - truth).T)
    rows = [{"t": f.t, "x": f.x, "y": f.y, "x_true": truth[i, 0], "y_true": truth[i, 1],
             "error_m": err[i], "n_locked": f.n_locked, "dead_reckon": int(bool(f.flags.get("dead_reckon")))}
            for i, f in enumerate(fixes)]
    report = ExperimentReport(experiment, "m", TRACKING_COLUMNS, rows, err, config_digest(scene), seed)
    report.flags.update(duty=duty, initial_error_m=initial_error, final_error_m=float(err[-1]),
                        max_error_m=float(err.max()), lock_loss_steps=int(np.count_nonzero(quality < lock_threshold)),
                        path_length_m=traj.path_length())
    return TrackingResult(report, fixes, truth)


def emit_tracking(result: TrackingResult, out_dir) -> list[Path]:
    paths = emit_report(result.report, out_dir)
    fix_path = Path(out_dir) / f"{result.report.experiment}_fixes.csv"
    write_fix_csv(fix_path, result.fixes)
    return paths + [fix_path]


def emit_direction(report: ExperimentReport, out_dir) -> list[Path]:
    paths = emit_report(report, out_dir)
    est_path = Path(out_dir) / f"{report.experiment}_estimates.csv"
    write_direction_csv(est_path, report.estimates)
    return paths + [est_path]
