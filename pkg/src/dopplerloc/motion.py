"""Analytic phone trajectories: shake patterns A-D and walking paths.

Every trajectory is built from pieces whose position, velocity and
acceleration are known in closed form, so sampled data can be checked against
exact derivatives. Shake loops start and end at rest; the phone holds a fixed
orientation unless ``yaw_rate`` is set.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .scenario import MotionPatternSpec, WorldConfig, validate_motion

# quintic smootherstep: zero velocity and acceleration at both ends
_QUINTIC_PEAK = 1.875


def _smooth(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * s * (10.0 + s * (-15.0 + 6.0 * s))


def _smooth_d1(s):
    s = np.clip(s, 0.0, 1.0)
    return 30.0 * s * s * (1.0 - s) ** 2


def _smooth_d2(s):
    s = np.clip(s, 0.0, 1.0)
    return 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s)


def _smooth_int(s):
    s = np.clip(s, 0.0, 1.0)
    return s ** 4 * (2.5 + s * (-3.0 + s))


class _Quintic:
    """Rest-to-rest traversal of ``length`` with peak speed ``speed``."""

    def __init__(self, length: float, speed: float):
        self.length = length
        self.duration = _QUINTIC_PEAK * length / speed if length > 0 else 0.0

    def __call__(self, tau):
        T = self.duration
        s = tau / T
        return (self.length * _smooth(s), self.length * _smooth_d1(s) / T,
                self.length * _smooth_d2(s) / T ** 2)


class _Trapezoid:
    """Ramp up to ``speed`` over ``ramp`` seconds, cruise, ramp down."""

    def __init__(self, length: float, speed: float, ramp: float):
        ramp = min(ramp, length / speed)
        self.length, self.speed, self.ramp = length, speed, ramp
        self.duration = length / speed + ramp

    def __call__(self, tau):
        V, r, T = self.speed, self.ramp, self.duration
        tau = np.asarray(tau, dtype=float)
        up = tau < r
        down = tau > T - r
        mid = ~(up | down)
        sig = np.empty_like(tau)
        vel = np.empty_like(tau)
        acc = np.zeros_like(tau)
        su = tau[up] / r
        sig[up] = V * r * _smooth_int(su)
        vel[up] = V * _smooth(su)
        acc[up] = V * _smooth_d1(su) / r
        sig[mid] = V * r / 2 + V * (tau[mid] - r)
        vel[mid] = V
        sd = (T - tau[down]) / r
        sig[down] = self.length - V * r * _smooth_int(sd)
        vel[down] = V * _smooth(sd)
        acc[down] = -V * _smooth_d1(sd) / r
        return sig, vel, acc


class _Line:
    def __init__(self, p0, p1):
        self.p0 = np.asarray(p0, float)
        d = np.asarray(p1, float) - self.p0
        self.length = float(np.linalg.norm(d))
        self.u = d / self.length

    def __call__(self, sigma):
        sigma = np.asarray(sigma)[:, None]
        g = self.p0 + sigma * self.u
        return g, np.broadcast_to(self.u, g.shape), np.zeros_like(g)


class _Arc:
    """Circle arc about ``center`` in the plane spanned by ``e1``, ``e2``."""

    def __init__(self, center, e1, e2, radius, start_angle, sweep):
        self.c = np.asarray(center, float)
        self.e1, self.e2 = np.asarray(e1, float), np.asarray(e2, float)
        self.r, self.a0 = radius, start_angle
        self.sign = 1.0 if sweep > 0 else -1.0
        self.length = abs(sweep) * radius

    def __call__(self, sigma):
        ang = self.a0 + self.sign * np.asarray(sigma) / self.r
        ca, sa = np.cos(ang)[:, None], np.sin(ang)[:, None]
        radial = ca * self.e1 + sa * self.e2
        tangent = self.sign * (-sa * self.e1 + ca * self.e2)
        return self.c + self.r * radial, tangent, -radial / self.r


class _PathPiece:
    def __init__(self, geometry, profile):
        self.geometry, self.profile = geometry, profile
        self.duration = profile.duration

    def evaluate(self, tau):
        sig, sd, sdd = self.profile(tau)
        g, g1, g2 = self.geometry(sig)
        sd, sdd = np.asarray(sd)[:, None], np.asarray(sdd)[:, None]
        return g, g1 * sd, g2 * sd ** 2 + g1 * sdd


class _Rest:
    def __init__(self, point, duration):
        self.point = np.asarray(point, float)
        self.duration = duration

    def evaluate(self, tau):
        n = len(tau)
        return np.tile(self.point, (n, 1)), np.zeros((n, 3)), np.zeros((n, 3))


class _RandomShake:
    """Windowed sum of sinusoids: a smooth random shake that starts and ends at rest."""

    def __init__(self, origin, e1, e2, duration, ramp, freqs, amps, phases, scale=1.0):
        self.origin, self.e1, self.e2 = np.asarray(origin, float), np.asarray(e1), np.asarray(e2)
        self.duration, self.ramp = duration, ramp
        self.w = 2 * np.pi * np.asarray(freqs)  # (2, K)
        self.amps = np.asarray(amps)
        self.phases = np.asarray(phases)
        self.scale = scale

    def _window(self, tau):
        r, T = self.ramp, self.duration
        w = np.ones_like(tau)
        w1 = np.zeros_like(tau)
        w2 = np.zeros_like(tau)
        up = tau < r
        down = tau > T - r
        s = tau[up] / r
        w[up], w1[up], w2[up] = _smooth(s), _smooth_d1(s) / r, _smooth_d2(s) / r ** 2
        s = (T - tau[down]) / r
        w[down], w1[down], w2[down] = _smooth(s), -_smooth_d1(s) / r, _smooth_d2(s) / r ** 2
        return w, w1, w2

    def evaluate(self, tau):
        tau = np.asarray(tau, float)
        w, w1, w2 = self._window(tau)
        comps = []
        for axis in range(2):
            arg = np.outer(tau, self.w[axis]) + self.phases[axis]
            a = self.amps[axis] * self.scale
            s0 = np.sin(arg) @ a
            s1 = np.cos(arg) @ (a * self.w[axis])
            s2 = -np.sin(arg) @ (a * self.w[axis] ** 2)
            comps.append((w * s0, w1 * s0 + w * s1, w2 * s0 + 2 * w1 * s1 + w * s2))
        out = []
        for k in range(3):
            vec = np.outer(comps[0][k], self.e1) + np.outer(comps[1][k], self.e2)
            out.append(vec + (self.origin if k == 0 else 0.0))
        return tuple(out)


class Motion:
    """Piecewise analytic motion plus a (slowly) rotating phone frame."""

    def __init__(self, pieces, yaw=0.0, tilt=0.0, yaw_rate=0.0):
        self.pieces = list(pieces)
        self.starts = np.concatenate([[0.0], np.cumsum([p.duration for p in self.pieces])])
        self.duration = float(self.starts[-1])
        self.yaw, self.tilt, self.yaw_rate = yaw, tilt, yaw_rate

    def evaluate(self, t):
        t = np.atleast_1d(np.asarray(t, float))
        idx = np.clip(np.searchsorted(self.starts, t, side="right") - 1, 0, len(self.pieces) - 1)
        p = np.empty((len(t), 3))
        v = np.empty_like(p)
        a = np.empty_like(p)
        for i in np.unique(idx):
            sel = idx == i
            tau = np.clip(t[sel] - self.starts[i], 0.0, self.pieces[i].duration)
            p[sel], v[sel], a[sel] = self.pieces[i].evaluate(tau)
        return p, v, a

    def position(self, t, chunk: int = 1 << 18):
        t = np.atleast_1d(np.asarray(t, float))
        out = np.empty((len(t), 3))
        for s in range(0, len(t), chunk):
            out[s:s + chunk] = self.evaluate(t[s:s + chunk])[0]
        return out

    def rotation(self, t) -> Rotation:
        """UCS->WCS rotation: yaw about world Z after a tilt about the phone X axis."""
        t = np.atleast_1d(np.asarray(t, float))
        yaw = self.yaw + self.yaw_rate * t
        return Rotation.from_euler("z", yaw) * Rotation.from_euler("x", self.tilt)

    def angular_rate_ucs(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, float))
        w = Rotation.from_euler("x", self.tilt).inv().apply([0.0, 0.0, self.yaw_rate])
        return np.tile(w, (len(t), 1))

    @property
    def constant_orientation(self) -> bool:
        return self.yaw_rate == 0.0


@dataclass
class Trajectory:
    t: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    orientation: Rotation
    motion: Motion
    rate: float

    @classmethod
    def sample(cls, motion: Motion, rate: float) -> "Trajectory":
        n = int(math.floor(motion.duration * rate + 1e-9)) + 1
        t = np.arange(n) / rate
        p, v, a = motion.evaluate(t)
        return cls(t, p, v, a, motion.rotation(t), motion, rate)

    def densify(self, rate: float) -> "Trajectory":
        return Trajectory.sample(self.motion, rate)

    @property
    def duration(self) -> float:
        return self.motion.duration

    def path_length(self) -> float:
        fine = np.linspace(0.0, self.duration, max(2000, int(self.duration * 200)))
        p = self.motion.position(fine)
        return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))

    def to_csv(self, path) -> None:
        q = self.orientation.as_quat()  # x, y, z, w
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "px", "py", "pz", "vx", "vy", "vz", "ax", "ay", "az",
                        "qw", "qx", "qy", "qz"])
            for i in range(len(self.t)):
                w.writerow([f"{self.t[i]:.6f}", *(f"{x:.9f}" for x in self.position[i]),
                            *(f"{x:.9f}" for x in self.velocity[i]),
                            *(f"{x:.9f}" for x in self.acceleration[i]),
                            *(f"{x:.9f}" for x in (q[i, 3], q[i, 0], q[i, 1], q[i, 2]))])


def _plane_basis(spec: MotionPatternSpec):
    az = spec.plane_azimuth
    if spec.plane == "horizontal":
        e1 = np.array([math.cos(az), math.sin(az), 0.0])
        e2 = np.array([-math.sin(az), math.cos(az), 0.0])
    else:
        e1 = np.array([math.cos(az), math.sin(az), 0.0])
        e2 = np.array([0.0, 0.0, 1.0])
    return e1, e2


def _rectangle_loop(center, e1, e2, d, speed, sense):
    """Square of side ``d`` starting and ending at the middle of its lower edge."""
    h = d / 2.0
    sgn = 1.0 if sense == "anticlockwise" else -1.0
    corners = [(0.0, -h), (sgn * h, -h), (sgn * h, h), (-sgn * h, h), (-sgn * h, -h), (0.0, -h)]
    pts = [center + x * e1 + y * e2 for x, y in corners]
    pieces = []
    for p0, p1 in zip(pts, pts[1:]):
        geom = _Line(p0, p1)
        pieces.append(_PathPiece(geom, _Quintic(geom.length, speed)))
    return pieces


def _circle_loop(center, e1, e2, d, speed, sense, duration=None):
    sweep = 2 * np.pi if sense == "anticlockwise" else -2 * np.pi
    geom = _Arc(center, e1, e2, d / 2.0, -np.pi / 2.0, sweep)
    profile = _Quintic(geom.length, speed)
    if duration is not None:
        profile = _Quintic(geom.length, _QUINTIC_PEAK * geom.length / duration)
    return [_PathPiece(geom, profile)]


def _random_shake(origin, e1, e2, spec: MotionPatternSpec):
    rng = np.random.default_rng(spec.seed)
    k = 3
    freqs = rng.uniform(1.0, 3.0, size=(2, k))
    amps = rng.uniform(0.5, 1.0, size=(2, k))
    phases = rng.uniform(0.0, 2 * np.pi, size=(2, k))
    piece = _RandomShake(origin, e1, e2, spec.duration, spec.ramp_time, freqs, amps, phases)
    tau = np.linspace(0.0, spec.duration, int(spec.duration * 2000) + 1)
    p, v, _ = piece.evaluate(tau)
    local = np.stack([(p - origin) @ e1, (p - origin) @ e2], axis=1)
    extent = float(np.max(np.ptp(local, axis=0)))
    vmax = float(np.max(np.linalg.norm(v, axis=1)))
    piece.scale = min(spec.amplitude / extent, spec.peak_speed / vmax)
    return piece


def build_motion(spec: MotionPatternSpec) -> Motion:
    validate_motion(spec)
    e1, e2 = _plane_basis(spec)
    if spec.pattern == "walk_path":
        pts = [np.array([x, y, 0.0]) for x, y in spec.waypoints]
        pieces = [_Rest(pts[0], spec.rest_before)]
        for p0, p1 in zip(pts, pts[1:]):
            geom = _Line(p0, p1)
            pieces.append(_PathPiece(geom, _Trapezoid(geom.length, spec.peak_speed, spec.ramp_time)))
        pieces.append(_Rest(pts[-1], spec.rest_after))
        return Motion(pieces, spec.yaw, spec.tilt, spec.yaw_rate)

    center = np.array([spec.center[0], spec.center[1], 0.0])
    d, speed = spec.amplitude, spec.peak_speed
    start = center - (d / 2.0) * e2
    loops = []
    if spec.pattern == "D_arbitrary":
        loops.append(_random_shake(start, e1, e2, spec))
    else:
        for sense in spec.senses:
            if spec.pattern in ("A_mixed", "C_rectangle"):
                rect = _rectangle_loop(center, e1, e2, d, speed, sense)
                loops.extend(rect)
            if spec.pattern == "A_mixed":
                # the circle takes as long as the square, so it runs at pi/4 of its speed
                loops.extend(_circle_loop(center, e1, e2, d, speed, sense,
                                          duration=sum(p.duration for p in rect)))
            elif spec.pattern == "B_circle":
                loops.extend(_circle_loop(center, e1, e2, d, speed, sense))
    pieces = [_Rest(start, spec.rest_before), *loops, _Rest(start, spec.rest_after)]
    return Motion(pieces, spec.yaw, spec.tilt, spec.yaw_rate)


def gen_trajectory(spec: MotionPatternSpec, world: WorldConfig) -> Trajectory:
    """Sample the scripted motion at the IMU rate (``.densify`` gives audio rate)."""
    return Trajectory.sample(build_motion(spec), world.imu_rate)
