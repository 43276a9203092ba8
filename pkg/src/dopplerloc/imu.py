"""Accelerometer/gyroscope synthesis and the gravity-aligned world frame.

Each IMU sample is the mean of the true signal over its output interval
``[t_i, t_i + T)``, the way a sensor with an output-data-rate filter reports it.
Summing ``T * a`` over samples therefore telescopes to the exact change in
velocity, which keeps noiseless round trips exact.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .motion import Trajectory

GRAVITY = 9.80665
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


class FrameError(ValueError):
    pass


@dataclass
class ImuStream:
    t: np.ndarray
    accel: np.ndarray  # (n, 3) UCS specific force, m/s^2
    gyro: np.ndarray   # (n, 3) UCS angular rate, rad/s

    def __len__(self) -> int:
        return len(self.t)

    @property
    def dt(self) -> np.ndarray:
        """Interval length T[i] from sample i to sample i+1 (last repeats)."""
        d = np.diff(self.t)
        return np.append(d, d[-1] if len(d) else 0.0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "ax", "ay", "az", "gx", "gy", "gz"])
            for i in range(len(self.t)):
                w.writerow([f"{self.t[i]:.6f}", *(f"{x:.9f}" for x in self.accel[i]),
                            *(f"{x:.9f}" for x in self.gyro[i])])

    @classmethod
    def from_csv(cls, path) -> "ImuStream":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1:4], data[:, 4:7])


@dataclass
class FrameEstimate:
    t: np.ndarray
    rotation: Rotation     # UCS -> estimated WCS at each sample time
    alpha0: float          # angle from UCS X to WCS X, valid when the phone is horizontal
    gravity: float         # measured specific-force magnitude during initialisation
    tilt: float            # angle between phone Z and the estimated vertical

    def matrices(self) -> np.ndarray:
        return self.rotation.as_matrix()


@dataclass
class MotionIntegrals:
    t: np.ndarray
    a_x: np.ndarray
    a_y: np.ndarray
    w_x: np.ndarray
    w_y: np.ndarray
    T: np.ndarray

    def __len__(self) -> int:
        return len(self.t)


def synthesize_imu(traj: Trajectory, bias=(0.0, 0.0, 0.0), noise_std: float = 0.0,
                   gyro_noise_std: float = 0.0, gyro_bias=(0.0, 0.0, 0.0),
                   rng: np.random.Generator | None = None,
                   bias_onset: float = 0.0) -> ImuStream:
    """Accelerometer and gyro readings in the phone frame.

    ``bias`` is a constant accelerometer error expressed in the world frame,
    present from ``bias_onset`` on. A bias already present while the frame is
    initialised is indistinguishable from tilt and gets calibrated away, so
    experiments switch it on after the static window.
    """
    motion = traj.motion
    T = 1.0 / traj.rate
    t = traj.t[:-1]
    bias = np.where((t >= bias_onset)[:, None], np.asarray(bias, float), 0.0)
    up = np.array([0.0, 0.0, GRAVITY])
    if motion.constant_orientation:
        _, v, _ = motion.evaluate(traj.t)
        mean_acc = np.diff(v, axis=0) / T
        accel = motion.rotation(t).inv().apply(mean_acc + up + bias)
    else:
        # quadrature over sub-intervals split at piece boundaries, where jerk jumps
        knots = motion.starts[(motion.starts > t[0]) & (motion.starts < traj.t[-1])]
        edges = np.union1d(traj.t, knots)
        owner = np.searchsorted(traj.t, edges[:-1], side="right") - 1
        lo, width = edges[:-1], np.diff(edges)
        sub = np.zeros((len(lo), 3))
        for node, weight in zip(_GL_NODES, _GL_WEIGHTS):
            tq = lo + width * (node + 1.0) / 2.0
            _, _, a = motion.evaluate(tq)
            sub += (0.5 * weight * width)[:, None] * motion.rotation(tq).inv().apply(a + up + bias[owner])
        accel = np.zeros((len(t), 3))
        np.add.at(accel, owner, sub)
        accel /= T
    gyro = motion.angular_rate_ucs(t) + np.asarray(gyro_bias, float)
    if noise_std > 0 or gyro_noise_std > 0:
        rng = rng or np.random.default_rng()
        accel = accel + rng.normal(0.0, noise_std, size=accel.shape)
        gyro = gyro + rng.normal(0.0, gyro_noise_std, size=gyro.shape)
    return ImuStream(t.copy(), accel, gyro)


def estimate_wcs_frame(imu: ImuStream, init_window: float = 0.5, heading: float = 0.0,
                       static_threshold: float = 0.3) -> FrameEstimate:
    """Gravity-aligned frame from a static start, then propagated by the gyro.

    The world Z axis is the mean specific-force direction over ``init_window``.
    The world X axis is the phone X axis projected onto the horizontal plane
    and turned by ``heading`` (the compass is never consulted), so
    ``alpha0 == heading`` when the phone lies flat.
    """
    t = imu.t
    init = t < t[0] + init_window
    if np.count_nonzero(init) < 2:
        raise FrameError("initialization window holds fewer than two samples")
    window = imu.accel[init]
    mean = window.mean(axis=0)
    spread = float(np.max(np.linalg.norm(window - mean, axis=1)))
    if spread > static_threshold:
        raise FrameError(f"initialization not static: specific force varies by {spread:.3f} m/s^2")
    g = float(np.linalg.norm(mean))
    z = mean / g
    x_phone = np.array([1.0, 0.0, 0.0])
    x_p = x_phone - z * (x_phone @ z)
    if np.linalg.norm(x_p) < 1e-6:
        x_phone = np.array([0.0, 1.0, 0.0])
        x_p = x_phone - z * (x_phone @ z)
    x_p /= np.linalg.norm(x_p)
    y_p = np.cross(z, x_p)
    x_w = math.cos(heading) * x_p + math.sin(heading) * y_p
    y_w = np.cross(z, x_w)
    r0 = Rotation.from_matrix(np.vstack([x_w, y_w, z]))

    dt = imu.dt
    steps = Rotation.from_rotvec(imu.gyro * dt[:, None])
    quats = np.empty((len(t), 4))
    current = r0
    for i in range(len(t)):
        quats[i] = current.as_quat()
        current = current * steps[i]
        # quaternion renormalisation keeps the matrix orthonormal
        current = Rotation.from_quat(current.as_quat())
    tilt = math.acos(min(1.0, abs(float(z[2]))))
    return FrameEstimate(t.copy(), Rotation.from_quat(quats), float(heading), g, tilt)


def true_frame(traj: Trajectory, imu: ImuStream, heading: float = 0.0) -> FrameEstimate:
    """Frame built from ground-truth orientation, with WCS X turned by ``heading``
    from the world X axis (handy for isolating sensor errors)."""
    turn = Rotation.from_euler("z", -heading)
    rot = turn * traj.motion.rotation(imu.t)
    yaw0 = float(traj.motion.rotation([0.0]).as_euler("ZYX")[0, 0])
    alpha0 = math.remainder(heading - yaw0, 2 * math.pi)
    return FrameEstimate(imu.t.copy(), rot, alpha0, GRAVITY, abs(traj.motion.tilt))


def integrate_motion(imu: ImuStream, frame: FrameEstimate) -> MotionIntegrals:
    """Gravity-removed world accelerations and their running sums.

    ``w[k] = sum_{i<k} T[i] a[i]``; no assumption is made about the initial
    velocity. Each sample is rotated with the frame at its interval midpoint.
    """
    if len(frame.t) != len(imu.t):
        raise FrameError("frame does not cover the IMU stream")
    dt = imu.dt
    half = Rotation.from_rotvec(imu.gyro * (dt / 2.0)[:, None])
    a_wcs = (frame.rotation * half).apply(imu.accel)
    a_wcs[:, 2] -= frame.gravity
    w_x = np.concatenate([[0.0], np.cumsum(dt[:-1] * a_wcs[:-1, 0])])
    w_y = np.concatenate([[0.0], np.cumsum(dt[:-1] * a_wcs[:-1, 1])])
    return MotionIntegrals(imu.t.copy(), a_wcs[:, 0], a_wcs[:, 1], w_x, w_y, dt)
