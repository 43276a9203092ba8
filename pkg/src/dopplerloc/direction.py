"""Source direction from Doppler shifts and integrated phone motion.

The measured shift satisfies ``(v_a/f_a) f = lambda . v`` with ``lambda`` the
unit vector toward the source. In the world frame ``v(t) = v(t0) + w(t) + e t``
where ``w`` is the integrated acceleration and ``e`` an accelerometer bias, so
regressing on ``[w_x, w_y, 1, t]`` absorbs the unknown initial velocity and
bias into two nuisance coefficients.

Angle conventions: ``alpha`` lies in [-pi/2, 3pi/2) and is measured from the
world X axis; ``alpha_r`` lies in (-pi, pi] and is measured from the phone's
Y axis, positive toward the phone's X axis.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .imu import FrameEstimate, MotionIntegrals
from .scenario import WorldConfig

COND_LIMIT = 1e8
RANK_TOL = 1e-9
_COLUMNS = ("w_x", "w_y", "1", "t")


class DirectionError(ValueError):
    pass


class TiltWarning(UserWarning):
    pass


@dataclass
class DirectionEstimate:
    lambda_x: float
    lambda_y: float
    lambda_0: float
    lambda_1: float
    alpha: float
    residual_rms: float
    n: int
    alpha_r: float | None = None
    anchor_id: str = ""

    @property
    def norm(self) -> float:
        return math.hypot(self.lambda_x, self.lambda_y)


def _scaled_lstsq(X: np.ndarray, y: np.ndarray, names) -> np.ndarray:
    """Least squares by column-scaled normal equations, or SVD when ill-conditioned."""
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0.0] = 1.0
    Xs = X / scale
    s = np.linalg.svd(Xs, compute_uv=False)
    if s[-1] <= RANK_TOL * s[0]:
        _, _, vt = np.linalg.svd(Xs)
        null = vt[-1]
        bad = [names[i] for i in np.flatnonzero(np.abs(null) > 0.1)]
        raise DirectionError("rank deficient: motion is degenerate in " + ", ".join(bad))
    gram = Xs.T @ Xs
    if (s[0] / s[-1]) ** 2 <= COND_LIMIT:
        beta = linalg.cho_solve(linalg.cho_factor(gram), Xs.T @ y)
    else:
        beta = np.linalg.lstsq(Xs, y, rcond=None)[0]
    return beta / scale


def to_2d_angle(lambda_x: float, lambda_y: float) -> float:
    """Two-branch arcsine form, giving an angle in [-pi/2, 3pi/2)."""
    r = math.hypot(lambda_x, lambda_y)
    if r == 0.0:
        raise DirectionError("direction vector is zero")
    s = max(-1.0, min(1.0, lambda_y / r))
    if lambda_x >= 0.0:
        return math.asin(s)
    return math.pi - math.asin(s)


def normalize_angle(a: float) -> float:
    """Map to (-pi, pi]."""
    r = math.remainder(a, 2.0 * math.pi)
    return math.pi if r == -math.pi else r


def relative_angle(alpha: float, frame: FrameEstimate | float, tilt_tolerance: float = math.radians(10.0)) -> float:
    """Direction relative to the phone: ``pi/2 - alpha - alpha0`` in (-pi, pi].

    ``frame`` may be a FrameEstimate or a bare ``alpha0``. A phone tilted
    beyond ``tilt_tolerance`` raises a TiltWarning since ``alpha0`` is only
    meaningful for a horizontal phone.
    """
    if isinstance(frame, FrameEstimate):
        if frame.tilt > tilt_tolerance:
            warnings.warn(f"phone tilt {math.degrees(frame.tilt):.1f} deg exceeds tolerance", TiltWarning)
        alpha0 = frame.alpha0
    else:
        alpha0 = float(frame)
    return normalize_angle(math.pi / 2.0 - alpha - alpha0)


def regress_direction(integrals: MotionIntegrals, f_shift, world: WorldConfig, f_a: float,
                      window: tuple[float, float] | None = None, anchor_id: str = "") -> DirectionEstimate:
    """Fit ``[w_x w_y 1 t] . [lx ly l0 l1] = (v_a/f_a) f`` over ``window``.

    ``f_shift`` must be sampled at ``integrals.t``. ``t`` is taken relative to
    the window start so the intercept keeps its meaning.
    """
    t = integrals.t
    f = np.asarray(f_shift, float)
    if len(f) != len(t):
        raise DirectionError("f_shift is not aligned to the IMU timestamps")
    sel = np.ones(len(t), bool) if window is None else (t >= window[0]) & (t <= window[1])
    sel &= np.isfinite(f)
    if np.count_nonzero(sel) < 4:
        raise DirectionError("fewer than four samples in the regression window")
    tt = t[sel] - t[sel][0]
    X = np.column_stack([integrals.w_x[sel], integrals.w_y[sel], np.ones(len(tt)), tt])
    y = world.speed_of_sound / f_a * f[sel]
    beta = _scaled_lstsq(X, y, _COLUMNS)
    resid = (y - X @ beta) * f_a / world.speed_of_sound
    lx, ly, l0, l1 = (float(b) for b in beta)
    return DirectionEstimate(lx, ly, l0, l1, to_2d_angle(lx, ly),
                             float(np.sqrt(np.mean(resid ** 2))), int(len(tt)), anchor_id=anchor_id)


def align_to(t_target, t_source, values) -> np.ndarray:
    """Linear interpolation of an audio-rate series at IMU timestamps (NaN outside)."""
    return np.interp(t_target, t_source, values, left=np.nan, right=np.nan)


def detect_shake_window(integrals: MotionIntegrals, threshold: float = 0.5, smooth: float = 0.05,
                        pad: float = 0.05, min_start: float | None = None) -> tuple[float, float]:
    """Start and end of the shake from horizontal acceleration energy."""
    t = integrals.t
    mag = np.hypot(integrals.a_x, integrals.a_y)
    rate = 1.0 / float(np.median(np.diff(t)))
    n = max(1, int(round(smooth * rate)))
    energy = np.convolve(mag, np.ones(n) / n, mode="same")
    active = np.flatnonzero(energy > threshold)
    if len(active) == 0:
        raise DirectionError("no shake detected in the IMU stream")
    start = t[active[0]] - pad
    end = t[active[-1]] + pad
    if min_start is not None:
        start = max(start, min_start)
    return float(max(start, t[0])), float(min(end, t[-1]))


def direction_3d(velocity, f_shift, world: WorldConfig, f_a: float) -> np.ndarray:
    """Least-squares ``lambda`` from ``lambda . u[k] = (v_a/f_a) f[k]``."""
    u = np.asarray(velocity, float)
    y = world.speed_of_sound / f_a * np.asarray(f_shift, float)
    if u.ndim != 2 or u.shape[1] != 3 or len(u) != len(y):
        raise DirectionError("velocity must be (n, 3) and aligned with f_shift")
    return _scaled_lstsq(u, y, ("x", "y", "z"))


def simple_rectangle_direction(u, f, world: WorldConfig, f_a: float) -> float:
    """Maximum-likelihood angle from four rectangle legs.

    Leg speeds ``u`` run along +Y, +X, -Y, -X, so with ``k = f_a/v_a`` the
    noiseless shifts are ``k u (sin a, cos a, -sin a, -cos a)``. Equal-variance
    Gaussian errors on ``f`` make the likelihood a least-squares fit in ``a``.
    """
    u = np.asarray(u, float)
    f = np.asarray(f, float)
    if u.shape != (4,) or f.shape != (4,):
        raise DirectionError("need four leg speeds and four shifts")
    if np.any(u <= 0):
        raise DirectionError("leg speeds must be positive")
    if np.all(f == 0.0):
        raise DirectionError("all shifts are zero: source direction indeterminate")
    if f[0] * f[2] > 0 or f[1] * f[3] > 0:
        raise DirectionError("inconsistent signs: opposite legs must shift in opposite directions")
    k = f_a / world.speed_of_sound

    def cost(a):
        model = k * u * np.array([np.sin(a), np.cos(a), -np.sin(a), -np.cos(a)])
        return float(np.sum((f - model) ** 2))

    grid = np.linspace(-math.pi, math.pi, 721)
    best = grid[int(np.argmin([cost(a) for a in grid]))]
    step = grid[1] - grid[0]
    res = optimize.minimize_scalar(cost, bounds=(best - step, best + step), method="bounded",
                                   options={"xatol": 1e-12})
    return normalize_angle(float(res.x))


def write_direction_csv(path, rows) -> None:
    """``rows`` are (trial, DirectionEstimate) pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "anchor_id", "lambda_x", "lambda_y", "lambda_0", "lambda_1",
                    "alpha_deg", "alpha_r_deg", "residual_hz", "n"])
        for trial, est in rows:
            ar = "" if est.alpha_r is None else f"{math.degrees(est.alpha_r):.4f}"
            w.writerow([trial, est.anchor_id, f"{est.lambda_x:.9f}", f"{est.lambda_y:.9f}",
                        f"{est.lambda_0:.9f}", f"{est.lambda_1:.9f}", f"{math.degrees(est.alpha):.4f}",
                        ar, f"{est.residual_rms:.6f}", est.n])
