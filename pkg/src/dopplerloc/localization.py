"""Initial fix from opening angles and phase-based tracking.

An opening angle ``alpha_d`` seen over an anchor pair puts the phone on an
arc of radius ``D / (2 sin alpha_d)`` through both anchors. Each pair gives
two mirror-image arcs (one per side of the chord); without knowing which side
the phone is on both are kept and the distance to the nearer one is used.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numba
import numpy as np
from scipy import optimize

from .scenario import AnchorNode, WorldConfig

DEFAULT_GRID = 0.25
DEFAULT_XTOL = 0.01
DEFAULT_STEP_RADIUS = 0.8
DEGENERATE_ANGLE = math.radians(1.0)


class GeometryError(ValueError):
    pass


class DegenerateGeometryWarning(UserWarning):
    pass


def _cross(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def opening_angle(alpha_i: float, alpha_j: float, tolerance: float = DEGENERATE_ANGLE) -> float:
    """``|alpha_i - alpha_j|`` wrapped into [0, pi]; near 0 or pi is flagged."""
    d = abs(math.remainder(alpha_i - alpha_j, 2.0 * math.pi))
    if d < tolerance or d > math.pi - tolerance:
        warnings.warn(f"opening angle {math.degrees(d):.2f} deg is nearly collinear",
                      DegenerateGeometryWarning)
    return d


def side_from_angles(alpha_i: float, alpha_j: float) -> int:
    """Side of the chord A_i -> A_j the phone is on, from the signed angle difference.

    Bearings increase counter-clockwise, so A_i appearing counter-clockwise of
    A_j puts the phone to the right of the chord (side -1).
    """
    return -1 if math.remainder(alpha_i - alpha_j, 2.0 * math.pi) > 0 else 1


def subtended_angle(p, a, b) -> np.ndarray:
    """Angle A P B for points ``p`` (n, 2); the brute-force reference."""
    p = np.atleast_2d(np.asarray(p, float))
    u = np.asarray(a, float) - p
    v = np.asarray(b, float) - p
    return np.abs(np.arctan2(_cross(u, v), np.einsum("ij,ij->i", u, v)))


@dataclass
class ArcConstraint:
    a: np.ndarray
    b: np.ndarray
    alpha_d: float
    radius: float
    centers: dict          # side (+1/-1) -> circle center whose arc lies on that side
    sides: tuple[int, ...] = (1, -1)
    pair: tuple[str, str] = ("", "")

    @property
    def chord(self) -> float:
        return float(np.linalg.norm(self.b - self.a))

    def center_side(self, side: int) -> int:
        """Side of the chord the circle center lies on for the arc on ``side`` (0 = on chord)."""
        c = self.centers[side]
        s = _cross(self.b - self.a, c - self.a)
        return 0 if abs(s) < 1e-12 * self.chord ** 2 else int(np.sign(s))

    def arc_distance(self, points, side: int) -> np.ndarray:
        """Distance from ``points`` to the arc lying on ``side`` of the chord."""
        p = np.atleast_2d(np.asarray(points, float))
        c = self.centers[side]
        rel = p - c
        r = np.linalg.norm(rel, axis=1)
        safe = np.where(r > 0, r, 1.0)
        proj = c + rel * (self.radius / safe)[:, None]
        proj[r == 0] = self.a
        on_arc = side * _cross(self.b - self.a, proj - self.a) >= 0
        radial = np.abs(r - self.radius)
        ends = np.minimum(np.linalg.norm(p - self.a, axis=1), np.linalg.norm(p - self.b, axis=1))
        return np.where(on_arc, radial, ends)

    def distance(self, points) -> np.ndarray:
        return np.min([self.arc_distance(points, s) for s in self.sides], axis=0)

    def sample(self, side: int, n: int = 100) -> np.ndarray:
        """Points strictly inside the arc on ``side``."""
        c = self.centers[side]
        t0 = math.atan2(*(self.a - c)[::-1])
        t1 = math.atan2(*(self.b - c)[::-1])
        sweep = math.remainder(t1 - t0, 2.0 * math.pi)
        mid = t0 + sweep / 2.0
        mid_pt = c + self.radius * np.array([math.cos(mid), math.sin(mid)])
        if side * _cross(self.b - self.a, mid_pt - self.a) < 0:
            sweep = sweep - math.copysign(2.0 * math.pi, sweep)
        ang = t0 + sweep * np.linspace(0.0, 1.0, n + 2)[1:-1]
        return c + self.radius * np.column_stack([np.cos(ang), np.sin(ang)])

    def normal(self, point) -> np.ndarray:
        """Unit gradient of the distance to the nearer arc at ``point``."""
        p = np.asarray(point, float)
        side = min(self.sides, key=lambda s: float(self.arc_distance(p[None], s)[0]))
        c = self.centers[side]
        rel = p - c
        r = float(np.linalg.norm(rel))
        proj = c + rel * (self.radius / r) if r > 0 else self.a
        if side * _cross(self.b - self.a, proj - self.a) >= 0 and r > 0:
            return rel / r
        end = self.a if np.linalg.norm(p - self.a) <= np.linalg.norm(p - self.b) else self.b
        g = p - end
        n = float(np.linalg.norm(g))
        return g / n if n > 0 else np.zeros(2)


def circle_from_pair(a, b, alpha_d: float, side: int | None = None,
                     pair: tuple[str, str] = ("", ""), tolerance: float = 1e-6) -> ArcConstraint:
    """Arc(s) of points subtending ``alpha_d`` over chord ``a b``.

    An acute angle puts the circle center on the phone's side of the chord, an
    obtuse one on the far side, a right angle on the chord midpoint.
    ``side`` (+1 = left of a -> b) keeps only one arc when the side is known.
    """
    a = np.asarray(a, float)[:2]
    b = np.asarray(b, float)[:2]
    d = float(np.linalg.norm(b - a))
    if d == 0.0:
        raise GeometryError("anchors coincide")
    if not 0.0 < alpha_d < math.pi or math.sin(alpha_d) < tolerance:
        raise GeometryError(f"degenerate opening angle {math.degrees(alpha_d):.4f} deg")
    radius = d / (2.0 * math.sin(alpha_d))
    mid = (a + b) / 2.0
    normal = np.array([-(b - a)[1], (b - a)[0]]) / d
    # signed offset of the center along the left normal, for an arc on the left side
    offset = (d / 2.0) / math.tan(alpha_d)
    centers = {1: mid + offset * normal, -1: mid - offset * normal}
    sides = (1, -1) if side is None else (int(side),)
    return ArcConstraint(a, b, float(alpha_d), radius, centers, sides, pair)


def arcs_from_angles(anchors: Sequence[AnchorNode], alphas: Sequence[float],
                     use_side: bool = True) -> list[ArcConstraint]:
    """All pairwise arcs from per-anchor bearings measured in one frame."""
    arcs = []
    for i, j in combinations(range(len(anchors)), 2):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateGeometryWarning)
            ad = opening_angle(alphas[i], alphas[j])
        if math.sin(ad) < 1e-6:
            continue
        side = side_from_angles(alphas[i], alphas[j]) if use_side else None
        arcs.append(circle_from_pair(anchors[i].position, anchors[j].position, ad, side,
                                     (anchors[i].id, anchors[j].id)))
    return arcs


@dataclass
class PositionFix:
    position: np.ndarray
    objective: float
    residuals: np.ndarray
    t: float = 0.0
    n_locked: int = 0
    flags: dict = field(default_factory=dict)

    @property
    def x(self) -> float:
        return float(self.position[0])

    @property
    def y(self) -> float:
        return float(self.position[1])


class _ArcBundle:
    """All arcs packed into arrays so the objective is one vectorised pass.

    Each constraint occupies two slots (its two sides, or the same side twice).
    """

    def __init__(self, arcs: Sequence[ArcConstraint]):
        slots = [(arc, arc.sides[k % len(arc.sides)]) for arc in arcs for k in range(2)]
        self.a = np.array([arc.a for arc, _ in slots])
        self.b = np.array([arc.b for arc, _ in slots])
        self.c = np.array([arc.centers[s] for arc, s in slots])
        self.r = np.array([arc.radius for arc, _ in slots])
        self.side = np.array([s for _, s in slots], float)
        self.chord = self.b - self.a

    def __call__(self, points) -> np.ndarray:
        p = np.ascontiguousarray(np.atleast_2d(np.asarray(points, float)))
        return _arc_sum(p, self.a, self.b, self.c, self.r, self.side)


@numba.njit(cache=True)
def _arc_sum(p, a, b, c, r, side):
    m = p.shape[0]
    k = a.shape[0]
    out = np.zeros(m)
    for i in range(m):
        px = p[i, 0]
        py = p[i, 1]
        total = 0.0
        for j in range(0, k, 2):
            best = np.inf
            for s in range(j, j + 2):
                rx = px - c[s, 0]
                ry = py - c[s, 1]
                rr = math.sqrt(rx * rx + ry * ry)
                d = np.inf
                if rr > 0.0:
                    qx = c[s, 0] + rx * r[s] / rr - a[s, 0]
                    qy = c[s, 1] + ry * r[s] / rr - a[s, 1]
                    ex = b[s, 0] - a[s, 0]
                    ey = b[s, 1] - a[s, 1]
                    if side[s] * (ex * qy - ey * qx) >= 0.0:
                        d = abs(rr - r[s])
                if d == np.inf:
                    da = math.hypot(px - a[s, 0], py - a[s, 1])
                    db = math.hypot(px - b[s, 0], py - b[s, 1])
                    d = min(da, db)
                if d < best:
                    best = d
            total += best
        out[i] = total
    return out


def arc_objective(arcs: Sequence[ArcConstraint], points) -> np.ndarray:
    """Summed distance from each of ``points`` to every constraint."""
    return _ArcBundle(arcs)(points)


def _grid_minima(values: np.ndarray) -> np.ndarray:
    """Indices of cells no larger than their 8 neighbours."""
    padded = np.pad(values, 1, constant_values=np.inf)
    core = padded[1:-1, 1:-1]
    is_min = np.ones_like(core, bool)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            if dx or dy:
                is_min &= core <= padded[1 + dx:padded.shape[0] - 1 + dx, 1 + dy:padded.shape[1] - 1 + dy]
    return np.argwhere(is_min)


def min_directional_slope(arcs: Sequence[ArcConstraint], point, directions: int = 180) -> float:
    """Smallest mean rate at which the arc distances change when leaving ``point``.

    Computed as ``min_u mean_i |n_i . u|`` from the arc normals; near zero
    means some direction barely moves off any arc, as when the anchors and
    the phone lie close to one circle. Random normals give about 2/pi.
    """
    normals = np.array([arc.normal(point) for arc in arcs])
    ang = np.linspace(0.0, math.pi, directions, endpoint=False)
    u = np.column_stack([np.cos(ang), np.sin(ang)])
    return float(np.min(np.mean(np.abs(normals @ u.T), axis=0)))


def locate_initial(arcs: Sequence[ArcConstraint], room: tuple[float, float, float, float],
                   grid: float = DEFAULT_GRID, xtol: float = DEFAULT_XTOL,
                   ambiguity_tol: float = 0.05, degeneracy_slope: float = 0.1,
                   basins: int = 3) -> PositionFix:
    """Minimise the summed distance to all arcs over ``room`` = (xmin, xmax, ymin, ymax).

    A coarse grid picks candidate basins, each refined by Nelder-Mead.
    ``flags['ambiguous']`` is set when a second basin at least 1 m away comes
    within ``2 * ambiguity_tol`` of the best objective; ``flags['degenerate']``
    when ``min_directional_slope`` falls below ``degeneracy_slope``.
    """
    if len(arcs) < 3:
        raise GeometryError("need at least three arcs (three anchors)")
    xmin, xmax, ymin, ymax = room
    xs = np.arange(xmin, xmax + grid / 2.0, grid)
    ys = np.arange(ymin, ymax + grid / 2.0, grid)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    bundle = _ArcBundle(arcs)
    flat = np.column_stack([gx.ravel(), gy.ravel()])
    values = bundle(flat).reshape(gx.shape)
    cand = _grid_minima(values)
    order = np.argsort(values[cand[:, 0], cand[:, 1]], kind="stable")
    cand = cand[order][:basins]

    def f(p):
        return float(bundle(p)[0])

    refined = []
    for i, j in cand:
        res = optimize.minimize(f, np.array([xs[i], ys[j]]), method="Nelder-Mead",
                                options={"xatol": xtol / 10.0, "fatol": 1e-9,
                                         "initial_simplex": np.array([[xs[i], ys[j]],
                                                                      [xs[i] + grid / 2, ys[j]],
                                                                      [xs[i], ys[j] + grid / 2]])})
        refined.append((float(res.fun), np.asarray(res.x, float)))
    refined.sort(key=lambda r: r[0])
    best_val, best = refined[0]
    second = next((r for r in refined[1:] if np.linalg.norm(r[1] - best) > 1.0), None)
    ambiguous = second is not None and second[0] - best_val < 2.0 * ambiguity_tol
    slope = min_directional_slope(arcs, best)
    residuals = np.array([float(arc.distance(best[None])[0]) for arc in arcs])
    flags = {"ambiguous": bool(ambiguous), "degenerate": bool(slope < degeneracy_slope),
             "min_slope": slope, "second_objective": None if second is None else second[0]}
    return PositionFix(best, float(residuals.sum()), residuals, 0.0, 0, flags)


# --------------------------------------------------------------------------- tracking

def anchor_heights(anchors: Sequence[AnchorNode], default: float | None = None) -> np.ndarray:
    return np.array([a.height if default is None else default for a in anchors], float)


def slant_distance(point, anchors: Sequence[AnchorNode], heights) -> np.ndarray:
    """3D distance from a phone at ``point`` (x, y) to each anchor."""
    p = np.asarray(point, float)
    xy = np.array([[a.x, a.y] for a in anchors])
    return np.sqrt(np.sum((xy - p[:2]) ** 2, axis=1) + np.asarray(heights, float) ** 2)


def track_step(prev: PositionFix, delta_phi, anchors: Sequence[AnchorNode], world: WorldConfig,
               heights=None, locked=None, t: float | None = None,
               search_radius: float = DEFAULT_STEP_RADIUS, xtol: float = 1e-4) -> PositionFix:
    """Advance a fix by per-anchor phase changes.

    The target range to anchor ``i`` is ``L_i - v_a/(2 pi f_i) dphi_i`` with
    ``L_i`` the slant range from the previous fix. The new position minimises
    the summed absolute range mismatch within ``search_radius`` of ``prev``.
    With fewer than two locked anchors the position is held and the next
    search radius is widened (``flags['next_radius']``).
    """
    heights = anchor_heights(anchors) if heights is None else np.asarray(heights, float)
    dphi = np.asarray(delta_phi, float)
    locked = np.ones(len(anchors), bool) if locked is None else np.asarray(locked, bool)
    locked = locked & np.isfinite(dphi)
    t = prev.t if t is None else t
    n_locked = int(np.count_nonzero(locked))
    if n_locked < 2:
        return PositionFix(prev.position.copy(), prev.objective, np.full(len(anchors), np.nan), t, n_locked,
                           {"dead_reckon": True, "next_radius": search_radius * 2.0})
    freqs = np.array([a.frequency for a in anchors])
    L_prev = slant_distance(prev.position, anchors, heights)
    target = L_prev - world.speed_of_sound / (2.0 * math.pi * freqs) * np.where(locked, dphi, 0.0)
    sub = [a for a, ok in zip(anchors, locked) if ok]
    h_sub = heights[locked]
    tgt = target[locked]
    start = np.asarray(prev.position, float)[:2]

    def cost(p):
        step = np.linalg.norm(p - start)
        over = max(0.0, step - search_radius)
        return float(np.sum(np.abs(tgt - slant_distance(p, sub, h_sub)))) + 1e3 * over

    # a Gauss-Newton guess on the squared residuals gives Nelder-Mead a good start
    guess = start.copy()
    xy = np.array([[a.x, a.y] for a in sub])
    for _ in range(3):
        d = slant_distance(guess, sub, h_sub)
        J = (guess - xy) / d[:, None]
        delta = np.linalg.lstsq(J, tgt - d, rcond=None)[0]
        guess = guess + delta
    if np.linalg.norm(guess - start) > search_radius:
        guess = start
    res = optimize.minimize(cost, guess, method="Nelder-Mead",
                            options={"xatol": xtol, "fatol": 1e-10,
                                     "initial_simplex": np.array([guess, guess + [0.02, 0.0], guess + [0.0, 0.02]])})
    pos = np.asarray(res.x, float)
    resid = np.full(len(anchors), np.nan)
    resid[locked] = np.abs(tgt - slant_distance(pos, sub, h_sub))
    return PositionFix(pos, float(np.nansum(resid)), resid, t, n_locked,
                       {"dead_reckon": False, "next_radius": search_radius})


def write_fix_csv(path, fixes: Sequence[PositionFix]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "objective", "n_locked"])
        for fx in fixes:
            w.writerow([f"{fx.t:.4f}", f"{fx.x:.6f}", f"{fx.y:.6f}", f"{fx.objective:.6f}", fx.n_locked])
