"""World geometry, anchor layouts, channel plans and scenario configs.

Scenario files are YAML with units spelled out in the field names, for example::

    world:
      speed_of_sound_mps: 340
      audio_rate_hz: 44100
    anchors:
      - {id: A1, x_m: 0, y_m: -3, frequency_hz: 17000}
    motion:
      pattern: A_mixed
      senses: caca

See ``README.md`` for the full schema.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np
import yaml

MIN_ANCHOR_FREQUENCY = 17000.0
MAX_HAND_SPEED = 2.0
MAX_SHAKE_AMPLITUDE = 0.15

PATTERNS = ("A_mixed", "B_circle", "C_rectangle", "D_arbitrary", "walk_path")
SHAKE_PATTERNS = PATTERNS[:4]


class ScenarioError(ValueError):
    """Raised when a scenario does not parse or violates an invariant."""


@dataclass(frozen=True)
class WorldConfig:
    speed_of_sound: float = 340.0
    audio_rate: float = 44100.0
    imu_rate: float = 200.0
    noise_floor_dbfs: float = -math.inf
    max_speed: float = MAX_HAND_SPEED

    @property
    def sample_period(self) -> float:
        return 1.0 / self.audio_rate


@dataclass(frozen=True)
class AnchorNode:
    """A fixed speaker emitting a constant tone.

    ``height`` is the anchor height relative to the plane the phone moves in.
    ``azimuth``/``elevation`` give the facing direction used by the optional
    directivity model; ``directivity`` is the cardioid exponent (0 = omni).
    """

    id: str
    x: float
    y: float
    frequency: float
    height: float = 0.0
    amplitude_dbfs: float = -20.0
    azimuth: float = 0.0
    elevation: float = 0.0
    directivity: float = 0.0
    source_velocity: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.height])

    @property
    def amplitude(self) -> float:
        """Linear peak amplitude at 1 m."""
        return 10.0 ** (self.amplitude_dbfs / 20.0)

    def wavelength(self, world: WorldConfig) -> float:
        return world.speed_of_sound / self.frequency


@dataclass(frozen=True)
class MotionPatternSpec:
    pattern: str = "A_mixed"
    senses: tuple[str, ...] = ("clockwise", "anticlockwise", "clockwise", "anticlockwise")
    amplitude: float = 0.10
    peak_speed: float = 1.0
    duration: float = 4.0
    seed: int = 0
    plane: str = "horizontal"
    plane_azimuth: float = 0.0
    center: tuple[float, float] = (0.0, 0.0)
    yaw: float = 0.0
    tilt: float = 0.0
    yaw_rate: float = 0.0
    waypoints: tuple[tuple[float, float], ...] = ()
    rest_before: float = 0.6
    rest_after: float = 0.3
    ramp_time: float = 0.5

    @property
    def is_shake(self) -> bool:
        return self.pattern in SHAKE_PATTERNS


@dataclass(frozen=True)
class ChannelPlan:
    band_low: float
    band_high: float
    pass_band: float
    centers: tuple[float, ...]

    @property
    def capacity(self) -> int:
        return len(self.centers)


@dataclass(frozen=True)
class Interferer:
    """A same-frequency second source standing in for a reflection."""

    anchor: AnchorNode
    primary_id: str
    relative_volume: float


@dataclass(frozen=True)
class Scene:
    world: WorldConfig = field(default_factory=WorldConfig)
    anchors: tuple[AnchorNode, ...] = ()
    motion: MotionPatternSpec = field(default_factory=MotionPatternSpec)
    pass_band: float | None = None
    interferers: tuple[Interferer, ...] = ()
    room: tuple[float, float, float, float] | None = None
    text: str = ""

    def anchor(self, anchor_id: str) -> AnchorNode:
        for a in self.anchors:
            if a.id == anchor_id:
                return a
        raise KeyError(anchor_id)

    def effective_pass_band(self) -> float:
        if self.pass_band is not None:
            return self.pass_band
        f = max((a.frequency for a in self.anchors), default=19000.0)
        return 2.0 * self.world.max_speed * f / self.world.speed_of_sound

    def search_room(self, margin: float = 8.0) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) searched by the initial-position solver."""
        if self.room is not None:
            return self.room
        xs = [a.x for a in self.anchors] or [0.0]
        ys = [a.y for a in self.anchors] or [0.0]
        return (min(xs) - margin, max(xs) + margin, min(ys) - margin, max(ys) + margin)


def max_doppler_shift(frequency: float, speed: float, speed_of_sound: float) -> float:
    return speed * frequency / speed_of_sound


def plan_channels(band_low: float, band_high: float, v_max: float,
                  v_a: float, f_a: float) -> ChannelPlan:
    """Pack Doppler-safe channels into ``[band_low, band_high]``.

    Each channel passes ``2 * v_max * f_a / v_a`` (twice the largest Doppler
    shift). Capacity is the band width divided by the pass band, rounded to
    the nearest whole channel; centers are spread evenly across the band.
    """
    if band_high <= band_low:
        raise ScenarioError("band_high must exceed band_low")
    if v_max <= 0 or v_a <= 0 or f_a <= 0:
        raise ScenarioError("zero pass band: v_max, v_a and f_a must be positive")
    pass_band = 2.0 * max_doppler_shift(f_a, v_max, v_a)
    width = band_high - band_low
    capacity = int(math.floor(width / pass_band + 0.5))
    if capacity == 0:
        raise ScenarioError(
            f"band too narrow: {width:.1f} Hz cannot hold one {pass_band:.1f} Hz channel")
    spacing = width / capacity
    centers = tuple(band_low + spacing * (i + 0.5) for i in range(capacity))
    return ChannelPlan(band_low, band_high, pass_band, centers)


def bound_angle_error(d: float, distance: float) -> tuple[float, float]:
    """Worst-case bearing error and position error caused by a shake of range ``d``.

    Returns ``(alpha_e, d_e)`` with ``alpha_e = asin(d/L)`` in radians and
    ``d_e = 2 L sin(alpha_e / 2)`` in metres.
    """
    if d < 0:
        raise ScenarioError("shake range must be non-negative")
    if d >= distance:
        raise ScenarioError("shake range exceeds distance")
    alpha_e = math.asin(d / distance)
    return alpha_e, 2.0 * distance * math.sin(alpha_e / 2.0)


# --- config parsing -------------------------------------------------------

_WORLD_KEYS = {
    "speed_of_sound_mps": "speed_of_sound",
    "audio_rate_hz": "audio_rate",
    "imu_rate_hz": "imu_rate",
    "noise_floor_dbfs": "noise_floor_dbfs",
    "max_speed_mps": "max_speed",
}
_ANCHOR_KEYS = {
    "id": "id",
    "x_m": "x",
    "y_m": "y",
    "height_m": "height",
    "frequency_hz": "frequency",
    "amplitude_dbfs": "amplitude_dbfs",
    "azimuth_deg": "azimuth",
    "elevation_deg": "elevation",
    "directivity": "directivity",
    "source_velocity_mps": "source_velocity",
}
_MOTION_KEYS = {
    "pattern": "pattern",
    "senses": "senses",
    "amplitude_m": "amplitude",
    "peak_speed_mps": "peak_speed",
    "duration_s": "duration",
    "seed": "seed",
    "plane": "plane",
    "plane_azimuth_deg": "plane_azimuth",
    "center_m": "center",
    "yaw_deg": "yaw",
    "tilt_deg": "tilt",
    "yaw_rate_dps": "yaw_rate",
    "waypoints_m": "waypoints",
    "rest_before_s": "rest_before",
    "rest_after_s": "rest_after",
    "ramp_time_s": "ramp_time",
}
_DEGREE_FIELDS = {"azimuth", "elevation", "plane_azimuth", "yaw", "tilt", "yaw_rate"}


def _convert(section: str, raw: Any, keys: dict[str, str]) -> dict[str, Any]:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ScenarioError(f"{section}: expected a mapping, got {type(raw).__name__}")
    out = {}
    for key, value in raw.items():
        if key not in keys:
            raise ScenarioError(f"{section}: unknown field '{key}'")
        name = keys[key]
        if name in _DEGREE_FIELDS:
            value = math.radians(float(value))
        out[name] = value
    return out


def parse_senses(value: Any) -> tuple[str, ...]:
    """Accept ``"caca"`` shorthand or a list of ``clockwise``/``anticlockwise``."""
    if isinstance(value, str):
        letters = {"c": "clockwise", "a": "anticlockwise"}
        try:
            return tuple(letters[ch] for ch in value.lower())
        except KeyError as exc:
            raise ScenarioError(f"motion.senses: bad letter {exc} in '{value}'") from None
    senses = tuple(str(s) for s in value)
    for s in senses:
        if s not in ("clockwise", "anticlockwise"):
            raise ScenarioError(f"motion.senses: '{s}' is not clockwise/anticlockwise")
    return senses


def load_scenario(config_text: str) -> Scene:
    """Parse a YAML scenario and validate every invariant."""
    try:
        doc = yaml.safe_load(config_text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ScenarioError(f"parse failure{where}: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(doc, dict):
        raise ScenarioError("parse failure: top level must be a mapping")
    unknown = set(doc) - {"world", "anchors", "motion", "channel", "interferers", "room"}
    if unknown:
        raise ScenarioError(f"unknown section(s): {', '.join(sorted(unknown))}")

    world = WorldConfig(**_number_fields(_convert("world", doc.get("world"), _WORLD_KEYS)))

    anchors = []
    for i, raw in enumerate(doc.get("anchors") or []):
        fields = _convert(f"anchors[{i}]", raw, _ANCHOR_KEYS)
        for req in ("x", "y", "frequency"):
            if req not in fields:
                raise ScenarioError(f"anchors[{i}]: missing field '{_key_for(req)}'")
        fields.setdefault("id", f"A{i + 1}")
        fields["id"] = str(fields["id"])
        anchors.append(AnchorNode(**_number_fields(fields, skip={"id"})))

    mfields = _convert("motion", doc.get("motion"), _MOTION_KEYS)
    if "senses" in mfields:
        mfields["senses"] = parse_senses(mfields["senses"])
    if "center" in mfields:
        mfields["center"] = tuple(float(c) for c in mfields["center"])
    if "waypoints" in mfields:
        mfields["waypoints"] = tuple(tuple(float(c) for c in p) for p in mfields["waypoints"])
    for k in ("pattern", "plane"):
        if k in mfields:
            mfields[k] = str(mfields[k])
    motion = MotionPatternSpec(**_number_fields(
        mfields, skip={"senses", "center", "waypoints", "pattern", "plane", "seed"}))
    if "seed" in mfields:
        motion = replace(motion, seed=int(mfields["seed"]))

    channel = doc.get("channel") or {}
    pass_band = channel.get("pass_band_hz")
    if "max_speed_mps" in channel:
        world = replace(world, max_speed=float(channel["max_speed_mps"]))

    room = doc.get("room")
    if room is not None:
        room = tuple(float(v) for v in (room["x_min_m"], room["x_max_m"],
                                         room["y_min_m"], room["y_max_m"]))

    scene = Scene(world=world, anchors=tuple(anchors), motion=motion,
                  pass_band=None if pass_band is None else float(pass_band),
                  room=room, text=config_text)

    inter = []
    for i, raw in enumerate(doc.get("interferers") or []):
        raw = dict(raw)
        primary = str(raw.pop("primary_id"))
        volume = float(raw.pop("relative_volume"))
        fields = _convert(f"interferers[{i}]", raw, _ANCHOR_KEYS)
        fields.setdefault("id", f"I{i + 1}")
        fields["id"] = str(fields["id"])
        fields.setdefault("frequency", scene.anchor(primary).frequency)
        inter.append(Interferer(AnchorNode(**_number_fields(fields, skip={"id"})), primary, volume))
    scene = replace(scene, interferers=tuple(inter))
    validate_scene(scene)
    return scene


def load_scenario_file(path) -> Scene:
    with open(path, encoding="utf-8") as fh:
        return load_scenario(fh.read())


def _key_for(name: str) -> str:
    return next(k for k, v in _ANCHOR_KEYS.items() if v == name)


def _number_fields(fields: dict[str, Any], skip: set[str] = frozenset()) -> dict[str, Any]:
    out = {}
    for k, v in fields.items():
        if k in skip:
            out[k] = v
            continue
        try:
            out[k] = float(v)
        except (TypeError, ValueError):
            raise ScenarioError(f"field '{k}': expected a number, got {v!r}") from None
    return out


def validate_scene(scene: Scene) -> None:
    w = scene.world
    if not w.speed_of_sound > 0:
        raise ScenarioError("world.speed_of_sound_mps must be positive")
    if not w.imu_rate > 0:
        raise ScenarioError("world.imu_rate_hz must be positive")
    if not w.audio_rate > 0:
        raise ScenarioError("world.audio_rate_hz must be positive")
    pass_band = scene.effective_pass_band()
    nyquist = w.audio_rate / 2.0
    ids = set()
    for a in scene.anchors:
        if a.id in ids:
            raise ScenarioError(f"anchor '{a.id}': duplicate id")
        ids.add(a.id)
        if a.source_velocity != 0.0:
            raise ScenarioError(f"anchor '{a.id}': moving sources are not supported")
        if a.frequency < MIN_ANCHOR_FREQUENCY:
            raise ScenarioError(
                f"anchor '{a.id}': frequency {a.frequency} Hz below {MIN_ANCHOR_FREQUENCY:.0f} Hz")
        if a.frequency > nyquist - pass_band / 2.0:
            raise ScenarioError(
                f"anchor '{a.id}': frequency {a.frequency} Hz leaves no guard below Nyquist")
        shift = max_doppler_shift(a.frequency, w.max_speed, w.speed_of_sound)
        if w.audio_rate <= 2.0 * (a.frequency + shift):
            raise ScenarioError(f"anchor '{a.id}': sample rate too low for Doppler band")
    freqs = sorted((a.frequency, a.id) for a in scene.anchors)
    for (f1, id1), (f2, id2) in zip(freqs, freqs[1:]):
        if f2 - f1 < pass_band:
            raise ScenarioError(
                f"channel overlap: anchors '{id1}' and '{id2}' are {f2 - f1:.1f} Hz apart, "
                f"pass band is {pass_band:.1f} Hz")
    for it in scene.interferers:
        if it.primary_id not in ids:
            raise ScenarioError(f"interferer '{it.anchor.id}': unknown primary '{it.primary_id}'")
        if it.anchor.frequency != scene.anchor(it.primary_id).frequency:
            raise ScenarioError(f"interferer '{it.anchor.id}': frequency must match its primary")
    validate_motion(scene.motion)


def validate_motion(m: MotionPatternSpec) -> None:
    if m.pattern not in PATTERNS:
        raise ScenarioError(f"motion.pattern: '{m.pattern}' not one of {', '.join(PATTERNS)}")
    if m.plane not in ("horizontal", "vertical"):
        raise ScenarioError("motion.plane must be 'horizontal' or 'vertical'")
    if m.peak_speed <= 0:
        raise ScenarioError("motion.peak_speed_mps must be positive")
    if m.rest_before < 0 or m.rest_after < 0:
        raise ScenarioError("motion rest periods must be non-negative")
    if m.is_shake:
        if not 0 < m.amplitude <= MAX_SHAKE_AMPLITUDE:
            raise ScenarioError(
                f"motion.amplitude_m must be in (0, {MAX_SHAKE_AMPLITUDE}] for shake patterns")
        if m.peak_speed > MAX_HAND_SPEED:
            raise ScenarioError(f"motion.peak_speed_mps exceeds {MAX_HAND_SPEED} m/s hand limit")
        if m.pattern != "D_arbitrary" and not m.senses:
            raise ScenarioError("motion.senses must list at least one loop")
        if m.pattern == "D_arbitrary" and m.duration <= 2 * m.ramp_time:
            raise ScenarioError("motion.duration_s too short for pattern D")
    else:
        if len(m.waypoints) < 2:
            raise ScenarioError("walk_path needs at least two waypoints_m")


def with_anchors(scene: Scene, anchors: Sequence[AnchorNode]) -> Scene:
    out = replace(scene, anchors=tuple(anchors))
    validate_scene(out)
    return out
