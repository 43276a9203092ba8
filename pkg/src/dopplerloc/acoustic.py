"""Received-signal synthesis under a retarded-time propagation model.

For a fixed source the tone reaching the phone at time ``t`` left the speaker
at ``t - L(t)/v_a``, where ``L(t)`` is the phone-speaker distance at reception.
That makes the received frequency exactly ``f_a (1 - L'(t)/v_a)``, so the
phase oracle below is exact rather than a first-order approximation.
"""

from __future__ import annotations

import csv
import math
import wave
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .motion import Trajectory
from .scenario import AnchorNode, Interferer, Scene, WorldConfig

MIN_DISTANCE = 0.1


class SynthesisError(ValueError):
    pass


@dataclass
class PcmStream:
    samples: np.ndarray
    rate: float
    start_time: float = 0.0
    flags: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.start_time + np.arange(len(self.samples)) / self.rate

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate

    def to_wav(self, path) -> int:
        """Write mono 16-bit PCM; returns the number of clipped samples."""
        x = np.asarray(self.samples)
        clipped = int(np.count_nonzero(np.abs(x) > 1.0))
        pcm = np.round(np.clip(x, -1.0, 1.0) * 32767.0).astype("<i2")
        with wave.open(str(path), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(int(round(self.rate)))
            w.writeframes(pcm.tobytes())
        return clipped

    @classmethod
    def from_wav(cls, path, start_time: float = 0.0) -> "PcmStream":
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2:
                raise SynthesisError("expected mono 16-bit wave file")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
        return cls(np.frombuffer(raw, dtype="<i2").astype(float) / 32767.0, float(rate), start_time)


def inverse_distance(amplitude_1m: float, distance):
    return amplitude_1m / np.maximum(distance, MIN_DISTANCE)


def directivity_gain(anchor: AnchorNode, direction) -> np.ndarray:
    """Cardioid-power gain toward unit vectors ``direction`` (anchor -> phone)."""
    if anchor.directivity == 0.0:
        return np.ones(len(direction))
    face = np.array([math.cos(anchor.elevation) * math.cos(anchor.azimuth),
                     math.cos(anchor.elevation) * math.sin(anchor.azimuth),
                     math.sin(anchor.elevation)])
    cos_off = direction @ face
    return ((1.0 + cos_off) / 2.0) ** anchor.directivity


def noise_std(dbfs: float) -> float:
    """RMS of white noise at ``dbfs`` (full-scale sine RMS = 0 dBFS)."""
    if not np.isfinite(dbfs):
        return 0.0
    return 10.0 ** (dbfs / 20.0) / math.sqrt(2.0)


def inband_noise_dbfs(amplitude: float, snr_db: float, pass_band: float, rate: float) -> float:
    """Broadband noise level giving ``snr_db`` inside a ``pass_band`` filter."""
    signal_power = amplitude ** 2 / 2.0
    inband_power = signal_power / 10.0 ** (snr_db / 10.0)
    total_power = inband_power * (rate / 2.0) / pass_band
    return 20.0 * math.log10(math.sqrt(2.0 * total_power))


def _audio_times(traj: Trajectory, world: WorldConfig) -> np.ndarray:
    n = int(math.floor(traj.duration * world.audio_rate)) + 1
    return np.arange(n) / world.audio_rate


def distances(traj: Trajectory, anchor: AnchorNode, t: np.ndarray) -> np.ndarray:
    return np.linalg.norm(traj.motion.position(t) - anchor.position, axis=1)


def _tone(traj, anchor, world, t, positions, amplitude_model, gain=1.0):
    rel = positions - anchor.position
    L = np.linalg.norm(rel, axis=1)
    amp = gain * amplitude_model(anchor.amplitude, L)
    if anchor.directivity:
        amp = amp * directivity_gain(anchor, rel / np.maximum(L, 1e-12)[:, None])
    # carrier phase kept in cycles, reduced mod 1 for precision over long runs
    cycles = np.mod(anchor.frequency * t, 1.0) - np.mod(anchor.frequency * L / world.speed_of_sound, 1.0)
    return amp * np.cos(2.0 * np.pi * cycles)


def synthesize_channel(traj: Trajectory, anchor: AnchorNode, world: WorldConfig,
                       noise_dbfs: float | None = None,
                       amplitude_model: Callable = inverse_distance,
                       rng: np.random.Generator | None = None,
                       positions: np.ndarray | None = None) -> PcmStream:
    """Received signal from one anchor, sampled at the audio rate."""
    if anchor.frequency >= world.audio_rate / 2:
        raise SynthesisError(f"anchor '{anchor.id}' frequency is above Nyquist")
    t = _audio_times(traj, world)
    if positions is None:
        positions = traj.motion.position(t)
    x = _tone(traj, anchor, world, t, positions, amplitude_model)
    level = world.noise_floor_dbfs if noise_dbfs is None else noise_dbfs
    sigma = noise_std(level)
    if sigma > 0:
        rng = rng or np.random.default_rng()
        x = x + rng.normal(0.0, sigma, size=len(x))
    return _flag_clipping(PcmStream(x, world.audio_rate, 0.0))


def synthesize_scene(traj: Trajectory, scene: Scene, noise_dbfs: float | None = None,
                     rng: np.random.Generator | None = None,
                     amplitude_model: Callable = inverse_distance) -> PcmStream:
    """All anchors and interferers mixed, plus one shared noise floor."""
    world = scene.world
    t = _audio_times(traj, world)
    positions = traj.motion.position(t)
    streams = [PcmStream(_tone(traj, a, world, t, positions, amplitude_model), world.audio_rate)
               for a in scene.anchors]
    for it in scene.interferers:
        streams.append(PcmStream(_tone(traj, it.anchor, world, t, positions, amplitude_model),
                                 world.audio_rate))
    level = world.noise_floor_dbfs if noise_dbfs is None else noise_dbfs
    sigma = noise_std(level)
    if sigma > 0:
        rng = rng or np.random.default_rng()
        streams.append(PcmStream(rng.normal(0.0, sigma, size=len(t)), world.audio_rate))
    if not streams:
        return PcmStream(np.zeros(len(t)), world.audio_rate)
    return mix(streams)


def _flag_clipping(stream: PcmStream) -> PcmStream:
    over = int(np.count_nonzero(np.abs(stream.samples) > 1.0))
    if over:
        stream.samples = np.clip(stream.samples, -1.0, 1.0)
        stream.flags["clipped"] = stream.flags.get("clipped", 0) + over
    return stream


def mix(streams: Sequence[PcmStream]) -> PcmStream:
    """Pointwise sum of aligned streams; samples beyond full scale are clipped and counted."""
    if not streams:
        raise SynthesisError("nothing to mix")
    first = streams[0]
    for s in streams[1:]:
        if s.rate != first.rate:
            raise SynthesisError(f"rate mismatch: {s.rate} vs {first.rate}")
        if len(s.samples) != len(first.samples) or abs(s.start_time - first.start_time) > 0.5 / first.rate:
            raise SynthesisError("streams are not aligned")
    total = np.sum([s.samples for s in streams], axis=0)
    out = PcmStream(total, first.rate, first.start_time)
    for s in streams:
        for k, v in s.flags.items():
            out.flags[k] = out.flags.get(k, 0) + v
    return _flag_clipping(out)


def add_interferer(scene: Scene, interferer: AnchorNode, relative_volume: float) -> Scene:
    """Add a same-frequency source whose level is ``relative_volume`` times its primary's."""
    if relative_volume <= 0.0:
        return scene
    primary = next((a for a in scene.anchors if a.frequency == interferer.frequency), None)
    if primary is None:
        raise SynthesisError("interferer frequency matches no anchor")
    level = primary.amplitude_dbfs + 20.0 * math.log10(relative_volume)
    placed = replace(interferer, amplitude_dbfs=level)
    return replace(scene, interferers=scene.interferers + (Interferer(placed, primary.id, relative_volume),))


@dataclass
class AnchorPhase:
    anchor_id: str
    t: np.ndarray
    phi_true: np.ndarray
    f_shift_true: np.ndarray
    L_true: np.ndarray


@dataclass
class PhaseOracle:
    tracks: dict[str, AnchorPhase]

    def __getitem__(self, anchor_id: str) -> AnchorPhase:
        return self.tracks[anchor_id]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "anchor_id", "phi_true", "f_shift_true", "L_true"])
            for aid, tr in self.tracks.items():
                for i in range(len(tr.t)):
                    w.writerow([f"{tr.t[i]:.6f}", aid, f"{tr.phi_true[i]:.9f}",
                                f"{tr.f_shift_true[i]:.6f}", f"{tr.L_true[i]:.9f}"])


def phase_oracle(traj: Trajectory, anchors: Sequence[AnchorNode], world: WorldConfig,
                 t: np.ndarray | None = None) -> PhaseOracle:
    """Exact carrier phase and Doppler shift seen by the phone for each anchor.

    ``phi_true`` is zero at ``t = 0`` and grows by 2 pi for every wavelength the
    phone moves toward the anchor.
    """
    if t is None:
        t = traj.t
    p, v, _ = traj.motion.evaluate(t)
    p0 = traj.motion.evaluate([0.0])[0][0]
    tracks = {}
    for a in anchors:
        rel = p - a.position
        L = np.linalg.norm(rel, axis=1)
        L0 = float(np.linalg.norm(p0 - a.position))
        L_dot = np.einsum("ij,ij->i", rel, v) / np.maximum(L, 1e-12)
        k = 2.0 * np.pi * a.frequency / world.speed_of_sound
        tracks[a.id] = AnchorPhase(a.id, np.asarray(t, float).copy(), -k * (L - L0),
                                   -a.frequency * L_dot / world.speed_of_sound, L)
    return PhaseOracle(tracks)
