import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import signal

from dopplerloc.acoustic import (PcmStream, SynthesisError, add_interferer, inband_noise_dbfs, mix,
                                 noise_std, phase_oracle, synthesize_channel, synthesize_scene)
from dopplerloc.motion import Motion, Trajectory, _Rest, gen_trajectory
from dopplerloc.scenario import AnchorNode, MotionPatternSpec, Scene, WorldConfig

from conftest import anchor_at, rms

WORLD = WorldConfig()


def walk(p0, p1, speed, ramp=0.05, rest=0.2):
    spec = MotionPatternSpec(pattern="walk_path", waypoints=(tuple(p0), tuple(p1)), peak_speed=speed,
                             ramp_time=ramp, rest_before=rest, rest_after=rest)
    return gen_trajectory(spec, WORLD)


def static(L, duration=0.5):
    return Trajectory.sample(Motion([_Rest(np.zeros(3), duration)]), WORLD.imu_rate)


def inst_freq(x, rate):
    """Least-squares slope of the analytic-signal phase, in Hz."""
    ph = np.unwrap(np.angle(signal.hilbert(x)))
    n = len(ph)
    core = slice(n // 10, n - n // 10)
    t = np.arange(n) / rate
    return np.polyfit(t[core], ph[core], 1)[0] / (2 * math.pi)


def test_static_phone_is_pure_tone():
    traj = static(5.0)
    anchor = anchor_at(5.0, 0.0)
    pcm = synthesize_channel(traj, anchor, WORLD)
    assert inst_freq(pcm.samples, WORLD.audio_rate) == pytest.approx(19000.0, abs=1e-3)
    ora = phase_oracle(traj, [anchor], WORLD)["S"]
    assert np.max(np.abs(ora.phi_true)) < 1e-9
    assert np.max(np.abs(ora.f_shift_true)) < 1e-9


def test_static_energy():
    traj = static(5.0)
    anchor = anchor_at(5.0, 0.0)
    pcm = synthesize_channel(traj, anchor, WORLD, noise_dbfs=-math.inf)
    assert rms(pcm.samples) == pytest.approx(anchor.amplitude / 5.0 / math.sqrt(2), rel=0.01)


def test_radial_approach_frequency():
    # 2 m/s straight at an anchor 30 m ahead
    traj = walk((0.0, 0.0), (6.0, 0.0), 2.0)
    anchor = anchor_at(30.0, 0.0)
    pcm = synthesize_channel(traj, anchor, WORLD)
    t = pcm.times
    leg = (t > 0.4) & (t < 2.9)
    f = inst_freq(pcm.samples[leg], WORLD.audio_rate)
    assert f == pytest.approx(19111.8, abs=0.1)
    v = 2.0 / 340.0
    assert abs(f / (19000 * (1 + v)) - 1) <= v ** 2


@given(st.floats(0.2, 2.0), st.sampled_from([17000.0, 18000.0, 19500.0]))
def test_doppler_first_order(speed, f_a):
    traj = walk((0.0, 0.0), (1.5, 0.0), speed, ramp=0.02, rest=0.05)
    anchor = anchor_at(-40.0, 0.0, f=f_a)
    pcm = synthesize_channel(traj, anchor, WORLD)
    t = pcm.times
    t_end = 0.05 + 1.5 / speed
    leg = (t > 0.15) & (t < t_end - 0.1)
    f = inst_freq(pcm.samples[leg], WORLD.audio_rate)
    v = speed / WORLD.speed_of_sound
    assert abs(f / (f_a * (1 - v)) - 1) <= v ** 2


def test_reference_shake_peak_shift(world):
    # anchor along the shake's Y axis so the rectangle legs are radial
    spec = MotionPatternSpec(pattern="A_mixed", peak_speed=1.1, amplitude=0.1)
    traj = gen_trajectory(spec, world)
    ora = phase_oracle(traj, [anchor_at(0.0, 8.0)], world, traj.densify(world.audio_rate).t)["S"]
    peak = np.max(np.abs(ora.f_shift_true))
    assert peak == pytest.approx(19000 * 1.1 / 340, rel=0.01)
    assert peak == pytest.approx(60.0, rel=0.05)


def test_one_wavelength_is_two_pi():
    lam = 340.0 / 19000.0
    traj = walk((0.0, 0.0), (lam, 0.0), 0.1, ramp=0.02)
    ora = phase_oracle(traj, [anchor_at(5.0, 0.0)], WORLD)["S"]
    assert ora.phi_true[-1] == pytest.approx(2 * math.pi, abs=1e-9)
    assert lam * 1e3 == pytest.approx(17.9, abs=0.05)


def test_leg_toward_source_constant_shift():
    traj = walk((0.0, 0.0), (1.0, 0.0), 1.0, ramp=0.05)
    ora = phase_oracle(traj, [anchor_at(1e4, 0.0)], WORLD)["S"]
    on_leg = (traj.t > 0.3) & (traj.t < 1.1)
    np.testing.assert_allclose(ora.f_shift_true[on_leg], 19000 / 340, atol=1e-3)
    assert 19000 / 340 == pytest.approx(55.9, abs=0.05)


@pytest.mark.parametrize("pattern", ["A_mixed", "D_arbitrary"])
def test_oracle_derivative_consistency(world, pattern):
    spec = MotionPatternSpec(pattern=pattern, peak_speed=2.0, seed=1)
    traj = gen_trajectory(spec, world).densify(world.audio_rate)
    ora = phase_oracle(traj, [anchor_at(3.0, 4.0)], world)["S"]
    fd = np.diff(ora.phi_true) * world.audio_rate / (2 * math.pi)
    mid = 0.5 * (ora.f_shift_true[1:] + ora.f_shift_true[:-1])
    assert np.max(np.abs(fd - mid)) < 1e-3
    assert np.max(np.abs(np.diff(ora.phi_true))) < math.pi


def test_synthesis_agrees_with_oracle(world):
    """Two routes to the carrier phase: demodulate the PCM with the oracle phase."""
    spec = MotionPatternSpec(pattern="A_mixed", peak_speed=2.0)
    traj = gen_trajectory(spec, world)
    anchor = anchor_at(5.0, 6.0)
    pcm = synthesize_channel(traj, anchor, world)
    ora = phase_oracle(traj, [anchor], world, pcm.times)["S"]
    z = pcm.samples * np.exp(-1j * (2 * math.pi * np.mod(19000 * pcm.times, 1.0) + ora.phi_true))
    n = 2205
    base = np.convolve(z, np.ones(n) / n, mode="valid")
    residual = np.angle(base * np.conj(base[0]))
    assert np.max(np.abs(residual)) < 2e-3


def test_noise_level(world):
    traj = static(5.0, duration=2.0)
    rng = np.random.default_rng(0)
    pcm = synthesize_channel(traj, anchor_at(5.0, 0.0, amplitude_dbfs=-300.0), world, noise_dbfs=-40.0, rng=rng)
    assert rms(pcm.samples) == pytest.approx(noise_std(-40.0), rel=0.02)
    assert noise_std(-math.inf) == 0.0


def test_inband_snr(world):
    """Noise power inside an ideal 224 Hz band around the tone sits 30 dB below it."""
    traj = static(8.0, duration=4.0)
    amp = anchor_at(8.0, 0.0).amplitude / 8.0
    level = inband_noise_dbfs(amp, 30.0, 224.0, world.audio_rate)
    silent = anchor_at(8.0, 0.0, amplitude_dbfs=-400.0)
    noise = synthesize_channel(traj, silent, world, level, rng=np.random.default_rng(1)).samples
    spec = np.abs(np.fft.rfft(noise)) ** 2 * 2 / len(noise) ** 2
    freqs = np.fft.rfftfreq(len(noise), 1 / world.audio_rate)
    inband = spec[np.abs(freqs - 19000) < 112].sum()
    assert 10 * math.log10(amp ** 2 / 2 / inband) == pytest.approx(30.0, abs=0.3)


def test_mix_identity_and_clipping():
    x = PcmStream(np.linspace(-0.5, 0.5, 100), 44100.0)
    out = mix([x])
    np.testing.assert_array_equal(out.samples, x.samples)
    assert "clipped" not in out.flags
    a = PcmStream(np.full(10, 0.6), 44100.0)
    out = mix([a, a])
    assert out.flags["clipped"] == 10
    assert np.max(np.abs(out.samples)) <= 1.0


def test_mix_errors():
    with pytest.raises(SynthesisError, match="rate"):
        mix([PcmStream(np.zeros(4), 44100.0), PcmStream(np.zeros(4), 48000.0)])
    with pytest.raises(SynthesisError):
        mix([PcmStream(np.zeros(4), 44100.0), PcmStream(np.zeros(5), 44100.0)])


def test_six_anchor_spectrum(layout_scene, world):
    traj = static(5.0, duration=1.0)
    scene = Scene(world, tuple(AnchorNode(a.id, a.x - 15, a.y + 5, a.frequency) for a in layout_scene.anchors))
    pcm = synthesize_scene(traj, scene)
    spec = np.abs(np.fft.rfft(pcm.samples * np.hanning(len(pcm.samples))))
    freqs = np.fft.rfftfreq(len(pcm.samples), 1 / world.audio_rate)
    band = (freqs > 16500) & (freqs < 20000)
    peaks, _ = signal.find_peaks(spec[band], height=spec[band].max() * 0.05)
    found = freqs[band][peaks]
    assert len(found) == 6
    np.testing.assert_allclose(found, [17000 + 500 * i for i in range(6)], atol=2.0)


def test_add_interferer(single_scene):
    same = add_interferer(single_scene, anchor_at(0.0, 10.0), 0.0)
    assert same is single_scene
    out = add_interferer(single_scene, AnchorNode("C", 0.0, 10.0, 19000.0), 0.2)
    it = out.interferers[0]
    assert it.primary_id == "S"
    assert it.anchor.amplitude / single_scene.anchors[0].amplitude == pytest.approx(0.2)
    with pytest.raises(SynthesisError):
        add_interferer(single_scene, AnchorNode("C", 0.0, 10.0, 17000.0), 0.5)


def test_wav_round_trip(tmp_path):
    x = PcmStream(0.5 * np.sin(np.arange(1000) * 0.3), 44100.0)
    path = tmp_path / "a.wav"
    assert x.to_wav(path) == 0
    back = PcmStream.from_wav(path)
    assert back.rate == 44100.0
    np.testing.assert_allclose(back.samples, x.samples, atol=1 / 32767)


def test_oracle_csv(tmp_path, world):
    traj = static(5.0)
    path = tmp_path / "o.csv"
    phase_oracle(traj, [anchor_at(5.0, 0.0)], world).to_csv(path)
    assert path.read_text().splitlines()[0] == "t,anchor_id,phi_true,f_shift_true,L_true"
