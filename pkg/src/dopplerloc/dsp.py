"""Per-channel signal front-end: band-pass filter, AGC, PLL phase tracking.

The PLL reference is ``cos(2 pi f_a t + theta)``; after lock ``theta`` follows
the received carrier phase, so its slope is the Doppler shift and its change
times ``v_a / (2 pi f_a)`` is the displacement toward the anchor.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import signal

from .acoustic import PcmStream
from .scenario import WorldConfig

DEFAULT_MU = 0.03
DEFAULT_LOOP_CUTOFF = 500.0


class FilterDesignError(ValueError):
    pass


# --------------------------------------------------------------------------- filter

@dataclass
class FilterSpec:
    center: float
    pass_band: float
    transition: float = 200.0
    stop_atten_db: float = 60.0
    taps: int = 1001
    coefficients: np.ndarray | None = None
    rate: float | None = None

    @property
    def group_delay(self) -> float:
        return (self.taps - 1) / 2.0

    def response(self, freqs) -> np.ndarray:
        if self.coefficients is None:
            raise FilterDesignError("filter has not been designed")
        _, h = signal.freqz(self.coefficients, worN=np.atleast_1d(np.asarray(freqs, float)), fs=self.rate)
        return h

    def to_text(self, path) -> None:
        np.savetxt(path, self.coefficients, fmt="%.12e",
                   header=f"center={self.center} pass_band={self.pass_band} rate={self.rate} taps={self.taps}")


def _stop_edges(spec: FilterSpec) -> tuple[float, float, float, float]:
    lo = spec.center - spec.pass_band / 2.0
    hi = spec.center + spec.pass_band / 2.0
    return lo - spec.transition, lo, hi, hi + spec.transition


def design_bandpass(spec: FilterSpec, sample_rate: float) -> FilterSpec:
    """Equiripple linear-phase band-pass via Parks-McClellan.

    The design is checked on a dense grid; if the stop band misses
    ``stop_atten_db`` the spec is rejected as unmeetable for the tap budget.
    """
    nyq = sample_rate / 2.0
    if spec.pass_band <= 0:
        raise FilterDesignError("pass band must be positive")
    if spec.taps % 2 == 0 or spec.taps < 3:
        raise FilterDesignError("tap count must be an odd integer >= 3")
    s1, p1, p2, s2 = _stop_edges(spec)
    if p1 <= 0 or p2 >= nyq:
        raise FilterDesignError("pass band extends outside (0, Nyquist)")
    if s1 <= 0 or s2 >= nyq:
        raise FilterDesignError("transition bands extend outside (0, Nyquist)")
    try:
        h = signal.remez(spec.taps, [0.0, s1, p1, p2, s2, nyq], [0.0, 1.0, 0.0], fs=sample_rate,
                         maxiter=100)
    except ValueError as exc:
        raise FilterDesignError(f"equiripple design did not converge: {exc}") from exc
    h = 0.5 * (h + h[::-1])
    out = FilterSpec(spec.center, spec.pass_band, spec.transition, spec.stop_atten_db,
                     spec.taps, h, float(sample_rate))
    worst = measured_stop_rejection(out)
    if worst < spec.stop_atten_db:
        raise FilterDesignError(
            f"unmeetable spec: {worst:.1f} dB stop-band rejection with {spec.taps} taps "
            f"and {spec.transition:.0f} Hz transition (wanted {spec.stop_atten_db:.1f} dB)")
    return out


def measured_stop_rejection(filt: FilterSpec, points: int = 1 << 15) -> float:
    """Smallest attenuation in dB over both stop bands."""
    s1, _, _, s2 = _stop_edges(filt)
    freqs = np.concatenate([np.linspace(0.0, s1, points // 2), np.linspace(s2, filt.rate / 2, points // 2)])
    mag = np.abs(filt.response(freqs))
    return float(-20.0 * np.log10(max(mag.max(), 1e-300)))


def apply_filter(pcm: PcmStream, filt: FilterSpec, trim: bool = True) -> PcmStream:
    """Causal FIR filtering with the group delay folded into the timestamps.

    Output sample ``j`` carries time ``t_in + (j - D)/f_s`` so an in-band tone
    shows no net phase lag. With ``trim`` the first ``taps - 1`` outputs, which
    see the zero history before the stream, are dropped.
    """
    if filt.rate is None or abs(filt.rate - pcm.rate) > 1e-9:
        raise FilterDesignError("filter and stream sample rates differ")
    h = filt.coefficients
    x = np.asarray(pcm.samples, float)
    delay = filt.group_delay
    if trim:
        y = signal.oaconvolve(x, h, mode="valid") if len(x) >= len(h) else np.zeros(0)
        start = pcm.start_time + delay / pcm.rate
    else:
        y = signal.oaconvolve(x, h, mode="full")[: len(x)]
        start = pcm.start_time - delay / pcm.rate
    return PcmStream(y, pcm.rate, start, dict(pcm.flags))


# --------------------------------------------------------------------------- AGC

def agc(pcm: PcmStream, A_alpha: float = 0.9, window: int = 44, max_gain: float = 1e4,
        verbatim: bool = False) -> PcmStream:
    """Log-domain gain smoother driving the envelope toward one.

    The coarse amplitude is the mean of ``|r_b|`` over the trailing ``window``
    samples times pi/2 (mean |cos| is 2/pi). ``verbatim`` instead uses an
    11-sample sum divided by 7, whose 11/7 factor approximates the same pi/2.
    Until the first window fills, its estimate is used. Near-silent input has
    its coarse amplitude floored at ``1/max_gain``; the number of floored
    samples is reported in ``flags['gain_clamped']``.
    """
    x = np.asarray(pcm.samples, float)
    n = len(x)
    out_flags = dict(pcm.flags)
    if n == 0:
        return PcmStream(x.copy(), pcm.rate, pcm.start_time, out_flags)
    mag = np.abs(x)
    csum = np.concatenate([[0.0], np.cumsum(mag)])
    span = 11 if verbatim else window
    idx = np.arange(n)
    lo = np.maximum(idx - span + 1, 0)
    if verbatim:
        # zero-padded history at the start, scaled as if the window were full
        coarse = (csum[idx + 1] - csum[lo]) / 7.0 * span / np.minimum(idx + 1, span)
    else:
        coarse = (csum[idx + 1] - csum[lo]) / (idx + 1 - lo) * (math.pi / 2.0)
    # a part-filled window can sit on a zero crossing; warm up from the first full one
    warm = min(span, n) - 1
    coarse[:warm] = coarse[warm]
    floor = 1.0 / max_gain
    clamped = coarse < floor
    coarse = np.maximum(coarse, floor)
    log_ar = np.log(coarse)
    # log A1[k] = (1 - a) log A1[k-1] - a log A_r[k-1], started at steady state
    driven = np.concatenate([[log_ar[0]], log_ar[:-1]])
    zi = signal.lfiltic([-A_alpha], [1.0, -(1.0 - A_alpha)], y=[-log_ar[0]], x=[log_ar[0]])
    log_gain, _ = signal.lfilter([-A_alpha], [1.0, -(1.0 - A_alpha)], driven, zi=zi)
    gain = np.exp(log_gain)
    out_flags["gain_clamped"] = out_flags.get("gain_clamped", 0) + int(np.count_nonzero(clamped))
    out = PcmStream(gain * x, pcm.rate, pcm.start_time, out_flags)
    out.gain = gain
    return out


# --------------------------------------------------------------------------- PLL

@numba.njit(cache=True)
def _pll_kernel(x, cycles, theta0, lpf0, mu, beta):
    n = len(x)
    theta_out = np.empty(n)
    lpf_out = np.empty(n)
    theta = theta0
    y = lpf0
    two_pi = 2.0 * np.pi
    for k in range(n):
        theta_out[k] = theta
        err = x[k] * np.sin(two_pi * cycles[k] + theta)
        y += beta * (err - y)
        lpf_out[k] = y
        theta -= mu * y
    return theta_out, lpf_out, theta, y


@dataclass
class PllState:
    theta: float
    mu: float = DEFAULT_MU
    lpf: float = 0.0
    k: int = 0


@dataclass
class PhaseTrack:
    anchor_id: str
    frequency: float
    t: np.ndarray
    theta: np.ndarray
    lock_quality: np.ndarray
    f_shift: np.ndarray | None = None
    v_rel: np.ndarray | None = None
    s_rel: np.ndarray | None = None
    state: PllState | None = None
    flags: dict = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return 1.0 / float(np.median(np.diff(self.t)))

    def to_csv(self, path, decimate: int = 1) -> None:
        write_phase_tracks(path, [self], decimate)


def write_phase_tracks(path, tracks, decimate: int = 1) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "anchor_id", "theta", "f_shift", "v_rel", "s_rel", "lock_quality"])
        for tr in tracks:
            nan = np.full(len(tr.t), np.nan)
            f = tr.f_shift if tr.f_shift is not None else nan
            v = tr.v_rel if tr.v_rel is not None else nan
            s = tr.s_rel if tr.s_rel is not None else nan
            for i in range(0, len(tr.t), decimate):
                w.writerow([f"{tr.t[i]:.6f}", tr.anchor_id, f"{tr.theta[i]:.6f}", f"{f[i]:.4f}",
                            f"{v[i]:.6f}", f"{s[i]:.7f}", f"{tr.lock_quality[i]:.4f}"])


def loop_beta(cutoff: float, rate: float) -> float:
    return 1.0 - math.exp(-2.0 * math.pi * cutoff / rate)


def carrier_cycles(f_a: float, times: np.ndarray, start_time: float, rate: float) -> np.ndarray:
    """``f_a t`` reduced mod 1, computed without forming large products."""
    k = np.round((times - start_time) * rate)
    return np.mod(np.mod(f_a * start_time, 1.0) + np.mod(f_a * k / rate, 1.0), 1.0)


def acquire_phase(x: np.ndarray, cycles: np.ndarray, offset_hz: float = 0.0,
                  rate: float = 44100.0) -> float:
    """Carrier phase at the first sample by windowed I/Q demodulation.

    ``offset_hz`` removes an expected frequency offset so a moving phone does
    not smear the estimate; the phase is referred back to sample zero.
    """
    n = len(x)
    if n == 0:
        return 0.0
    tau = np.arange(n) / rate
    ref = 2.0 * np.pi * (cycles + offset_hz * tau)
    win = np.hanning(n + 2)[1:-1]
    z = np.sum(win * x * np.exp(-1j * ref))
    return float(np.angle(z))


def _delay(mu: float, rate: float, amplitude: float) -> float:
    # first-order loop: theta responds to phase error with time constant 2/(mu A) samples
    return 2.0 / (mu * rate * max(amplitude, 1e-6))


def _lock_metrics(x, cycles, theta, lpf, beta, rate: float, amplitude: float, span: float = 0.01):
    """Lock quality from the in-phase arm, lock loss from error saturation.

    ``LPF{r_c cos(2 pi f_a t + theta)}`` is half the cosine of the phase error,
    so twice it is near 1 in lock (also under a steady Doppler offset) and
    averages to 0 while the loop slips cycles.
    """
    n = max(1, int(round(span * rate)))
    amp = max(amplitude, 1e-6)
    if len(x) == 0:
        return np.zeros(0), 0
    in_phase = signal.lfilter([beta], [1.0, beta - 1.0], x * np.cos(2.0 * np.pi * cycles + theta))
    box = np.ones(n) / n
    quality = np.clip(signal.lfilter(box, [1.0], 2.0 * in_phase / amp), 0.0, 1.0)
    saturation = signal.lfilter(box, [1.0], np.abs(2.0 * lpf) / amp)
    lost = int(np.count_nonzero(saturation > 0.95))
    return quality, lost


def pll_track(pcm: PcmStream, f_a: float, mu: float = DEFAULT_MU,
              loop_cutoff: float = DEFAULT_LOOP_CUTOFF, anchor_id: str = "",
              state: PllState | None = None, acquire: int = 256,
              compensate_delay: bool = True, amplitude: float | None = None) -> PhaseTrack:
    """Track the carrier phase of a gain-normalised tone.

    Update: ``theta[k+1] = theta[k] - mu * LPF{r_c[k] sin(2 pi f_a t_k + theta[k])}``
    with a single-pole loop filter. Without a prior ``state`` the initial
    ``theta`` comes from I/Q demodulation of the first ``acquire`` samples.
    The loop lags the input by about ``2/(mu f_s A)`` seconds; with
    ``compensate_delay`` the output timestamps are moved back by that amount.
    """
    x = np.asarray(pcm.samples, float)
    times = pcm.times
    cycles = carrier_cycles(f_a, times, pcm.start_time, pcm.rate)
    if amplitude is None:
        amplitude = float(np.mean(np.abs(x)) * math.pi / 2.0) if len(x) else 1.0
    if state is None:
        theta0 = acquire_phase(x[:acquire], cycles[:acquire], 0.0, pcm.rate)
        lpf0, k0 = 0.0, 0
    else:
        theta0, lpf0, k0 = state.theta, state.lpf, state.k
    beta = loop_beta(loop_cutoff, pcm.rate)
    theta, lpf, theta_end, lpf_end = _pll_kernel(x, cycles, float(theta0), float(lpf0), float(mu), beta)
    if len(theta) > 1:
        step = float(np.max(np.abs(np.diff(theta))))
        bound = mu * float(np.max(np.abs(lpf)))
        slack = 8.0 * np.finfo(float).eps * float(np.max(np.abs(theta)))
        assert step <= bound * (1 + 1e-12) + slack, "PLL update exceeded mu * max|LPF|"
    else:
        step = 0.0
    quality, lost = _lock_metrics(x, cycles, theta, lpf, beta, pcm.rate, amplitude)
    t_out = times - _delay(mu, pcm.rate, amplitude) if compensate_delay else times.copy()
    flags = {"lock_loss_samples": lost, "max_step": step,
             "slew_bound_exceeded": bool(step > mu / 2.0 * 1.05)}
    return PhaseTrack(anchor_id, f_a, t_out, theta, quality,
                      state=PllState(float(theta_end), mu, float(lpf_end), k0 + len(x)), flags=flags)


@dataclass
class BlockPhases:
    """PLL output summarised at the end of each processed block."""
    anchor_id: str
    frequency: float
    t_start: np.ndarray
    t_end: np.ndarray
    theta_end: np.ndarray
    f_end: np.ndarray
    lock_quality: np.ndarray
    flags: dict = field(default_factory=dict)


def _block_slope(t: np.ndarray, theta: np.ndarray, tail: int) -> float:
    if len(t) < 3:
        return 0.0
    tt = t[-tail:]
    return float(np.polyfit(tt - tt[0], theta[-tail:], 1)[0] / (2.0 * math.pi))


def pll_track_blocks(pcm: PcmStream, f_a: float, blocks, mu: float = DEFAULT_MU,
                     loop_cutoff: float = DEFAULT_LOOP_CUTOFF, anchor_id: str = "",
                     acquire: int = 128, slope_tail: int = 441) -> BlockPhases:
    """Run the PLL only on the sample ranges ``blocks`` = [(i0, i1), ...].

    Loop state carries across blocks. Over a gap ``theta`` is extrapolated
    with the last frequency estimate, then moved to the 2 pi branch of that
    extrapolation nearest a fresh I/Q phase measurement at the block start.
    """
    x_all = np.asarray(pcm.samples, float)
    amplitude = float(np.mean(np.abs(x_all)) * math.pi / 2.0) if len(x_all) else 1.0
    n_blocks = len(blocks)
    t_start = np.empty(n_blocks)
    t_end = np.empty(n_blocks)
    th_end = np.empty(n_blocks)
    f_end = np.empty(n_blocks)
    q_end = np.empty(n_blocks)
    state = None
    last_t = None
    last_f = 0.0
    lost = 0
    for b, (i0, i1) in enumerate(blocks):
        seg = PcmStream(x_all[i0:i1], pcm.rate, pcm.start_time + i0 / pcm.rate)
        cyc = carrier_cycles(f_a, seg.times[:acquire], seg.start_time, pcm.rate)
        if state is not None:
            gap = seg.start_time - last_t
            guess = state.theta + 2.0 * math.pi * last_f * gap
            measured = acquire_phase(seg.samples[:acquire], cyc, last_f, pcm.rate)
            theta0 = guess + math.remainder(measured - guess, 2.0 * math.pi)
            state = PllState(theta0, mu, 0.0, state.k)
        tr = pll_track(seg, f_a, mu, loop_cutoff, anchor_id, state, acquire=acquire,
                       compensate_delay=True, amplitude=amplitude)
        state = tr.state
        last_t = seg.start_time + len(seg.samples) / pcm.rate
        last_f = _block_slope(tr.t, tr.theta, slope_tail)
        t_start[b] = tr.t[0]
        t_end[b] = tr.t[-1]
        th_end[b] = tr.theta[-1]
        f_end[b] = last_f
        q_end[b] = float(np.mean(tr.lock_quality))
        lost += tr.flags["lock_loss_samples"]
    return BlockPhases(anchor_id, f_a, t_start, t_end, th_end, f_end, q_end,
                       {"lock_loss_samples": lost})


def phase_to_kinematics(track: PhaseTrack, world: WorldConfig, smooth_window: int = 441) -> PhaseTrack:
    """Fill ``f_shift``, ``v_rel`` and ``s_rel`` from ``theta``.

    ``f_shift`` is the centred Savitzky-Golay slope of ``theta`` over
    ``smooth_window`` samples, divided by 2 pi.
    """
    theta = track.theta
    n = len(theta)
    rate = track.rate if n > 1 else world.audio_rate
    win = min(smooth_window, n if n % 2 else n - 1)
    if win >= 3:
        dtheta = signal.savgol_filter(theta, win, 2, deriv=1, delta=1.0 / rate, mode="interp")
    else:
        dtheta = np.zeros(n)
    track.f_shift = dtheta / (2.0 * math.pi)
    track.v_rel = world.speed_of_sound / track.frequency * track.f_shift
    track.s_rel = world.speed_of_sound / (2.0 * math.pi * track.frequency) * (theta - theta[0])
    return track


# --------------------------------------------------------------------------- FFT baseline

@dataclass
class FftTrack:
    t: np.ndarray
    peak_freq: np.ndarray
    resolution: float
    block_duration: float

    def f_shift(self, f_a: float) -> np.ndarray:
        return self.peak_freq - f_a


def fft_baseline(pcm: PcmStream, fft_size: int = 8192, f_a: float | None = None,
                 hop: int | None = None, search: float = 500.0) -> FftTrack:
    """Peak frequency of Hann-windowed blocks; resolution is ``f_s / fft_size``.

    Each block is stamped at its centre. With ``f_a`` the peak search is
    restricted to ``f_a +- search`` Hz.
    """
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise ValueError("fft_size must be a power of two")
    hop = hop or fft_size
    x = np.asarray(pcm.samples, float)
    freqs = np.fft.rfftfreq(fft_size, 1.0 / pcm.rate)
    mask = np.ones(len(freqs), bool) if f_a is None else np.abs(freqs - f_a) <= search
    win = np.hanning(fft_size)
    starts = np.arange(0, len(x) - fft_size + 1, hop)
    peaks = np.empty(len(starts))
    for j, s in enumerate(starts):
        spec = np.abs(np.fft.rfft(win * x[s:s + fft_size]))
        spec[~mask] = 0.0
        peaks[j] = freqs[int(np.argmax(spec))]
    t = pcm.start_time + (starts + fft_size / 2.0) / pcm.rate
    return FftTrack(t, peaks, pcm.rate / fft_size, fft_size / pcm.rate)
