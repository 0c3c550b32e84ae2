"""YIN fundamental-frequency tracking and utterance-level prosody statistics."""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .wav import AudioBuffer


@dataclass(frozen=True)
class F0Track:
    """Per-frame f0 in Hz; NaN marks an unvoiced frame."""

    f0: np.ndarray
    sample_rate: int
    frame: int
    hop: int
    fmin: float
    fmax: float

    @property
    def voiced(self) -> np.ndarray:
        return ~np.isnan(self.f0)

    def __len__(self):
        return len(self.f0)


@dataclass(frozen=True)
class ProsodyStats:
    # None when no frame is voiced
    mean_f0: Optional[float]
    std_f0: Optional[float]
    duration_s: float
    voiced_fraction: float


@dataclass(frozen=True)
class MismatchReport:
    """Mean (system - reference) differences over index-aligned utterances."""

    d_duration: float
    d_mean_f0: Optional[float]
    d_std_f0: Optional[float]
    n_pairs: int
    n_f0_pairs: int

    @property
    def n_f0_excluded(self):
        return self.n_pairs - self.n_f0_pairs


def difference_function(frames: np.ndarray, tau_max: int) -> np.ndarray:
    """d(tau) = sum_{j<W} (x_j - x_{j+tau})^2 for tau = 0..tau_max, with W = frame - tau_max.

    ``frames`` is (n_frames, frame_length); returns (n_frames, tau_max + 1).
    """
    n, F = frames.shape
    W = F - tau_max
    size = 1 << int(math.ceil(math.log2(F + W)))
    head = frames[:, :W]
    # cross term via FFT correlation: r(tau) = sum_j x_j x_{j+tau}
    cross = np.fft.rfft(frames, size) * np.conj(np.fft.rfft(head, size))
    r = np.fft.irfft(cross, size)[:, : tau_max + 1]
    cs = np.concatenate([np.zeros((n, 1)), np.cumsum(frames**2, axis=1)], axis=1)
    taus = np.arange(tau_max + 1)
    e0 = cs[:, W][:, None]
    e_tau = cs[:, W + taus] - cs[:, taus]
    return np.maximum(e0 + e_tau - 2.0 * r, 0.0)


def cmnd(d: np.ndarray) -> np.ndarray:
    """Cumulative mean normalised difference; 1 at tau=0 and wherever the running sum is zero."""
    out = np.ones_like(d)
    cum = np.cumsum(d[:, 1:], axis=1)
    taus = np.arange(1, d.shape[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = d[:, 1:] * taus / cum
    out[:, 1:] = np.where(cum > 0, ratio, 1.0)
    return out


def _pick_lag(dp, tau_min, tau_max, threshold):
    below = np.flatnonzero(dp[tau_min : tau_max + 1] < threshold)
    if below.size == 0:
        return None
    tau = tau_min + int(below[0])
    while tau + 1 <= tau_max and dp[tau + 1] < dp[tau]:
        tau += 1
    shift = 0.0
    if 1 <= tau < len(dp) - 1:
        a, b, c = dp[tau - 1], dp[tau], dp[tau + 1]
        denom = a - 2.0 * b + c
        if denom > 0:
            shift = float(np.clip(0.5 * (a - c) / denom, -1.0, 1.0))
    return tau + shift


def yin_f0(buf: AudioBuffer, frame=2048, hop=512, fmin=65.0, fmax=1000.0, threshold=0.15) -> F0Track:
    """Deterministic YIN: one estimate per full frame, NaN where nothing dips under ``threshold``."""
    sr = buf.sample_rate
    if hop < 1:
        raise ValueError("hop must be >= 1")
    if not (0 < fmin < fmax):
        raise ValueError("need 0 < fmin < fmax")
    if frame < 2 * sr / fmin:
        raise ValueError(f"frame {frame} shorter than two periods of fmin ({2 * sr / fmin:.1f} samples)")
    x = np.asarray(buf.samples, dtype=np.float64)
    if len(x) < frame:
        raise ValueError(f"buffer has {len(x)} samples, fewer than one frame ({frame})")

    tau_min = max(1, math.ceil(sr / fmax))
    tau_max = math.floor(sr / fmin)
    frames = np.lib.stride_tricks.sliding_window_view(x, frame)[::hop]
    dp = cmnd(difference_function(frames, tau_max))

    f0 = np.full(len(frames), np.nan)
    for i, row in enumerate(dp):
        tau = _pick_lag(row, tau_min, tau_max, threshold)
        if tau is not None:
            tau = min(max(tau, sr / fmax), sr / fmin)
            f0[i] = sr / tau
    return F0Track(f0, sr, frame, hop, fmin, fmax)


def prosody_stats(track: F0Track, buf: AudioBuffer) -> ProsodyStats:
    voiced = track.f0[track.voiced]
    duration = len(buf.samples) / buf.sample_rate
    frac = len(voiced) / len(track) if len(track) else 0.0
    if len(voiced) == 0:
        return ProsodyStats(None, None, duration, frac)
    return ProsodyStats(float(voiced.mean()), float(voiced.std()), duration, frac)


def mismatch(system: Sequence[ProsodyStats], reference: Sequence[ProsodyStats]) -> MismatchReport:
    """Average per-utterance differences; utterances unvoiced on either side are left out of the f0 terms."""
    if len(system) != len(reference):
        raise ValueError(f"{len(system)} system vs {len(reference)} reference utterances")
    if not system:
        raise ValueError("no utterances")
    d_dur = [s.duration_s - r.duration_s for s, r in zip(system, reference)]
    f0_pairs = [(s, r) for s, r in zip(system, reference) if s.mean_f0 is not None and r.mean_f0 is not None]
    d_mean = d_std = None
    if f0_pairs:
        d_mean = float(np.mean([s.mean_f0 - r.mean_f0 for s, r in f0_pairs]))
        d_std = float(np.mean([s.std_f0 - r.std_f0 for s, r in f0_pairs]))
    return MismatchReport(float(np.mean(d_dur)), d_mean, d_std, len(system), len(f0_pairs))


def analyse(buf: AudioBuffer, **yin_kwargs) -> ProsodyStats:
    return prosody_stats(yin_f0(buf, **yin_kwargs), buf)


def sine(freq, seconds=1.0, sample_rate=22050, amplitude=0.5, phase=0.0) -> AudioBuffer:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return AudioBuffer(amplitude * np.sin(2 * np.pi * freq * t + phase), sample_rate)


def square(freq, seconds=1.0, sample_rate=22050, amplitude=0.5) -> AudioBuffer:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return AudioBuffer(amplitude * np.sign(np.sin(2 * np.pi * freq * t)), sample_rate)


def silence(seconds=1.0, sample_rate=22050) -> AudioBuffer:
    return AudioBuffer(np.zeros(int(round(seconds * sample_rate))), sample_rate)
