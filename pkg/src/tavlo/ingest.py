"""Audio-driven clip and frame sampling plus spectrogram extraction.

Everything here is a pure function over plain numpy data. RMS energy is
measured over non-overlapping intervals (stride = interval length), clip
candidates slide one interval at a time, and frame picks combine RMS-peak
audio events with a Laplacian sharpness score.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, TavloWarning

# Half-width of the frame-selection window around each audio event peak.
EVENT_WINDOW_RADIUS = 0.1

# Additive floor before the log in compute_spectrogram.
LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    """Mono audio: float samples (expected range [-1, 1]) at a fixed rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise InvalidInputError("waveform must be a non-empty 1D array")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    """Log-magnitude short-time transform: freq_bins x time_steps."""

    values: np.ndarray
    frame_hop_seconds: float

    @property
    def n_freq_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_time_steps(self) -> int:
        return self.values.shape[1]


@dataclass
class FrameSequence:
    """RGB frames T x H x W x 3 in [0, 1] with per-frame timestamps."""

    frames: np.ndarray
    fps: float
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise InvalidInputError(f"frames must be T x H x W x 3, got {self.frames.shape}")
        if self.fps <= 0:
            raise InvalidInputError(f"fps must be positive, got {self.fps}")
        if self.timestamps is None:
            self.timestamps = np.arange(self.frames.shape[0], dtype=np.float64) / self.fps
        else:
            self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
            if self.timestamps.shape != (self.frames.shape[0],):
                raise InvalidInputError("one timestamp per frame required")
            if np.any(np.diff(self.timestamps) <= 0):
                raise InvalidInputError("timestamps must be strictly increasing")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class MediaClip:
    """A time-aligned pair of frames and audio."""

    frames: FrameSequence
    audio: Waveform


@dataclass
class AudioEvent:
    """An RMS-energy peak with its fixed +/-0.1 s frame-selection window."""

    peak_time: float
    peak_rms: float

    @property
    def window(self) -> tuple[float, float]:
        return (self.peak_time - EVENT_WINDOW_RADIUS, self.peak_time + EVENT_WINDOW_RADIUS)


@dataclass
class SamplingConfig:
    """Knobs for clip-candidate and frame selection."""

    rms_threshold: float = 0.01
    rms_interval: float = 1.0
    window_length: float = 10.0
    min_active_intervals: int = 5
    max_frames_per_clip: int = 5
    event_exclusion_radius: float = 0.7

    def __post_init__(self):
        for name in ("rms_threshold", "rms_interval", "window_length",
                     "min_active_intervals", "max_frames_per_clip", "event_exclusion_radius"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.min_active_intervals > self.window_length / self.rms_interval:
            raise InvalidInputError(
                "min_active_intervals cannot exceed the interval count per window")


def compute_rms(w: Waveform, interval_seconds: float = 1.0) -> np.ndarray:
    """Per-interval RMS energy; a trailing partial interval still counts."""
    n = int(round(interval_seconds * w.sample_rate))
    if n < 1:
        raise InvalidInputError("interval shorter than one sample")
    total = w.samples.size
    n_full = total // n
    sq = np.square(w.samples)
    out = []
    if n_full:
        out.append(np.sqrt(sq[: n_full * n].reshape(n_full, n).mean(axis=1)))
    tail = total - n_full * n
    if tail:
        out.append(np.sqrt(sq[n_full * n :].mean(keepdims=True)))
    return np.concatenate(out) if out else np.zeros(0)


def sample_clips(w: Waveform, cfg: SamplingConfig | None = None) -> list[float]:
    """Start times (seconds) of every window with enough active intervals.

    Windows are placed on complete RMS intervals only, so appending less
    than one interval of trailing silence never changes the result.
    """
    cfg = cfg or SamplingConfig()
    if w.duration < cfg.window_length:
        warnings.warn(
            f"waveform of {w.duration:.2f}s is shorter than the {cfg.window_length:.2f}s window",
            TavloWarning, stacklevel=2)
        return []
    rms = compute_rms(w, cfg.rms_interval)
    n_samples_per_interval = int(round(cfg.rms_interval * w.sample_rate))
    n_complete = w.samples.size // n_samples_per_interval
    per_window = int(round(cfg.window_length / cfg.rms_interval))
    active = rms[:n_complete] > cfg.rms_threshold
    starts = []
    for k in range(n_complete - per_window + 1):
        if int(active[k : k + per_window].sum()) >= cfg.min_active_intervals:
            starts.append(k * cfg.rms_interval)
    return starts


def detect_audio_events(w: Waveform, cfg: SamplingConfig | None = None) -> list[AudioEvent]:
    """RMS local maxima above threshold; plateau ties resolve to the earlier interval."""
    cfg = cfg or SamplingConfig()
    rms = compute_rms(w, cfg.rms_interval)
    n = rms.size
    events = []
    k = 0
    while k < n:
        j = k
        while j + 1 < n and rms[j + 1] == rms[k]:
            j += 1
        v = rms[k]
        rises = k == 0 or rms[k - 1] < v
        falls = j == n - 1 or rms[j + 1] < v
        if rises and falls and v > cfg.rms_threshold:
            events.append(AudioEvent(peak_time=(k + 0.5) * cfg.rms_interval, peak_rms=float(v)))
        k = j + 1
    return events


def laplacian_sharpness(frame: np.ndarray) -> float:
    """Variance of the 5-point Laplacian over the valid interior of a frame.

    Color frames are reduced to grayscale by an unweighted channel mean.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        frame = frame.mean(axis=2)
    if frame.ndim != 2 or frame.shape[0] < 3 or frame.shape[1] < 3:
        raise InvalidInputError(f"frame must be at least 3x3, got shape {frame.shape}")
    interior = frame[1:-1, 1:-1]
    resp = (frame[:-2, 1:-1] + frame[2:, 1:-1] + frame[1:-1, :-2] + frame[1:-1, 2:]
            - 4.0 * interior)
    return float(np.var(resp))


def sample_frames(fs: FrameSequence, events: list[AudioEvent],
                  cfg: SamplingConfig | None = None) -> list[int]:
    """Pick at most ``max_frames_per_clip`` sharp frames near distinct audio events.

    Events are consumed in descending peak RMS (earlier peak wins a tie);
    an event whose peak lies within the exclusion radius of an already
    accepted event is dropped, as is an event whose window holds no frame.
    """
    cfg = cfg or SamplingConfig()
    if any(events[i].peak_time > events[i + 1].peak_time for i in range(len(events) - 1)):
        raise InvalidInputError("events must be sorted by peak_time")
    order = sorted(range(len(events)), key=lambda i: (-events[i].peak_rms, events[i].peak_time))
    sharpness_cache: dict[int, float] = {}
    accepted_times: list[float] = []
    chosen: list[int] = []
    for idx in order:
        if len(chosen) >= cfg.max_frames_per_clip:
            break
        ev = events[idx]
        if any(abs(ev.peak_time - t) <= cfg.event_exclusion_radius for t in accepted_times):
            continue
        lo, hi = ev.window
        in_window = np.flatnonzero((fs.timestamps >= lo) & (fs.timestamps <= hi))
        if in_window.size == 0:
            warnings.warn(
                f"audio event at {ev.peak_time:.2f}s has no frame in its window",
                TavloWarning, stacklevel=2)
            continue
        for f in in_window:
            if int(f) not in sharpness_cache:
                sharpness_cache[int(f)] = laplacian_sharpness(fs.frames[int(f)])
        best = max(in_window, key=lambda f: (sharpness_cache[int(f)], -int(f)))
        accepted_times.append(ev.peak_time)
        if int(best) not in chosen:
            chosen.append(int(best))
    return sorted(chosen)


def compute_spectrogram(w: Waveform, n_freq_bins: int = 128,
                        hop_seconds: float = 0.015625) -> Spectrogram:
    """Left-aligned log-magnitude STFT with a periodic Hann window.

    The FFT length is 2 * (n_freq_bins - 1) so the one-sided transform has
    exactly ``n_freq_bins`` rows; frames past the signal end are zero-padded.
    """
    if n_freq_bins < 2:
        raise InvalidInputError("need at least 2 frequency bins")
    hop = hop_seconds * w.sample_rate
    if hop < 1:
        raise InvalidInputError("hop shorter than one sample")
    n_fft = 2 * (n_freq_bins - 1)
    window = np.hanning(n_fft + 1)[:-1]
    n_steps = math.ceil(w.duration / hop_seconds)
    mags = np.empty((n_freq_bins, n_steps), dtype=np.float64)
    for k in range(n_steps):
        start = int(round(k * hop))
        seg = w.samples[start : start + n_fft]
        if seg.size < n_fft:
            seg = np.pad(seg, (0, n_fft - seg.size))
        mags[:, k] = np.abs(np.fft.rfft(seg * window))
    return Spectrogram(values=np.log(mags + LOG_FLOOR), frame_hop_seconds=hop_seconds)
