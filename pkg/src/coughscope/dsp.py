"""Signal pipeline: resampling, framing, radix-2 FFT, silence removal and frame features."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

TARGET_RATE_HZ = 16000
FEATURE_FRAME_LEN = 1024
FEATURE_HOP = 512
DETECTION_FRAME_MS = 320.0
N_MEL_FILTERS = 26
N_MFCC = 12
LOG_FLOOR = 1e-10
SILENCE_RATIO = 0.5
FEATURE_DIM = 3 * N_MFCC + 3


class Window(str, Enum):
    HAMMING = "hamming"
    RECTANGULAR = "rectangular"


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio samples must be finite")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class FrameSpec:
    frame_len_samples: int
    hop_samples: int
    window: Window = Window.HAMMING

    def __post_init__(self):
        if self.frame_len_samples <= 0 or self.hop_samples <= 0:
            raise ValueError("frame length and hop must be positive")
        if self.hop_samples > self.frame_len_samples:
            raise ValueError("hop_samples must not exceed frame_len_samples")
        object.__setattr__(self, "window", Window(self.window))

    @classmethod
    def feature_frames(cls) -> "FrameSpec":
        """1024-sample Hamming frames with 50% overlap."""
        return cls(FEATURE_FRAME_LEN, FEATURE_HOP, Window.HAMMING)

    @classmethod
    def detection_frames(cls, sample_rate_hz: int = TARGET_RATE_HZ,
                         window: Window = Window.RECTANGULAR) -> "FrameSpec":
        """320 ms frames with 50% overlap."""
        n = int(round(sample_rate_hz * DETECTION_FRAME_MS / 1000.0))
        return cls(n, n // 2, window)

    def window_values(self) -> np.ndarray:
        if self.window is Window.HAMMING:
            return np.hamming(self.frame_len_samples)
        return np.ones(self.frame_len_samples)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_len_samples:
            return 0
        return (n_samples - self.frame_len_samples) // self.hop_samples + 1


@dataclass
class FrameFeatures:
    mfcc: np.ndarray
    zcr: float
    crest_factor: float
    energy: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.mfcc, [self.zcr, self.crest_factor, self.energy]])


@dataclass
class Spectrogram:
    """Log-magnitude spectrogram, frequency bins x time frames."""

    data: np.ndarray
    frame_spec: FrameSpec = field(default_factory=FrameSpec.feature_frames)
    origin_time_s: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] < 1:
            raise ValueError(f"spectrogram must be 2-D with T >= 1, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("spectrogram entries must be finite")

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


# -- resampling ---------------------------------------------------------------

def _lowpass_taps(cutoff: float, half_width: int, beta: float = 8.6) -> np.ndarray:
    """Kaiser-windowed sinc; ``cutoff`` is in cycles/sample (< 0.5)."""
    n = np.arange(-half_width, half_width + 1)
    taps = 2 * cutoff * np.sinc(2 * cutoff * n) * np.kaiser(2 * half_width + 1, beta)
    return taps / taps.sum()


def resample(buffer: AudioBuffer, target_rate_hz: int, half_width: int = 64) -> AudioBuffer:
    """Windowed-sinc anti-alias filter (when downsampling) followed by linear interpolation."""
    if target_rate_hz <= 0:
        raise ValueError("target_rate_hz must be positive")
    src = buffer.sample_rate_hz
    x = buffer.samples
    if len(x) == 0 or src == target_rate_hz:
        return AudioBuffer(x.copy(), target_rate_hz)
    if target_rate_hz < src:
        # cutoff a little under the new Nyquist so the transition band stays below it
        taps = _lowpass_taps(0.45 * target_rate_hz / src, half_width)
        padded = np.pad(x, half_width, mode="edge")
        x = np.convolve(padded, taps, mode="valid")
    n_out = max(1, int(round(len(x) * target_rate_hz / src)))
    positions = np.arange(n_out) * (src / target_rate_hz)
    out = np.interp(positions, np.arange(len(x)), x)
    return AudioBuffer(out, target_rate_hz)


# -- framing ------------------------------------------------------------------

def frame_starts(n_samples: int, spec: FrameSpec) -> np.ndarray:
    return np.arange(spec.n_frames(n_samples)) * spec.hop_samples


def frame_signal(buffer: AudioBuffer | np.ndarray, spec: FrameSpec, apply_window: bool = True) -> np.ndarray:
    """Return an (n_frames, frame_len) array; the trailing partial frame is dropped."""
    x = buffer.samples if isinstance(buffer, AudioBuffer) else np.asarray(buffer, dtype=np.float64)
    if len(x) < spec.frame_len_samples:
        raise ValueError(
            f"input too short: {len(x)} samples < frame length {spec.frame_len_samples}")
    starts = frame_starts(len(x), spec)
    idx = starts[:, None] + np.arange(spec.frame_len_samples)[None, :]
    frames = x[idx]
    if apply_window:
        frames = frames * spec.window_values()[None, :]
    return frames


# -- FFT ----------------------------------------------------------------------

def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis."""
    x = np.asarray(x)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    a = x[..., _bit_reverse_indices(n)].astype(np.complex128)
    lead = a.shape[:-1]
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(*lead, n // size, size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        size *= 2
    return a


def fft_magnitude(frame: np.ndarray) -> np.ndarray:
    """|DFT| for bins 0..N/2; works row-wise on 2-D input."""
    spectrum = fft(frame)
    n = spectrum.shape[-1]
    return np.abs(spectrum[..., : n // 2 + 1])


def _pad_pow2(frames: np.ndarray) -> np.ndarray:
    n = frames.shape[-1]
    m = next_pow2(n)
    if m == n:
        return frames
    pad = [(0, 0)] * (frames.ndim - 1) + [(0, m - n)]
    return np.pad(frames, pad)


# -- silence removal ----------------------------------------------------------

def frame_stds(buffer: AudioBuffer, spec: FrameSpec) -> np.ndarray:
    if len(buffer) < spec.frame_len_samples:
        return np.zeros(0)
    return frame_signal(buffer, spec, apply_window=False).std(axis=1)


def voiced_mask(buffer: AudioBuffer, spec: FrameSpec, threshold_ratio: float = SILENCE_RATIO) -> np.ndarray:
    if threshold_ratio <= 0:
        raise ValueError("threshold_ratio must be positive")
    stds = frame_stds(buffer, spec)
    if stds.size == 0:
        return np.zeros(0, dtype=bool)
    mean_std = stds.mean()
    if mean_std == 0:
        return np.zeros(len(stds), dtype=bool)
    return ~(stds < threshold_ratio * mean_std)


def remove_silence(buffer: AudioBuffer, spec: FrameSpec,
                   threshold_ratio: float = SILENCE_RATIO) -> list[tuple[int, int]]:
    """Voiced (start_sample, end_sample) regions; overlapping/adjacent voiced frames merge."""
    mask = voiced_mask(buffer, spec, threshold_ratio)
    regions: list[tuple[int, int]] = []
    for k in np.flatnonzero(mask):
        start = int(k * spec.hop_samples)
        end = start + spec.frame_len_samples
        if regions and start <= regions[-1][1]:
            regions[-1] = (regions[-1][0], end)
        else:
            regions.append((start, end))
    return regions


def extract_regions(buffer: AudioBuffer, regions: Sequence[tuple[int, int]]) -> AudioBuffer:
    if not regions:
        return AudioBuffer(np.zeros(0), buffer.sample_rate_hz)
    return AudioBuffer(np.concatenate([buffer.samples[s:e] for s, e in regions]), buffer.sample_rate_hz)


# -- scalar frame features ----------------------------------------------------

def zero_crossing_rate(frame: np.ndarray) -> float:
    x = np.asarray(frame, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("zero_crossing_rate needs at least 2 samples")
    return float(np.count_nonzero(x[1:] * x[:-1] < 0) / (len(x) - 1))


def energy(frame: np.ndarray) -> float:
    """RMS of the frame."""
    x = np.asarray(frame, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("energy of an empty frame")
    return float(np.sqrt(np.mean(x * x)))


def crest_factor(frame: np.ndarray) -> float:
    """Peak |x| over RMS; 0 for an all-zero frame."""
    rms = energy(frame)
    if rms == 0.0:
        return 0.0
    return float(np.max(np.abs(frame)) / rms)


# -- MFCC ---------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft: int, sample_rate_hz: int, n_filters: int = N_MEL_FILTERS,
                   fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    """(n_filters, n_fft/2+1) triangular filters evaluated at exact bin frequencies."""
    fmax = min(fmax, sample_rate_hz / 2.0)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_filters + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Orthonormal DCT-II rows 0..n_out-1."""
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    m = np.sqrt(2.0 / n_in) * np.cos(np.pi * k * (2 * n + 1) / (2 * n_in))
    m[0] /= np.sqrt(2.0)
    return m


_MFCC_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _mfcc_matrices(n_fft: int, sample_rate_hz: int) -> tuple[np.ndarray, np.ndarray]:
    key = (n_fft, sample_rate_hz)
    if key not in _MFCC_CACHE:
        _MFCC_CACHE[key] = (mel_filterbank(n_fft, sample_rate_hz), dct_matrix(N_MFCC, N_MEL_FILTERS))
    return _MFCC_CACHE[key]


def mfcc(frame: np.ndarray, sample_rate_hz: int = TARGET_RATE_HZ) -> np.ndarray:
    """12 cepstral coefficients (c0..c11) of an already windowed frame.

    Works row-wise on a 2-D stack of frames. Frames shorter than 1024 are zero-padded.
    """
    x = np.asarray(frame, dtype=np.float64)
    if x.shape[-1] < FEATURE_FRAME_LEN:
        pad = [(0, 0)] * (x.ndim - 1) + [(0, FEATURE_FRAME_LEN - x.shape[-1])]
        x = np.pad(x, pad)
    x = _pad_pow2(x)
    power = fft_magnitude(x) ** 2
    fbank, dct = _mfcc_matrices(x.shape[-1], sample_rate_hz)
    log_mel = np.log(np.maximum(power @ fbank.T, LOG_FLOOR))
    return log_mel @ dct.T


def mfcc_deltas(track: np.ndarray) -> np.ndarray:
    """Append first and second symmetric differences (edge-replicated) to a (T, 12) track."""
    c = np.asarray(track, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("mfcc track must be 2-D (T, n_coeffs)")
    if len(c) < 3:
        zeros = np.zeros_like(c)
        return np.concatenate([c, zeros, zeros], axis=1)

    def delta(v):
        p = np.concatenate([v[:1], v, v[-1:]], axis=0)
        return (p[2:] - p[:-2]) / 2.0

    d1 = delta(c)
    return np.concatenate([c, d1, delta(d1)], axis=1)


# -- feature tracks -----------------------------------------------------------

def feature_matrix(buffer: AudioBuffer, spec: FrameSpec | None = None) -> np.ndarray:
    """(n_subframes, 39) matrix: 36 MFCC+deltas, ZCR, crest factor, energy.

    Scalar features use the raw (unwindowed) sub-frame; MFCC uses the windowed one.
    """
    spec = spec or FrameSpec.feature_frames()
    raw = frame_signal(buffer, spec, apply_window=False)
    static = mfcc(raw * spec.window_values()[None, :], buffer.sample_rate_hz)
    rms = np.sqrt(np.mean(raw * raw, axis=1))
    peak = np.max(np.abs(raw), axis=1)
    crest = np.divide(peak, rms, out=np.zeros_like(rms), where=rms > 0)
    zcr = np.count_nonzero(raw[:, 1:] * raw[:, :-1] < 0, axis=1) / (raw.shape[1] - 1)
    return np.column_stack([mfcc_deltas(static), zcr, crest, rms])


def frame_features(buffer: AudioBuffer, spec: FrameSpec | None = None) -> list[FrameFeatures]:
    m = feature_matrix(buffer, spec)
    n = 3 * N_MFCC
    return [FrameFeatures(row[:n].copy(), float(row[n]), float(row[n + 1]), float(row[n + 2])) for row in m]


def spectrogram(buffer: AudioBuffer, spec: FrameSpec | None = None,
                origin_time_s: float = 0.0) -> Spectrogram:
    """Column t = log(|FFT(frame t)| + eps)."""
    spec = spec or FrameSpec.feature_frames()
    frames = _pad_pow2(frame_signal(buffer, spec))
    return Spectrogram(np.log(fft_magnitude(frames) + LOG_FLOOR).T, spec, origin_time_s)


def iter_chunks(x: np.ndarray, size: int) -> Iterator[np.ndarray]:
    for i in range(0, len(x), size):
        yield x[i:i + size]
