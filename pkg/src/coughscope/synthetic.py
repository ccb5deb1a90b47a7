"""Seeded synthetic audio: pink-noise backgrounds, tone-burst "coughs", pattern classes."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import write_wav
from .detector import Recording, detection_spec
from .dsp import TARGET_RATE_HZ, AudioBuffer, spectrogram
from .manifest import write_label_track, write_manifest

RATE = TARGET_RATE_HZ

# synthetic pattern per class; the first five stand in for the disease classes
PATTERN_CLASSES = ("low_harmonic", "high_tone", "up_chirp", "band_noise", "click_train")
DISEASE_NAMES = ("covid19", "bronchitis", "pharyngitis", "pertussis", "healthy")


def pink_noise(n: int, rng: np.random.Generator, std: float = 1.0) -> np.ndarray:
    """1/f-shaped noise via spectral shaping of white noise."""
    if n == 0:
        return np.zeros(0)
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return x * (std / (x.std() + 1e-12))


def envelope(n: int, attack: float = 0.08) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n, endpoint=False)
    rise = np.clip(t / attack, 0.0, 1.0)
    return rise * np.exp(-4.0 * t)


def tone_burst(duration_s: float, rng: np.random.Generator, amplitude: float = 0.5) -> np.ndarray:
    """Cough-like burst: a few decaying harmonics plus a broadband noise onset."""
    n = int(duration_s * RATE)
    t = np.arange(n) / RATE
    f0 = rng.uniform(250.0, 600.0)
    tone = sum(np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi)) / h for h in (1, 2, 3, 4))
    noise = rng.standard_normal(n) * np.exp(-12.0 * t / max(duration_s, 1e-3))
    burst = (tone / 1.5 + 0.6 * noise) * envelope(n)
    return amplitude * burst / (np.abs(burst).max() + 1e-12)


def frame_labels(n_samples: int, bursts: list[tuple[int, int]]) -> list[int]:
    """A detection frame is positive when a burst covers at least half of its central
    half-frame, or when at least half of a (shorter) burst lies inside it."""
    det = detection_spec(RATE)
    quarter = det.frame_len_samples // 4
    labels = []
    for k in range(det.n_frames(n_samples)):
        lo = k * det.hop_samples + quarter
        hi = lo + 2 * quarter
        positive = False
        for s, e in bursts:
            overlap = max(0, min(hi, e) - max(lo, s))
            if overlap >= min(quarter, (e - s) / 2):
                positive = True
        labels.append(int(positive))
    return labels


@dataclass
class DetectionClip:
    recording: Recording
    target_frame: int
    label: int


CLIP_S = 1.28


def detection_clip(positive: bool, rng: np.random.Generator) -> DetectionClip:
    """1.28 s of pink noise; positives carry a burst centred near the middle detection frame."""
    n = int(CLIP_S * RATE)
    x = pink_noise(n, rng, std=rng.uniform(0.02, 0.06))
    det = detection_spec(RATE)
    target = (det.n_frames(n) - 1) // 2
    bursts = []
    if positive:
        dur = rng.uniform(0.08, 0.2)
        m = int(dur * RATE)
        centre = target * det.hop_samples + det.frame_len_samples // 2 + int(rng.uniform(-0.04, 0.04) * RATE)
        s = centre - m // 2
        x[s:s + m] += tone_burst(dur, rng, amplitude=rng.uniform(0.25, 0.6))
        bursts.append((s, s + m))
    labels = frame_labels(n, bursts)
    return DetectionClip(Recording(AudioBuffer(np.clip(x, -1, 1), RATE), labels), target, labels[target])


def detection_clips(n_frames: int, rng: np.random.Generator) -> list[DetectionClip]:
    """Half positive, half background-only, in shuffled order."""
    flags = np.array([True] * (n_frames // 2) + [False] * (n_frames - n_frames // 2))
    rng.shuffle(flags)
    return [detection_clip(bool(f), rng) for f in flags]


def session_recording(duration_s: float, burst_times_s: list[float], rng: np.random.Generator,
                      noise_std: float = 0.03) -> tuple[AudioBuffer, list[tuple[int, int]]]:
    n = int(duration_s * RATE)
    x = pink_noise(n, rng, std=noise_std)
    bursts = []
    for t0 in burst_times_s:
        dur = rng.uniform(0.1, 0.2)
        s = int(t0 * RATE)
        seg = tone_burst(dur, rng, amplitude=0.5)[: n - s]
        x[s:s + len(seg)] += seg
        bursts.append((s, s + len(seg)))
    return AudioBuffer(np.clip(x, -1, 1), RATE), bursts


# -- pattern classes for few-shot experiments ----------------------------------------

def pattern_sound(kind: str, rng: np.random.Generator, duration_s: float | None = None) -> AudioBuffer:
    dur = rng.uniform(0.2, 0.6) if duration_s is None else duration_s
    n = int(dur * RATE)
    t = np.arange(n) / RATE
    if kind == "low_harmonic":
        f0 = rng.uniform(150, 250)
        x = sum(np.sin(2 * np.pi * f0 * h * t) / h for h in range(1, 6))
    elif kind == "high_tone":
        f = rng.uniform(2800, 3400)
        x = np.sin(2 * np.pi * f * t) + 0.3 * np.sin(2 * np.pi * 2 * f * t)
    elif kind == "up_chirp":
        f_lo, f_hi = rng.uniform(400, 700), rng.uniform(3500, 4500)
        phase = 2 * np.pi * (f_lo * t + (f_hi - f_lo) * t * t / (2 * dur))
        x = np.sin(phase)
    elif kind == "band_noise":
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1 / RATE)
        lo = rng.uniform(900, 1100)
        spec[(freqs < lo) | (freqs > lo + 1000)] = 0
        x = np.fft.irfft(spec, n)
    elif kind == "click_train":
        rate = rng.uniform(30, 50)
        x = np.zeros(n)
        period = int(RATE / rate)
        x[::period] = 1.0
        x = np.convolve(x, np.hanning(32), mode="same")
    else:
        raise ValueError(f"unknown pattern {kind!r}")
    x = x * np.hanning(n) ** 0.25
    x = x / (np.abs(x).max() + 1e-12) * rng.uniform(0.3, 0.7)
    x = x + pink_noise(n, rng, std=0.01)
    return AudioBuffer(np.clip(x, -1, 1), RATE)


def pattern_dataset(kinds, n_per_class: int, rng: np.random.Generator) -> dict[str, list]:
    """class name -> list of spectrograms of variable length."""
    return {k: [spectrogram(pattern_sound(k, rng)) for _ in range(n_per_class)] for k in kinds}


# -- on-disk corpora ------------------------------------------------------------------------

def write_detection_corpus(directory: str | Path, n_frames: int, seed: int) -> Path:
    """WAV clips + label tracks + manifest (``path,label_track_path``). Returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i, clip in enumerate(detection_clips(n_frames, rng)):
        wav, lab = f"clip{i:04d}.wav", f"clip{i:04d}.labels"
        write_wav(d / wav, clip.recording.buffer)
        write_label_track(d / lab, clip.recording.labels)
        rows.append({"path": wav, "label_track_path": lab})
    manifest = d / "corpus.csv"
    write_manifest(manifest, ("path", "label_track_path"), rows)
    return manifest


def write_class_corpus(directory: str | Path, n_per_class: int, seed: int,
                       names=DISEASE_NAMES, kinds=PATTERN_CLASSES) -> Path:
    """WAV exemplars per class + manifest (``class_name,spectrogram_path``)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for name, kind in zip(names, kinds):
        for i in range(n_per_class):
            wav = f"{name}_{i:03d}.wav"
            write_wav(d / wav, pattern_sound(kind, rng))
            rows.append({"class_name": name, "spectrogram_path": wav})
    manifest = d / "classes.csv"
    write_manifest(manifest, ("class_name", "spectrogram_path"), rows)
    return manifest
