"""WAV ingestion (16-bit PCM) and delimited-text dumps of features and spectrograms."""

from __future__ import annotations

import io
import wave
from pathlib import Path
from typing import Iterator

import numpy as np

from .dsp import (FEATURE_DIM, N_MFCC, TARGET_RATE_HZ, AudioBuffer, FrameSpec, Spectrogram,
                  feature_matrix, resample, spectrogram)


class AudioFormatError(ValueError):
    """Raised for unreadable or unsupported audio files."""


def _open_wave(path):
    try:
        return wave.open(str(path), "rb")
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: invalid WAV file ({exc})") from exc


def _decode(raw: bytes, n_channels: int) -> np.ndarray:
    pcm = np.frombuffer(raw, dtype="<i2")
    if n_channels > 1:
        pcm = pcm[: len(pcm) - len(pcm) % n_channels].reshape(-1, n_channels)[:, 0]
    return pcm.astype(np.float64) / 32768.0


def read_wav(path: str | Path, target_rate_hz: int | None = TARGET_RATE_HZ) -> AudioBuffer:
    """Read 16-bit PCM WAV (first channel if stereo), resampled to ``target_rate_hz``."""
    path = Path(path)
    if not path.is_file():
        raise AudioFormatError(f"{path}: no such file")
    with _open_wave(path) as wf:
        if wf.getsampwidth() != 2:
            raise AudioFormatError(f"{path}: only 16-bit PCM is supported (got {8 * wf.getsampwidth()}-bit)")
        rate = wf.getframerate()
        if rate <= 0:
            raise AudioFormatError(f"{path}: invalid sample rate {rate}")
        samples = _decode(wf.readframes(wf.getnframes()), wf.getnchannels())
    buf = AudioBuffer(samples, rate)
    if target_rate_hz is not None and rate != target_rate_hz:
        buf = resample(buf, target_rate_hz)
    return buf


def stream_wav(path: str | Path, chunk_frames: int = 2560) -> Iterator[tuple[np.ndarray, int]]:
    """Yield (samples, sample_rate) chunks as they are read from disk or a pipe."""
    with _open_wave(path) as wf:
        if wf.getsampwidth() != 2:
            raise AudioFormatError(f"{path}: only 16-bit PCM is supported")
        rate = wf.getframerate()
        while True:
            raw = wf.readframes(chunk_frames)
            if not raw:
                break
            yield _decode(raw, wf.getnchannels()), rate


def write_wav(path: str | Path, buffer: AudioBuffer) -> None:
    pcm = np.clip(np.round(buffer.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(buffer.sample_rate_hz)
        wf.writeframes(pcm.tobytes())


# -- feature dump ---------------------------------------------------------------

FEATURE_COLUMNS = (
    ["frame_index", "start_time_s"]
    + [f"mfcc{i}" for i in range(N_MFCC)]
    + [f"d_mfcc{i}" for i in range(N_MFCC)]
    + [f"dd_mfcc{i}" for i in range(N_MFCC)]
    + ["zcr", "crest", "energy"]
)


def format_feature_dump(features: np.ndarray, spec: FrameSpec, sample_rate_hz: int) -> str:
    out = io.StringIO()
    out.write(",".join(FEATURE_COLUMNS) + "\n")
    for k, row in enumerate(features):
        start = k * spec.hop_samples / sample_rate_hz
        out.write(",".join([str(k), repr(float(start))] + [repr(float(v)) for v in row]) + "\n")
    return out.getvalue()


def write_feature_dump(path: str | Path, buffer: AudioBuffer, spec: FrameSpec | None = None) -> int:
    spec = spec or FrameSpec.feature_frames()
    features = feature_matrix(buffer, spec)
    Path(path).write_text(format_feature_dump(features, spec, buffer.sample_rate_hz))
    return len(features)


def read_feature_dump(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Return (start_times, features[n, 39])."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split(",") != FEATURE_COLUMNS:
        raise ValueError(f"{path}: not a feature dump (bad header)")
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]]).reshape(-1, len(FEATURE_COLUMNS))
    return rows[:, 1], rows[:, 2:2 + FEATURE_DIM]


# -- spectrogram dump -------------------------------------------------------------

def write_spectrogram_dump(path: str | Path, spec_: Spectrogram) -> None:
    """One row per time frame, one column per frequency bin."""
    out = io.StringIO()
    out.write(f"# spectrogram bins={spec_.data.shape[0]} frames={spec_.data.shape[1]} "
              f"frame_len={spec_.frame_spec.frame_len_samples} hop={spec_.frame_spec.hop_samples} "
              f"origin={spec_.origin_time_s!r}\n")
    for col in spec_.data.T:
        out.write(",".join(repr(float(v)) for v in col) + "\n")
    Path(path).write_text(out.getvalue())


def read_spectrogram_dump(path: str | Path) -> Spectrogram:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# spectrogram"):
        raise ValueError(f"{path}: not a spectrogram dump")
    meta = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    data = np.array([[float(v) for v in line.split(",")] for line in lines[1:] if line]).T
    spec = FrameSpec(int(meta["frame_len"]), int(meta["hop"]))
    return Spectrogram(data, spec, float(meta["origin"]))


def load_spectrogram(path: str | Path) -> Spectrogram:
    """Spectrogram from a dump file, or recomputed from a WAV."""
    path = Path(path)
    if path.suffix.lower() == ".wav":
        return spectrogram(read_wav(path))
    return read_spectrogram_dump(path)
