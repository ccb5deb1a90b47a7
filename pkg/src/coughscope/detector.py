"""Frame-level cough detection: multi-scale CNN features, Gaussian SVM, event segmentation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import dsp
from .dsp import AudioBuffer, FrameSpec, Spectrogram
from .nn import ConvBlock, Linear, Module, OptimizerState, no_grad, sgd_step
from .nn import tensor as T
from .nn.serialize import decode_weights, load_weights, save_weights
from .svm import SvmModel, smo_train

log = logging.getLogger(__name__)

BUNDLE_WEIGHTS = "detector.cswt"
BUNDLE_META = "detector.json"


@dataclass
class DetectorConfig:
    context: int = 16
    channels: tuple[int, ...] = (16, 32, 64, 128)
    pool: int = 2
    epochs: int = 60
    batch_size: int = 16
    base_lr: float = 0.01
    weight_decay: float = 1e-4
    C: float = 1.0
    gamma: float | None = None
    gap_tolerance: int = 1
    silence_ratio: float | None = dsp.SILENCE_RATIO
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.context < 4 or self.context % 2:
            raise ValueError(f"context must be even and >= 4, got {self.context}")
        if self.pool < 2:
            raise ValueError("pool must be >= 2")


@dataclass
class CoughEvent:
    start_s: float
    end_s: float
    frame_indices: range
    segment_spectrogram: Spectrogram
    peak_score: float

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


class Standardizer:
    """Per-dimension z-scoring with statistics from training data."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.where(np.asarray(std, dtype=np.float64) > 1e-12, std, 1.0)

    @classmethod
    def fit(cls, rows: np.ndarray) -> "Standardizer":
        rows = np.asarray(rows, dtype=np.float64)
        return cls(rows.mean(axis=0), rows.std(axis=0))

    @classmethod
    def identity(cls, dim: int = dsp.FEATURE_DIM) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, rows: np.ndarray) -> np.ndarray:
        return (rows - self.mean) / self.std


# -- frame geometry ---------------------------------------------------------------

def detection_spec(sample_rate_hz: int = dsp.TARGET_RATE_HZ) -> FrameSpec:
    return FrameSpec.detection_frames(sample_rate_hz)


def center_subframe(k: int, det: FrameSpec, feat: FrameSpec) -> int:
    """Sub-frame whose centre is closest to the centre of detection frame ``k``."""
    centre = k * det.hop_samples + det.frame_len_samples / 2
    return int(round((centre - feat.frame_len_samples / 2) / feat.hop_samples))


def build_frame_map(features: np.ndarray, target: int, context: int = 16,
                    standardizer: Standardizer | None = None) -> np.ndarray:
    """[1, 39, context] map of sub-frames [target - context/2, target + context/2),
    edge-replicated at the recording boundaries."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) == 0:
        raise ValueError("build_frame_map needs a non-empty (n_subframes, dim) feature matrix")
    if context < 4 or context % 2:
        raise ValueError("context must be even and >= 4")
    idx = np.clip(np.arange(target - context // 2, target + context // 2), 0, len(features) - 1)
    window = features[idx]
    if standardizer is not None:
        window = standardizer(window)
    return window.T[None, :, :]


def _pad_map(maps: np.ndarray, multiple: int) -> np.ndarray:
    *_, H, W = maps.shape
    ph, pw = (-H) % multiple, (-W) % multiple
    if ph == 0 and pw == 0:
        return maps
    pad = [(0, 0)] * (maps.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(maps, pad, mode="constant")


# -- network ---------------------------------------------------------------------

class DetectorNet(Module):
    def __init__(self, channels: Sequence[int] = (16, 32, 64, 128), pool: int = 2, seed: int = 0,
                 dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(seed)
        chans = [1] + list(channels)
        self.blocks = [ConvBlock(a, b, (pool, pool), rng=rng, dtype=dtype) for a, b in zip(chans[:-1], chans[1:])]
        self.aux_head = Linear(sum(channels), 1, rng=rng, dtype=dtype)
        self.pool = pool

    @property
    def feature_dim(self) -> int:
        return sum(b.conv.weight.shape[0] for b in self.blocks)

    def forward(self, maps) -> T.Tensor:
        return multi_scale_forward(self, maps)


def multi_scale_forward(net: DetectorNet, maps) -> T.Tensor:
    """Fused [B, sum(channels)] feature: every block output upsampled to block-1
    resolution, concatenated on channels, globally averaged over space."""
    x = maps.data if isinstance(maps, T.Tensor) else np.asarray(maps)
    if x.ndim == 3:
        x = x[None]
    x = _pad_map(x, net.pool ** len(net.blocks)).astype(net.blocks[0].conv.weight.data.dtype)
    h: T.Tensor = T.Tensor(x)
    outs = []
    for b, block in enumerate(net.blocks):
        h = block(h)
        outs.append(h if b == 0 else T.upsample_nearest(h, net.pool ** b))
    fused = T.concat(outs, axis=1)
    return T.mean(fused, axis=(2, 3))


def aux_logits(net: DetectorNet, maps) -> T.Tensor:
    return T.reshape(net.aux_head(multi_scale_forward(net, maps)), (-1,))


def extract_features(net: DetectorNet, maps: np.ndarray, batch: int = 256) -> np.ndarray:
    net.eval()
    out = []
    with no_grad():
        for i in range(0, len(maps), batch):
            out.append(multi_scale_forward(net, maps[i:i + batch]).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, net.feature_dim))


def classify_frame(model: SvmModel, feature: np.ndarray) -> tuple[str, float]:
    score = float(model.decision_function(np.asarray(feature)[None])[0])
    return ("cough" if score > 0 else "other"), score


def segment_events(frame_labels: Sequence[int], frame_starts_s: Sequence[float], frame_len_s: float,
                   scores: Sequence[float] | None = None, buffer: AudioBuffer | None = None,
                   gap_tolerance: int = 1) -> list[CoughEvent]:
    """Maximal runs of positive frames, bridging gaps of up to ``gap_tolerance`` negatives."""
    labels = [bool(v) and v > 0 for v in frame_labels]
    scores = list(scores) if scores is not None else [1.0] * len(labels)
    runs: list[list[int]] = []
    for k, positive in enumerate(labels):
        if not positive:
            continue
        if runs and k - runs[-1][1] - 1 <= gap_tolerance:
            runs[-1][1] = k
        else:
            runs.append([k, k])
    events = []
    for first, last in runs:
        start_s = float(frame_starts_s[first])
        end_s = float(frame_starts_s[last]) + frame_len_s
        if buffer is not None:
            a = int(round(start_s * buffer.sample_rate_hz))
            b = int(round(end_s * buffer.sample_rate_hz))
            seg = dsp.spectrogram(AudioBuffer(buffer.samples[a:b], buffer.sample_rate_hz), origin_time_s=start_s)
        else:
            seg = Spectrogram(np.zeros((dsp.FEATURE_FRAME_LEN // 2 + 1, 1)), origin_time_s=start_s)
        events.append(CoughEvent(start_s, end_s, range(first, last + 1), seg,
                                 float(max(scores[first:last + 1]))))
    return events


# -- training ----------------------------------------------------------------------

@dataclass
class Recording:
    buffer: AudioBuffer
    labels: list[int] = field(default_factory=list)
    name: str = ""


def recording_maps(rec: Recording, context: int, standardizer: Standardizer,
                   frames: Iterable[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Maps and labels for the labeled detection frames of one recording (label -1 skipped)."""
    det, feat = detection_spec(rec.buffer.sample_rate_hz), FrameSpec.feature_frames()
    features = dsp.feature_matrix(rec.buffer, feat)
    n_det = det.n_frames(len(rec.buffer))
    ks = range(min(n_det, len(rec.labels))) if frames is None else frames
    maps, labels = [], []
    for k in ks:
        if rec.labels[k] < 0:
            continue
        maps.append(build_frame_map(features, center_subframe(k, det, feat), context, standardizer))
        labels.append(rec.labels[k])
    if not maps:
        return np.zeros((0, 1, dsp.FEATURE_DIM, context)), np.zeros(0, dtype=np.int64)
    return np.stack(maps), np.asarray(labels, dtype=np.int64)


def fit_standardizer(recordings: Sequence[Recording]) -> Standardizer:
    return Standardizer.fit(np.concatenate([dsp.feature_matrix(r.buffer) for r in recordings]))


def train_network(net: DetectorNet, maps: np.ndarray, labels: np.ndarray, config: DetectorConfig,
                  rng: np.random.Generator) -> tuple[list[float], float]:
    """Stage 1: end-to-end training through the auxiliary logistic head.

    Returns the per-epoch mean mini-batch loss and the inference-mode loss on the
    full training set measured right after the first epoch.
    """
    state = OptimizerState(base_lr=config.base_lr, weight_decay=config.weight_decay,
                           max_epochs=config.epochs)
    params = net.parameters()
    history = []
    after_first = float("nan")
    net.train()
    for _ in state.epochs():
        order = rng.permutation(len(maps))
        losses = []
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            if len(idx) < 2:
                continue  # batch statistics need more than one example
            net.zero_grad()
            loss = T.bce_with_logits(aux_logits(net, maps[idx]), labels[idx])
            loss.backward()
            sgd_step(params, state)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.4f", state.epoch, history[-1])
        if state.epoch == 0:
            after_first = batch_loss(net, maps, labels)
            net.train()
    net.eval()
    return history, after_first


def batch_loss(net: DetectorNet, maps: np.ndarray, labels: np.ndarray) -> float:
    net.eval()
    with no_grad():
        return T.bce_with_logits(aux_logits(net, maps), labels).item()


class CoughDetector:
    """Trained (DetectorNet, SvmModel) pair plus the feature standardizer."""

    def __init__(self, net: DetectorNet, svm: SvmModel, standardizer: Standardizer,
                 config: DetectorConfig | None = None):
        self.net = net.eval()
        self.svm = svm
        self.standardizer = standardizer
        self.config = config or DetectorConfig()

    # frame scoring
    def frame_scores(self, buffer: AudioBuffer) -> tuple[np.ndarray, np.ndarray]:
        """Decision value per detection frame; frames judged silent score -inf."""
        det, feat = detection_spec(buffer.sample_rate_hz), FrameSpec.feature_frames()
        n_det = det.n_frames(len(buffer))
        starts = np.arange(n_det) * det.hop_samples / buffer.sample_rate_hz
        if n_det == 0:
            return starts, np.zeros(0)
        voiced = (dsp.voiced_mask(buffer, det, self.config.silence_ratio)
                  if self.config.silence_ratio is not None else np.ones(n_det, dtype=bool))
        scores = np.full(n_det, -np.inf)
        ks = np.flatnonzero(voiced)
        if len(ks):
            features = dsp.feature_matrix(buffer, feat)
            maps = np.stack([build_frame_map(features, center_subframe(k, det, feat), self.config.context,
                                             self.standardizer) for k in ks])
            scores[ks] = self.svm.decision_function(extract_features(self.net, maps))
        return starts, scores

    def detect(self, buffer: AudioBuffer) -> list[CoughEvent]:
        starts, scores = self.frame_scores(buffer)
        return self.events_from_scores(buffer, starts, scores)

    def events_from_scores(self, buffer, starts, scores) -> list[CoughEvent]:
        det = detection_spec(buffer.sample_rate_hz)
        return segment_events((scores > 0).astype(int), starts, det.frame_len_samples / buffer.sample_rate_hz,
                              scores, buffer, self.config.gap_tolerance)

    def stream(self, chunks: Iterable[np.ndarray], sample_rate_hz: int = dsp.TARGET_RATE_HZ) -> "StreamResult":
        return StreamingDetector(self, sample_rate_hz).run(chunks)

    # persistence
    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        extra = {"standardizer.mean": self.standardizer.mean, "standardizer.std": self.standardizer.std}
        (d / BUNDLE_WEIGHTS).write_bytes(save_weights(self.net, extra))
        meta = {"format": "coughscope.detector/1", "config": asdict(self.config), "svm": self.svm.to_dict(),
                "standardizer": {"mean": self.standardizer.mean.tolist(), "std": self.standardizer.std.tolist()}}
        (d / BUNDLE_META).write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, directory: str | Path) -> "CoughDetector":
        d = Path(directory)
        if not (d / BUNDLE_META).is_file() or not (d / BUNDLE_WEIGHTS).is_file():
            raise FileNotFoundError(f"{d}: not a detector bundle")
        meta = json.loads((d / BUNDLE_META).read_text())
        config = DetectorConfig(**meta["config"])
        net = DetectorNet(config.channels, config.pool, config.seed)
        load_weights(net, decode_weights((d / BUNDLE_WEIGHTS).read_bytes()))
        st = meta["standardizer"]
        return cls(net, SvmModel.from_dict(meta["svm"]), Standardizer(st["mean"], st["std"]), config)


def train_detector(recordings: Sequence[Recording], config: DetectorConfig | None = None,
                   frames: Sequence[Iterable[int] | None] | None = None) -> tuple[CoughDetector, dict]:
    """Stage 1 trains the CNN with the auxiliary head; stage 2 fits the SVM on frozen features."""
    config = config or DetectorConfig()
    rng = np.random.default_rng(config.seed)
    standardizer = fit_standardizer(recordings)
    frames = frames or [None] * len(recordings)
    parts = [recording_maps(r, config.context, standardizer, f) for r, f in zip(recordings, frames)]
    maps = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if not np.any(labels == 1):
        raise ValueError("training corpus has no positive (cough) frames")
    if not np.any(labels == 0):
        raise ValueError("training corpus has no negative frames")
    net = DetectorNet(config.channels, config.pool, config.seed)
    initial = batch_loss(net, maps, labels)
    t0 = time.perf_counter()
    history, after_first = train_network(net, maps, labels, config, rng)
    feats = extract_features(net, maps)
    svm = smo_train(feats, np.where(labels == 1, 1.0, -1.0), C=config.C, gamma=config.gamma)
    info = {"initial_loss": initial, "loss_after_epoch1": after_first, "epoch_losses": history, "n_frames": int(len(labels)),
            "n_support": int(len(svm.alphas)), "train_seconds": time.perf_counter() - t0}
    return CoughDetector(net, svm, standardizer, config), info


# -- streaming -----------------------------------------------------------------------

@dataclass
class StreamResult:
    starts: np.ndarray
    scores: np.ndarray
    events: list[CoughEvent]
    latencies_s: list[float]


class StreamingDetector:
    """Incremental detection over sample chunks.

    A detection frame is scored as soon as the sub-frames its context (and the
    delta features of that context) depend on have arrived. Silence gating uses the
    running mean of frame standard deviations seen so far, so it is causal.
    """

    def __init__(self, detector: CoughDetector, sample_rate_hz: int = dsp.TARGET_RATE_HZ):
        self.detector = detector
        self.rate = sample_rate_hz
        self.det = detection_spec(sample_rate_hz)
        self.feat = FrameSpec.feature_frames()
        self.samples = np.zeros(0)
        self.static = np.zeros((0, dsp.FEATURE_DIM))  # static MFCC (first 12) + scalars (last 3)
        self.scores: list[float] = []
        self.stds: list[float] = []
        self.latencies: list[float] = []

    def _update_static(self):
        n_sub = self.feat.n_frames(len(self.samples))
        have = len(self.static)
        if n_sub <= have:
            return
        lo = have * self.feat.hop_samples
        hi = (n_sub - 1) * self.feat.hop_samples + self.feat.frame_len_samples
        piece = AudioBuffer(self.samples[lo:hi], self.rate)
        m = dsp.feature_matrix(piece, self.feat)  # deltas here are discarded and recomputed later
        self.static = np.concatenate([self.static, m])

    def _frame_map(self, k: int) -> np.ndarray:
        ctx = self.detector.config.context
        j = center_subframe(k, self.det, self.feat)
        lo, hi = j - ctx // 2, j + ctx // 2
        n = len(self.static)
        a, b = max(0, lo - 2), min(n, hi + 2)
        track = self.static[a:b, :dsp.N_MFCC]
        full = np.concatenate([dsp.mfcc_deltas(track), self.static[a:b, 3 * dsp.N_MFCC:]], axis=1)
        idx = np.clip(np.arange(lo, hi), 0, n - 1) - a
        return self.detector.standardizer(full[idx]).T[None]

    def _ready(self, k: int) -> bool:
        need_samples = k * self.det.hop_samples + self.det.frame_len_samples
        j = center_subframe(k, self.det, self.feat)
        return len(self.samples) >= need_samples and len(self.static) >= j + self.detector.config.context // 2 + 2

    def _score(self, k: int):
        t0 = time.perf_counter()
        a = k * self.det.hop_samples
        frame = self.samples[a:a + self.det.frame_len_samples]
        self.stds.append(float(frame.std()))
        ratio = self.detector.config.silence_ratio
        mean_std = float(np.mean(self.stds))
        voiced = ratio is None or (mean_std > 0 and not self.stds[-1] < ratio * mean_std)
        if voiced:
            feats = extract_features(self.detector.net, self._frame_map(k)[None])
            score = float(self.detector.svm.decision_function(feats)[0])
        else:
            score = -np.inf
        self.scores.append(score)
        self.latencies.append(time.perf_counter() - t0)

    def push(self, chunk: np.ndarray):
        self.samples = np.concatenate([self.samples, np.asarray(chunk, dtype=np.float64)])
        self._update_static()
        while self._ready(len(self.scores)):
            self._score(len(self.scores))

    def finish(self) -> StreamResult:
        n_det = self.det.n_frames(len(self.samples))
        while len(self.scores) < n_det:
            self._score(len(self.scores))
        buffer = AudioBuffer(self.samples, self.rate)
        starts = np.arange(n_det) * self.det.hop_samples / self.rate
        scores = np.asarray(self.scores)
        events = self.detector.events_from_scores(buffer, starts, scores)
        return StreamResult(starts, scores, events, self.latencies)

    def run(self, chunks: Iterable[np.ndarray]) -> StreamResult:
        for chunk in chunks:
            self.push(chunk)
        return self.finish()
