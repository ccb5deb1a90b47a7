"""Episodic c-way k-shot classification with attentional similarity.

Each spectrogram is embedded to X (D x T, time length preserved) and an attention
vector A over its T columns. The similarity of two inputs is the bilinear form
``A_i^T (X_i^T X_j) A_j``, which accepts inputs of different lengths.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dsp import Spectrogram
from .nn import Conv2d, ConvBlock, Module, OptimizerState, no_grad, sgd_step
from .nn import tensor as T
from .nn.serialize import decode_weights, load_weights, save_weights

log = logging.getLogger(__name__)

BUNDLE_WEIGHTS = "fewshot.cswt"
BUNDLE_META = "fewshot.json"


class EpisodeError(ValueError):
    pass


@dataclass
class FewShotConfig:
    c: int = 5
    k: int = 5
    channels: tuple[int, ...] = (16, 32, 64, 128)
    attention_hidden: int = 64
    radius: float = 10.0 ** 0.5
    epochs: int = 60
    episodes_per_epoch: int = 40
    episodes_per_step: int = 4
    base_lr: float = 0.01
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(v) for v in self.channels)
        if self.c < 2 or self.k < 1:
            raise ValueError("need c >= 2 and k >= 1")


@dataclass
class ClassScore:
    class_name: str
    similarity: float
    probability: float


@dataclass
class EpisodeSpec:
    """Indices into a class -> examples mapping.

    ``support`` holds (class position, example index) pairs, k per class, grouped by
    class; ``query`` is one more pair whose class position is the hidden label.
    """

    classes: list[str]
    k: int
    support: list[tuple[int, int]]
    query: tuple[int, int]

    @property
    def c(self) -> int:
        return len(self.classes)

    @property
    def label(self) -> int:
        return self.query[0]

    def check(self) -> None:
        counts = np.bincount([ci for ci, _ in self.support], minlength=self.c)
        if len(self.support) != self.c * self.k or not np.all(counts == self.k):
            raise EpisodeError("support set must hold exactly k examples of each class")
        if len(set(self.support)) != len(self.support):
            raise EpisodeError("duplicate support example")
        if self.query in self.support:
            raise EpisodeError("query example also appears in the support set")
        if not 0 <= self.query[0] < self.c:
            raise EpisodeError("query class outside the episode")


def sample_episode(dataset: Mapping[str, Sequence], c: int, k: int, rng: np.random.Generator) -> EpisodeSpec:
    """c random classes, k random support examples each, and one query drawn from the
    remaining examples of one of those classes."""
    names = sorted(dataset)
    if len(names) < c:
        raise EpisodeError(f"dataset has {len(names)} classes, episode needs {c}")
    for name in names:
        if len(dataset[name]) < k + 1:
            raise EpisodeError(f"class {name!r} has {len(dataset[name])} examples, need at least {k + 1}")
    chosen = [names[i] for i in rng.choice(len(names), size=c, replace=False)]
    qc = int(rng.integers(c))
    support, query = [], None
    for ci, name in enumerate(chosen):
        picks = rng.choice(len(dataset[name]), size=k + 1 if ci == qc else k, replace=False)
        support.extend((ci, int(p)) for p in picks[:k])
        if ci == qc:
            query = (ci, int(picks[k]))
    return EpisodeSpec(chosen, k, support, query)


# -- similarity -----------------------------------------------------------------------

def attentional_similarity(x_i: np.ndarray, a_i: np.ndarray, x_j: np.ndarray, a_j: np.ndarray) -> float:
    """sum_t sum_u A_i(t) A_j(u) <X_i[:, t], X_j[:, u]>."""
    x_i, x_j = np.asarray(x_i, dtype=np.float64), np.asarray(x_j, dtype=np.float64)
    a_i, a_j = np.asarray(a_i, dtype=np.float64), np.asarray(a_j, dtype=np.float64)
    if x_i.ndim != 2 or x_j.ndim != 2:
        raise T.ShapeError("embeddings must be D x T matrices")
    if x_i.shape[0] != x_j.shape[0]:
        raise T.ShapeError(f"channel dimension mismatch: {x_i.shape[0]} vs {x_j.shape[0]}")
    if a_i.shape != (x_i.shape[1],) or a_j.shape != (x_j.shape[1],):
        raise T.ShapeError("attention length must match the embedding's time length")
    return float(a_i @ (x_i.T @ x_j) @ a_j)


def softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - np.max(v))
    return e / e.sum()


# -- networks ----------------------------------------------------------------------------

def prepare_input(spec: Spectrogram | np.ndarray) -> np.ndarray:
    """Standardize a log spectrogram over all its entries."""
    data = spec.data if isinstance(spec, Spectrogram) else np.asarray(spec, dtype=np.float64)
    std = data.std()
    return (data - data.mean()) / (std if std > 1e-12 else 1.0)


class EmbeddingNet(Module):
    """Conv blocks pooling only the frequency axis, then a mean over frequency: D x T out.

    Each output column is centred over channels and scaled to norm ``radius``, so
    similarities lie in [-radius^2, radius^2] and the radius acts as the softmax
    temperature.
    """

    def __init__(self, channels: Sequence[int] = (16, 32, 64, 128), seed: int = 0,
                 radius: float = 10.0 ** 0.5, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(seed)
        chans = [1] + list(channels)
        self.blocks = [ConvBlock(a, b, (2, 1), rng=rng, dtype=dtype) for a, b in zip(chans[:-1], chans[1:])]
        self.radius = radius

    @property
    def out_dim(self) -> int:
        return self.blocks[-1].conv.weight.shape[0]

    def forward(self, x) -> T.Tensor:
        """[B, 1, F, T] -> [B, D, T]"""
        h = x
        for block in self.blocks:
            h = block(h)
        x = T.mean(h, axis=2)
        x = T.sub(x, T.mean(x, axis=1, keepdims=True))
        return T.mul(T.l2_normalize(x, axis=1), self.radius)


class AttentionNet(Module):
    """Two 1-D convolutions over time and a softmax: [B, D, T] -> [B, T]."""

    def __init__(self, in_dim: int = 128, hidden: int = 64, seed: int = 1, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.conv1 = Conv2d(in_dim, hidden, (1, 3), rng=rng, dtype=dtype)
        self.conv2 = Conv2d(hidden, 1, (1, 3), rng=rng, dtype=dtype)

    def forward(self, x) -> T.Tensor:
        B, D, L = x.shape
        h = T.relu(self.conv1(T.reshape(x, (B, D, 1, L))))
        logits = T.reshape(self.conv2(h), (B, L))
        return T.softmax(logits, axis=1)


class FewShotModel(Module):
    def __init__(self, config: FewShotConfig | None = None, dtype=np.float32):
        super().__init__()
        self.config = config or FewShotConfig()
        self.embedding = EmbeddingNet(self.config.channels, self.config.seed, self.config.radius, dtype)
        self.attention = AttentionNet(self.embedding.out_dim, self.config.attention_hidden,
                                      self.config.seed + 1, dtype)

    def encode(self, specs: Sequence[Spectrogram | np.ndarray]) -> list[tuple[T.Tensor, T.Tensor]]:
        """(X [D, T], A [T]) per input. Inputs of equal length share one batch."""
        dtype = self.embedding.blocks[0].conv.weight.data.dtype
        arrays = [prepare_input(s).astype(dtype) for s in specs]
        out: list = [None] * len(arrays)
        groups: dict[tuple[int, int], list[int]] = {}
        for i, a in enumerate(arrays):
            groups.setdefault(a.shape, []).append(i)
        for idx in groups.values():
            batch = T.Tensor(np.stack([arrays[i] for i in idx])[:, None])
            x = self.embedding(batch)
            a = self.attention(x)
            for row, i in enumerate(idx):
                out[i] = (x[row], a[row])
        return out

    def pooled(self, specs: Sequence[Spectrogram | np.ndarray]) -> T.Tensor:
        """[N, D] attention-pooled embeddings X A; similarity is their inner product."""
        rows = [T.reshape(T.matmul(x, T.reshape(a, (-1, 1))), (1, -1)) for x, a in self.encode(specs)]
        return T.concat(rows, axis=0)

    def embed_numpy(self, specs) -> list[tuple[np.ndarray, np.ndarray]]:
        self.eval()
        with no_grad():
            return [(x.data.astype(np.float64), a.data.astype(np.float64)) for x, a in self.encode(specs)]

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / BUNDLE_WEIGHTS).write_bytes(save_weights(self))
        (d / BUNDLE_META).write_text(json.dumps({"format": "coughscope.fewshot/1", "config": asdict(self.config)}, indent=1))

    @classmethod
    def load(cls, directory: str | Path) -> "FewShotModel":
        d = Path(directory)
        if not (d / BUNDLE_META).is_file() or not (d / BUNDLE_WEIGHTS).is_file():
            raise FileNotFoundError(f"{d}: not a few-shot bundle")
        meta = json.loads((d / BUNDLE_META).read_text())
        model = cls(FewShotConfig(**meta["config"]))
        load_weights(model, decode_weights((d / BUNDLE_WEIGHTS).read_bytes()))
        return model.eval()


def episode_logits(model: FewShotModel, dataset: Mapping[str, Sequence], ep: EpisodeSpec) -> T.Tensor:
    """Per-class mean attentional similarity of the query to that class's support."""
    items = [dataset[ep.classes[ci]][ii] for ci, ii in ep.support] + [dataset[ep.classes[ep.query[0]]][ep.query[1]]]
    pooled = model.pooled(items)
    support, query = pooled[: len(ep.support)], pooled[len(ep.support):]
    sims = T.reshape(T.matmul(support, T.transpose(query)), (ep.c, ep.k))
    return T.mean(sims, axis=1)


def train_fewshot(dataset: Mapping[str, Sequence], config: FewShotConfig | None = None,
                  model: FewShotModel | None = None) -> tuple[FewShotModel, dict]:
    """Episodic training: each SGD step averages the query cross-entropy of several episodes."""
    config = config or FewShotConfig()
    model = model or FewShotModel(config)
    rng = np.random.default_rng(config.seed)
    state = OptimizerState(base_lr=config.base_lr, weight_decay=config.weight_decay, max_epochs=config.epochs)
    params = model.parameters()
    history = []
    model.train()
    for _ in state.epochs():
        losses = []
        for _ in range(config.episodes_per_epoch // config.episodes_per_step):
            model.zero_grad()
            batch = []
            for _ in range(config.episodes_per_step):
                ep = sample_episode(dataset, config.c, config.k, rng)
                batch.append(T.cross_entropy(episode_logits(model, dataset, ep), [ep.label]))
            loss = T.mul(T.tsum(T.concat([T.reshape(b, (1,)) for b in batch])), 1.0 / len(batch))
            loss.backward()
            sgd_step(params, state)
            losses.extend(b.item() for b in batch)
        history.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.4f", state.epoch, history[-1])
    model.eval()
    return model, {"epoch_losses": history}


# -- inference ------------------------------------------------------------------------------

@dataclass
class SupportBank:
    """Frozen exemplar embeddings per class, in a fixed class order."""

    class_names: list[str]
    embeddings: list[list[tuple[np.ndarray, np.ndarray]]] = field(default_factory=list)

    @classmethod
    def build(cls, model: FewShotModel, exemplars: Mapping[str, Sequence[Spectrogram]]) -> "SupportBank":
        names = list(exemplars)
        if not names:
            raise ValueError("support bank needs at least one class")
        embs = []
        for name in names:
            if len(exemplars[name]) == 0:
                raise ValueError(f"class {name!r} has no exemplars")
            embs.append(model.embed_numpy(exemplars[name]))
        return cls(names, embs)


def class_scores(query: tuple[np.ndarray, np.ndarray], bank: SupportBank) -> list[ClassScore]:
    """Mean pairwise attentional similarity per class, softmax-normalized."""
    xq, aq = query
    sims = []
    for name, members in zip(bank.class_names, bank.embeddings):
        if not members:
            raise ValueError(f"class {name!r} has no support examples")
        sims.append(np.mean([attentional_similarity(xq, aq, x, a) for x, a in members]))
    probs = softmax(np.asarray(sims))
    return [ClassScore(n, float(s), float(p)) for n, s, p in zip(bank.class_names, sims, probs)]


def classify_event(event, bank: SupportBank, model: FewShotModel) -> tuple[str, list[ClassScore]]:
    """Highest-probability class; ties go to the earliest class in the bank."""
    spec = event.segment_spectrogram if hasattr(event, "segment_spectrogram") else event
    scores = class_scores(model.embed_numpy([spec])[0], bank)
    best = int(np.argmax([s.probability for s in scores]))
    return scores[best].class_name, scores
