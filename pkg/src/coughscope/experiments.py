"""Desk-scale synthetic experiments for the detector and the few-shot classifier."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import synthetic
from .detector import DetectorConfig, extract_features, recording_maps, train_detector
from .fewshot import FewShotConfig, FewShotModel, SupportBank, class_scores, sample_episode, train_fewshot


@dataclass
class DetectorExperiment:
    n_clips: int = 1000
    train_fraction: float = 0.8
    seed: int = 7
    epochs: int = 3


@dataclass
class FewShotExperiment:
    train_per_class: int = 30
    test_per_class: int = 20
    n_train_classes: int = 3
    c: int = 3
    k: int = 5
    test_way: int = 5
    test_shot: int = 5
    epochs: int = 6
    episodes_per_epoch: int = 40
    n_test_episodes: int = 500
    data_seed: int = 3
    episode_seed: int = 11
    seed: int = 0


def run_detector_experiment(exp: DetectorExperiment | None = None) -> dict:
    """Train on the first share of clips, score the labelled frame of each held-out clip."""
    exp = exp or DetectorExperiment()
    rng = np.random.default_rng(exp.seed)
    clips = synthetic.detection_clips(exp.n_clips, rng)
    cut = int(round(exp.train_fraction * len(clips)))
    train, test = clips[:cut], clips[cut:]
    config = DetectorConfig(epochs=exp.epochs, seed=exp.seed)
    t0 = time.perf_counter()
    det, info = train_detector([c.recording for c in train], config, frames=[[c.target_frame] for c in train])
    train_s = time.perf_counter() - t0
    maps, labels = [], []
    for c in test:
        m, lab = recording_maps(c.recording, config.context, det.standardizer, [c.target_frame])
        maps.append(m)
        labels.append(lab)
    y = np.concatenate(labels)
    pred = (det.svm.decision_function(extract_features(det.net, np.concatenate(maps))) > 0).astype(int)
    return {
        "accuracy": float(np.mean(pred == y)),
        "tpr": float(np.mean(pred[y == 1])),
        "fpr": float(np.mean(pred[y == 0])),
        "n_test": int(len(y)),
        "train_seconds": train_s,
        "initial_loss": info["initial_loss"],
        "epoch_losses": info["epoch_losses"],
    }


def episode_accuracy(model: FewShotModel, dataset: dict, way: int, shot: int, n_episodes: int,
                     rng: np.random.Generator) -> float:
    """Top-1 over sampled way-shot episodes, scoring queries against a per-episode support bank."""
    embedded = {name: model.embed_numpy(specs) for name, specs in dataset.items()}
    correct = 0
    for _ in range(n_episodes):
        ep = sample_episode(embedded, way, shot, rng)
        members = [[] for _ in ep.classes]
        for ci, ii in ep.support:
            members[ci].append(embedded[ep.classes[ci]][ii])
        scores = class_scores(embedded[ep.classes[ep.label]][ep.query[1]], SupportBank(ep.classes, members))
        correct += int(np.argmax([s.similarity for s in scores]) == ep.label)
    return correct / n_episodes


def run_fewshot_experiment(exp: FewShotExperiment | None = None) -> dict:
    """Episodic training on a subset of pattern classes, then mixed-class test episodes."""
    exp = exp or FewShotExperiment()
    rng = np.random.default_rng(exp.data_seed)
    kinds = synthetic.PATTERN_CLASSES
    train = synthetic.pattern_dataset(kinds[:exp.n_train_classes], exp.train_per_class, rng)
    test = synthetic.pattern_dataset(kinds[:exp.test_way], exp.test_per_class, rng)
    config = FewShotConfig(c=exp.c, k=exp.k, epochs=exp.epochs, episodes_per_epoch=exp.episodes_per_epoch,
                           seed=exp.seed)
    t0 = time.perf_counter()
    model, info = train_fewshot(train, config)
    train_s = time.perf_counter() - t0
    model.eval()
    top1 = episode_accuracy(model, test, exp.test_way, exp.test_shot, exp.n_test_episodes,
                            np.random.default_rng(exp.episode_seed))
    return {"top1": top1, "train_seconds": train_s, "epoch_losses": info["epoch_losses"]}
