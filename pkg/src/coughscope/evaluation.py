"""Cross-validation folds, confusion-derived metrics and table formatting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np


@dataclass(frozen=True)
class FoldPlan:
    n_folds: int
    fold_of: dict

    def test_ids(self, fold: int) -> list:
        return [i for i, f in self.fold_of.items() if f == fold]

    def train_ids(self, fold: int) -> list:
        return [i for i, f in self.fold_of.items() if f != fold]

    def sizes(self) -> list[int]:
        return [len(self.test_ids(k)) for k in range(self.n_folds)]


def make_folds(ids: Sequence[Hashable], n_folds: int = 10, seed: int = 0,
               labels: Sequence | None = None) -> FoldPlan:
    """Shuffle and deal ids round-robin into folds. With labels, each class is dealt
    in turn so classes spread evenly; fold sizes still differ by at most one."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    if not 1 <= n_folds <= len(ids):
        raise ValueError(f"cannot split {len(ids)} ids into {n_folds} folds")
    rng = np.random.default_rng(seed)
    if labels is None:
        order = [ids[i] for i in rng.permutation(len(ids))]
    else:
        if len(labels) != len(ids):
            raise ValueError("labels and ids differ in length")
        order = []
        for cls in sorted(set(labels), key=str):
            members = [i for i, lab in zip(ids, labels) if lab == cls]
            order.extend(members[j] for j in rng.permutation(len(members)))
    return FoldPlan(n_folds, {i: pos % n_folds for pos, i in enumerate(order)})


@dataclass(frozen=True)
class MetricReport:
    """Binary metrics for one positive class; None marks an undefined ratio."""
    tp: int
    fp: int
    tn: int
    fn: int
    top1: float | None = None

    @staticmethod
    def _ratio(num: float, den: float) -> float | None:
        return None if den == 0 else num / den

    @property
    def tpr(self):
        return self._ratio(self.tp, self.tp + self.fn)

    sensitivity = tpr

    @property
    def fpr(self):
        return self._ratio(self.fp, self.fp + self.tn)

    @property
    def specificity(self):
        return self._ratio(self.tn, self.fp + self.tn)

    @property
    def ppv(self):
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def npv(self):
        return self._ratio(self.tn, self.tn + self.fn)

    @property
    def accuracy(self):
        return self._ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn)


METRICS = ("sensitivity", "specificity", "ppv", "npv", "tpr", "fpr", "accuracy", "top1")


def confusion_metrics(predictions: Sequence, labels: Sequence, positive_class) -> MetricReport:
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels differ in length")
    p = np.asarray([x == positive_class for x in predictions])
    t = np.asarray([x == positive_class for x in labels])
    top1 = float(np.mean([a == b for a, b in zip(predictions, labels)])) if len(labels) else None
    return MetricReport(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & ~t)), int(np.sum(~p & t)), top1)


@dataclass
class CVResult:
    folds: list[dict]                    # fold -> {class: MetricReport}
    mean: dict = field(default_factory=dict)  # class -> {metric: float | None}

    def metric(self, cls, name: str) -> float | None:
        return self.mean[cls][name]


def mean_metrics(reports: Sequence[MetricReport]) -> dict[str, float | None]:
    """Unweighted mean across folds, skipping folds where the metric is undefined."""
    out = {}
    for name in METRICS:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        out[name] = float(np.mean(vals)) if vals else None
    return out


def run_cv(ids: Sequence, labels: Sequence, train_fn: Callable, eval_fn: Callable,
           positive_classes: Sequence, n_folds: int = 10, seed: int = 0, stratify: bool = True,
           required_classes: Sequence = ()) -> CVResult:
    """K-fold CV. ``train_fn(train_ids) -> model``; ``eval_fn(model, test_ids) -> predictions``
    in the order of ``test_ids``. Per-fold reports are averaged without weighting."""
    label_of = dict(zip(ids, labels))
    plan = make_folds(ids, n_folds, seed, labels if stratify else None)
    for k in range(n_folds):
        present = {label_of[i] for i in plan.train_ids(k)}
        for cls in required_classes:
            if cls not in present:
                raise ValueError(f"fold {k}: training split lacks class {cls!r}")
    folds = []
    for k in range(n_folds):
        test = plan.test_ids(k)
        model = train_fn(plan.train_ids(k))
        preds = list(eval_fn(model, test))
        truth = [label_of[i] for i in test]
        folds.append({cls: confusion_metrics(preds, truth, cls) for cls in positive_classes})
    mean = {cls: mean_metrics([f[cls] for f in folds]) for cls in positive_classes}
    return CVResult(folds, mean)


def format_table(rows: dict, columns: Sequence[str] = ("sensitivity", "specificity", "ppv", "npv"),
                 sep: str = ",") -> str:
    """Rows keyed by name, values as percentages to one decimal; undefined shows as n/a."""
    lines = [sep.join(("name",) + tuple(columns))]
    for name, metrics in rows.items():
        if isinstance(metrics, MetricReport):
            metrics = {c: getattr(metrics, c) for c in columns}
        cells = ["n/a" if metrics.get(c) is None else f"{100 * metrics[c]:.1f}" for c in columns]
        lines.append(sep.join([str(name)] + cells))
    return "\n".join(lines) + "\n"


def cv_table(result: CVResult, columns: Sequence[str] = ("sensitivity", "specificity", "ppv", "npv")) -> str:
    return format_table(result.mean, columns)


def fold_table(result: CVResult, cls, columns: Sequence[str] = ("sensitivity", "specificity", "ppv", "npv")) -> str:
    return format_table({f"fold{k}": f[cls] for k, f in enumerate(result.folds)}, columns)
