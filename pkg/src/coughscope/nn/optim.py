"""Plain SGD with L2 weight decay and the step learning-rate schedule."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    base_lr: float = 0.01
    epoch: int = 0
    weight_decay: float = 1e-4
    step_factor: float = 0.1
    step_every: int = 20
    max_epochs: int = 60

    def __post_init__(self):
        if not 0 <= self.epoch < self.max_epochs:
            raise ValueError(f"epoch {self.epoch} outside [0, {self.max_epochs})")

    @property
    def effective_lr(self) -> float:
        return lr_at(self.epoch, self.base_lr, self.step_factor, self.step_every)

    def epochs(self):
        """Iterate epochs from the current one, logging the LR whenever it changes."""
        last = None
        for e in range(self.epoch, self.max_epochs):
            self.epoch = e
            lr = self.effective_lr
            if lr != last:
                log.info("epoch %d: lr=%g", e, lr)
                last = lr
            yield e


def lr_at(epoch: int, base_lr: float = 0.01, factor: float = 0.1, every: int = 20) -> float:
    return base_lr * factor ** (epoch // every)


def sgd_step(params: Iterable[Tensor], state: OptimizerState) -> None:
    """w <- w - lr * (g + weight_decay * w); parameters without a gradient are skipped."""
    lr = state.effective_lr
    wd = state.weight_decay
    for p in params:
        if p.grad is None:
            continue
        p.data -= (lr * (p.grad + wd * p.data)).astype(p.data.dtype)
