"""Mini-batch Adam loop shared by the three streams."""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import asdict, dataclass

import numpy as np

from .numkit import AdamState, adam_step, clip_by_global_norm

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, stream: str, epoch: int, msg: str = "loss became non-finite"):
        super().__init__(f"{stream}: {msg} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.004
    batch_size: int = 60
    epochs: int = 40
    hidden_dim: int = 64
    seed: int = 0
    clip_norm: float = 5.0

    def to_dict(self) -> dict:
        return asdict(self)


BatchLoss = Callable[[dict, np.ndarray, np.random.Generator], tuple[float, dict]]


def fit(params: dict[str, np.ndarray], batch_loss: BatchLoss, n_samples: int,
        hyper: TrainHyper, rng: np.random.Generator, stream: str):
    """Train ``params`` in place of a copy; returns ``(params, loss_curve)``.

    ``batch_loss(params, idx, rng)`` returns the summed loss and summed gradients
    over the samples ``idx``. Gradients are averaged over the batch, clipped to
    ``hyper.clip_norm`` and fed to Adam. The loss curve holds the mean per-sample
    training loss of each epoch.
    """
    state = AdamState(lr=hyper.lr)
    curve = []
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(n_samples)
        total = 0.0
        for lo in range(0, n_samples, hyper.batch_size):
            idx = order[lo:lo + hyper.batch_size]
            # overflow shows up as a non-finite loss, checked right below
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = batch_loss(params, idx, rng)
            if not np.isfinite(loss):
                raise TrainingError(stream, epoch)
            total += loss
            grads = {k: g / len(idx) for k, g in grads.items()}
            grads = clip_by_global_norm(grads, hyper.clip_norm)
            params, state = adam_step(params, grads, state)
        curve.append(total / n_samples)
        log.debug("%s epoch %d loss %.6g", stream, epoch, curve[-1])
    return params, curve
