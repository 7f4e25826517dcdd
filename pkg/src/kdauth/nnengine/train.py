from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .network import Network
from .optim import (OptimizerSpec, Plateau, PlateauTracker, TrainingAborted, TrainState,
                    bce_grad, bce_loss, optimizer_step)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)

    def to_dict(self):
        return {"epochs": self.epochs, "batch_size": self.batch_size, "optimizer": self.optimizer.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(epochs=d["epochs"], batch_size=d["batch_size"],
                   optimizer=OptimizerSpec.from_dict(d["optimizer"]))


def fit(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    seed: int = 0,
    augment: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
    x_val=None,
    y_val=None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Mini-batch training on mean BCE.  Returns the mean training loss per epoch.

    Shuffling, dropout and ``augment`` all draw from one generator seeded by
    ``seed``.  The plateau schedule watches validation loss when a
    validation set is given, otherwise the epoch training loss.
    ``on_epoch(epoch, loss)`` is called after every epoch.
    """
    spec = cfg.optimizer
    state = TrainState.create(net.params(), spec, seed)
    rng = state.rng
    y = np.asarray(y, dtype=net.dtype).reshape(-1, 1)
    n = len(x)
    tracker = PlateauTracker(spec.schedule) if isinstance(spec.schedule, Plateau) else None
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = x[idx]
            if augment is not None:
                xb = augment(xb, rng)
            p = net.forward(xb, training=True, rng=rng)
            loss = bce_loss(p, y[idx])
            if not np.isfinite(loss):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}")
            total += loss * len(idx)
            net.backward(bce_grad(p, y[idx]), input_grad=False)
            optimizer_step(state, net.grads(), spec)
        epoch_loss = total / n
        history.append(epoch_loss)
        state.epoch = epoch + 1
        if tracker is None:
            state.lr = spec.schedule.lr_at(spec.learning_rate, state.epoch)
        else:
            metric = epoch_loss
            if x_val is not None:
                metric = bce_loss(net.predict(x_val), np.asarray(y_val).reshape(-1, 1))
            state.lr = tracker.update(state.lr, metric)
        log.debug("epoch %d loss %.5f lr %.2e", epoch + 1, epoch_loss, state.lr)
        if on_epoch is not None:
            on_epoch(state.epoch, epoch_loss)
    return history
