"""Training loop shared by pre-training, ERM baselines and post-prune fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .nets import Model

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    """Optimizer and length settings.

    Training stops at whichever comes first: ``max_epochs`` epochs of
    ``steps_per_epoch`` batches, ``max_steps`` batches (if set), or
    ``patience`` epochs without validation improvement.
    """

    lr: float = 5e-4
    max_epochs: int = 200
    steps_per_epoch: int = 20
    patience: int = 10
    max_steps: int | None = None
    lr_decay: float = 1.0
    lr_decay_every: int = 100

    def to_dict(self) -> dict:
        return asdict(self)


def task_loss(model: Model, out: Tensor, y) -> Tensor:
    if model.config.family == "mlp":
        return ad.loss_softmax_ce(out, y)
    return ad.loss_ce_iou(out, y)


def loss_and_grad(model: Model, x, y, loss_fn=None) -> float:
    """One forward/backward pass; leaves d(loss)/d(param) in ``registry.grad``.

    ``loss_fn(model, x, y) -> Tensor`` replaces the family's default loss.
    """
    reg = model.registry
    reg.zero_grad()
    with Tape():
        loss = loss_fn(model, x, y) if loss_fn else task_loss(model, model(x), y)
        ad.backward(loss)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value}")
    return value


def predict(model: Model, x) -> np.ndarray:
    """Forward pass without recording; returns the raw output array."""
    return model(Tensor(x)).data


def accuracy(model: Model, x, y) -> float:
    return float((predict(model, x).argmax(axis=1) == np.asarray(y)).mean())


def train(model: Model, stream: Iterator, cfg: TrainConfig,
          validate: Callable[[Model], float] | None = None,
          mask: np.ndarray | None = None) -> list[dict]:
    """Adam training with early stopping; the best-validating state is kept.

    The starting state counts as a candidate, so a run never ends worse on
    validation than it began. Masked entries are never updated. Returns one
    record per epoch.
    """
    reg = model.registry
    opt = ad.Adam(len(reg), lr=cfg.lr)
    history: list[dict] = []
    best = validate(model) if validate else None
    best_vec = reg.snapshot()
    history.append({"epoch": 0, "loss": None, "val": best, "lr": cfg.lr})
    wait, steps = 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
        opt.lr = cfg.lr * cfg.lr_decay ** ((epoch - 1) // cfg.lr_decay_every)
        losses = []
        for _ in range(cfg.steps_per_epoch):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            batch = next(stream)
            losses.append(loss_and_grad(model, batch.x, batch.y))
            opt.step(reg.flat, reg.grad, mask)
            steps += 1
        val = validate(model) if validate else None
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val": val, "lr": opt.lr})
        log.debug("epoch %d loss %.5f val %s", epoch, history[-1]["loss"], val)
        if validate is None:
            best_vec = reg.snapshot()
            continue
        if val > best:
            best, best_vec, wait = val, reg.snapshot(), 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    reg.restore(best_vec)
    return history
