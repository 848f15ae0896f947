"""In-place optimizers over flat parameter vectors.

Both optimizers take an optional alive mask; masked entries are neither
updated nor allowed to accumulate moment state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check_grads(grads: np.ndarray) -> None:
    bad = ~np.isfinite(grads)
    if bad.any():
        first = int(np.flatnonzero(bad)[0])
        raise FloatingPointError(
            f"non-finite gradient at flat index {first} ({int(bad.sum())} entries); step aborted"
        )


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float, mask: np.ndarray | None = None) -> None:
    _check_grads(grads)
    if mask is None:
        params -= lr * grads
    else:
        params[mask] -= lr * grads[mask]


@dataclass
class Adam:
    size: int
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray, mask: np.ndarray | None = None) -> None:
        _check_grads(grads)
        g = grads if mask is None else np.where(mask, grads, 0.0)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        if mask is None:
            params -= update
        else:
            params[mask] -= update[mask]


def adam_step(params, grads, state: Adam, mask=None) -> None:
    state.step(params, grads, mask)
