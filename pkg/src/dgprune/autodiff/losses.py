from __future__ import annotations

import numpy as np

from .ops import _emit
from .tensor import ShapeError, Tensor

IOU_EPS = 1e-6
_CLIP = 1e-12


def _finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name}: non-finite input")


def ce_iou_parts(pred: np.ndarray, target: np.ndarray, eps: float = IOU_EPS) -> tuple[float, float]:
    """Mean binary cross-entropy and soft-IOU loss, as plain floats."""
    p = np.clip(pred, _CLIP, 1.0 - _CLIP)
    bce = -np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))
    inter = np.minimum(pred, target).sum()
    union = np.maximum(pred, target).sum()
    return float(bce), float(1.0 - (inter + eps) / (union + eps))


def loss_ce_iou(pred: Tensor, target, eps: float = IOU_EPS) -> Tensor:
    """Mean per-pixel binary cross-entropy plus soft-IOU loss.

    The IOU term is ``1 - (sum(min(p, t)) + eps) / (sum(max(p, t)) + eps)``
    taken over every element of the batch, so it is exactly zero when the
    prediction equals the target.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeError(f"loss_ce_iou: shapes {pred.shape} and {t.shape} do not match")
    _finite("loss_ce_iou", pred.data)
    _finite("loss_ce_iou", t)
    if np.any(pred.data < 0) or np.any(pred.data > 1) or np.any(t < 0) or np.any(t > 1):
        raise ValueError("loss_ce_iou: predictions and targets must lie in [0, 1]")

    p_raw = pred.data
    p = np.clip(p_raw, _CLIP, 1.0 - _CLIP)
    inside = (p_raw > _CLIP) & (p_raw < 1.0 - _CLIP)
    n = p.size
    bce, iou = ce_iou_parts(p_raw, t, eps)
    inter = np.minimum(p_raw, t).sum() + eps
    union = np.maximum(p_raw, t).sum() + eps

    def backward(g):
        d_bce = (-(t / p) + (1.0 - t) / (1.0 - p)) / n * inside
        # subgradient split evenly where p == t
        d_min = np.where(p_raw < t, 1.0, np.where(p_raw > t, 0.0, 0.5))
        d_max = 1.0 - d_min
        d_iou = -(d_min * union - inter * d_max) / union**2
        return (float(g) * (d_bce + d_iou),)

    return _emit("loss_ce_iou", (pred,), np.asarray(bce + iou), backward)


def loss_softmax_ce(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy. ``logits`` is ``(k,)`` or ``(N, k)``."""
    z = logits.data
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    if z2.ndim != 2:
        raise ShapeError(f"loss_softmax_ce: logits must be (k,) or (N, k), got {z.shape}")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (z2.shape[0],):
        raise ShapeError(f"loss_softmax_ce: {y.shape[0]} labels for {z2.shape[0]} rows")
    k = z2.shape[1]
    if np.any(y < 0) or np.any(y >= k):
        raise IndexError(f"loss_softmax_ce: label out of range for {k} classes")
    _finite("loss_softmax_ce", z2)

    shifted = z2 - z2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(len(y))
    loss = -logp[rows, y].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, y] -= 1.0
        d *= float(g) / len(y)
        return (d[0] if single else d,)

    return _emit("loss_softmax_ce", (logits,), np.asarray(loss), backward)
