"""Point-detection evaluation: peak extraction, assignment, P/R/F1 and distances."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import NamedTuple, Sequence

import numpy as np
from scipy.ndimage import maximum_filter

DEFAULT_RADIUS = 16.0


class Detection(NamedTuple):
    x: int
    y: int
    cls: int = 0
    score: float = 1.0


def nms(prob_map: np.ndarray, threshold: float = 0.5, radius: float = 4.0) -> list[Detection]:
    """Greedy non-maximum suppression over a ``(K, H, W)`` or ``(H, W)`` map.

    Peaks are local maxima (3x3) of the channel-wise max. They are visited in
    descending score (ties by row, then column) and kept unless an already
    kept peak lies within ``radius``. The class is the argmax channel.
    """
    pm = np.asarray(prob_map, dtype=np.float64)
    if pm.ndim == 2:
        pm = pm[None]
    if not np.all(np.isfinite(pm)):
        raise FloatingPointError("nms: probability map has non-finite values")
    score = pm.max(axis=0)
    local = score == maximum_filter(score, size=3, mode="constant", cval=-np.inf)
    ys, xs = np.nonzero(local & (score >= threshold))
    order = sorted(range(len(ys)), key=lambda i: (-score[ys[i], xs[i]], ys[i], xs[i]))
    kept: list[Detection] = []
    r2 = radius * radius
    for i in order:
        y, x = int(ys[i]), int(xs[i])
        if all((x - d.x) ** 2 + (y - d.y) ** 2 > r2 for d in kept):
            kept.append(Detection(x, y, int(pm[:, y, x].argmax()), float(score[y, x])))
    return kept


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment of ``min(n, m)`` rows to columns.

    Shortest-augmenting-path Kuhn-Munkres with row/column potentials,
    O(n^2 m). Returns ``(row, col)`` pairs sorted by row.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.size == 0:
        return []
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    transposed = c.shape[0] > c.shape[1]
    if transposed:
        c = c.T
    n, m = c.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match_col = np.zeros(m + 1, dtype=np.int64)  # column j -> row (1-based), 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(cand.argmin()) + 1
            delta = cand[j1 - 1]
            u[match_col[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1
    pairs = [(int(match_col[j]) - 1, j - 1) for j in range(1, m + 1) if match_col[j]]
    if transposed:
        pairs = [(col, row) for row, col in pairs]
    return sorted(pairs)


@dataclass
class MatchReport:
    pairs: list  # (pred_idx, gt_idx, distance)
    unmatched_pred: list
    unmatched_gt: list
    radius: float = DEFAULT_RADIUS

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gt)


def _xy(points) -> np.ndarray:
    return np.array([[p[0], p[1]] for p in points], dtype=np.float64).reshape(-1, 2)


def match_detections(preds: Sequence, gts: Sequence, radius: float = DEFAULT_RADIUS) -> MatchReport:
    """Pair predictions with ground truth, one-to-one, within ``radius``.

    Pairs farther apart than ``radius`` are forbidden, so the assignment
    first maximizes the number of feasible pairs, then minimizes their
    summed distance.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    p, g = _xy(preds), _xy(gts)
    if len(p) == 0 or len(g) == 0:
        return MatchReport([], list(range(len(p))), list(range(len(g))), radius)
    dist = np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(axis=-1))
    feasible = dist <= radius
    # any extra infeasible pair costs more than all feasible distances combined
    big = min(len(p), len(g)) * radius + 1.0
    cost = np.where(feasible, dist, big)
    pairs = [(i, j, float(dist[i, j])) for i, j in hungarian(cost) if feasible[i, j]]
    used_p = {i for i, _, _ in pairs}
    used_g = {j for _, j, _ in pairs}
    return MatchReport(
        pairs,
        [i for i in range(len(p)) if i not in used_p],
        [j for j in range(len(g)) if j not in used_g],
        radius,
    )


def f1(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0 * p


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


@dataclass
class MetricsReport:
    det_p: float
    det_r: float
    det_f1: float
    dist_mu: float
    dist_sigma: float
    cls_p: float
    cls_r: float
    cls_f1: float
    tp: int
    fp: int
    fn: int
    per_class: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


METRIC_KEYS = ("det_p", "det_r", "det_f1", "dist_mu", "dist_sigma", "cls_p", "cls_r", "cls_f1")


def score(match: MatchReport, preds: Sequence, gts: Sequence) -> MetricsReport:
    """Detection and classification scores for one case.

    Classification looks only at matched pairs. For each class present in
    the ground truth: TP = pairs where both agree on the class, FP = pairs
    predicted as the class with another true class, FN = true class predicted
    otherwise. P/R/F1 are macro-averaged over those classes.
    """
    flags = []
    tp, fp, fn = match.tp, match.fp, match.fn
    if not tp + fp:
        flags.append("no_predictions")
    if not tp + fn:
        flags.append("empty_ground_truth")
    det_p, det_r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)

    d = [Fraction(dist) for _, _, dist in match.pairs]
    if d:
        mu = sum(d) / len(d)
        mu_f = float(mu)
        sigma = math.sqrt(float(sum((x - mu) ** 2 for x in d) / len(d)))
    else:
        mu_f = sigma = 0.0
        flags.append("no_pairs")

    present = sorted({int(gt[2]) for gt in gts})
    per_class, stats = {}, []
    for c in present:
        ctp = sum(1 for i, j, _ in match.pairs if preds[i][2] == c and gts[j][2] == c)
        cfp = sum(1 for i, j, _ in match.pairs if preds[i][2] == c and gts[j][2] != c)
        cfn = sum(1 for i, j, _ in match.pairs if preds[i][2] != c and gts[j][2] == c)
        cp, cr = _ratio(ctp, ctp + cfp), _ratio(ctp, ctp + cfn)
        stats.append((cp, cr, f1(cp, cr)))
        per_class[str(c)] = {"tp": ctp, "fp": cfp, "fn": cfn,
                             "p": float(cp), "r": float(cr), "f1": float(f1(cp, cr))}
    k = len(stats)
    cls_p, cls_r, cls_f1 = (float(sum(s[i] for s in stats) / k) if k else 0.0 for i in range(3))

    return MetricsReport(float(det_p), float(det_r), float(f1(det_p, det_r)), mu_f, sigma,
                         cls_p, cls_r, cls_f1, tp, fp, fn, per_class, flags)


def drop_border(points: Sequence, image_shape, margin: float) -> list:
    """Points at least ``margin`` px away from every image edge."""
    h, w = image_shape
    return [p for p in points if margin <= p[0] <= w - 1 - margin and margin <= p[1] <= h - 1 - margin]


def evaluate_case(prob_map: np.ndarray, gts: Sequence, radius: float = DEFAULT_RADIUS,
                  threshold: float = 0.5, nms_radius: float = 4.0,
                  border: float | None = None) -> MetricsReport:
    """NMS on one predicted ``(K, H, W)`` class map, then match and score."""
    preds = nms(prob_map, threshold, nms_radius)
    gts = list(gts)
    if border:
        shape = prob_map.shape[-2:]
        preds, gts = drop_border(preds, shape, border), drop_border(gts, shape, border)
    return score(match_detections(preds, gts, radius), preds, gts)


def aggregate(reports: Sequence[MetricsReport]) -> dict:
    """Mean of every metric over cases; distance stats skip cases without pairs."""
    if not reports:
        return {k: 0.0 for k in METRIC_KEYS}
    out = {}
    for k in METRIC_KEYS:
        pool = [r for r in reports if not (k.startswith("dist") and "no_pairs" in r.flags)]
        out[k] = sum(getattr(r, k) for r in pool) / len(pool) if pool else 0.0
    for k in ("tp", "fp", "fn"):
        out[k] = sum(getattr(r, k) for r in reports)
    out["cases"] = len(reports)
    return out


def macro_f1(y_true, y_pred) -> tuple[float, float, float]:
    """Macro P/R/F1 over the classes present in ``y_true`` (vector task)."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    stats = []
    for c in np.unique(y_true):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        p, r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        stats.append((p, r, f1(p, r)))
    if not stats:
        return 0.0, 0.0, 0.0
    return tuple(float(sum(s[i] for s in stats) / len(stats)) for i in range(3))
