import json
import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from dgprune.metrics import (
    Detection,
    aggregate,
    evaluate_case,
    hungarian,
    macro_f1,
    match_detections,
    nms,
    score,
)

from oracles import brute_force_assignment, brute_force_match

GOLDEN = json.loads((Path(__file__).parent / "data" / "golden_metrics.json").read_text())["cases"]


def _gaussian(shape, x, y, sigma=2.0, peak=1.0):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return peak * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma**2))


def test_nms_keeps_separated_peaks():
    m = np.maximum(_gaussian((32, 32), 8, 10), _gaussian((32, 32), 18, 10, peak=0.9))
    dets = nms(m, 0.5, 5)
    # exhaustive scan: the only strict local maxima above 0.5 are the two centres
    ys, xs = np.nonzero(m >= 0.5)
    maxima = {(x, y) for y, x in zip(ys, xs)
              if m[y, x] == m[max(y - 1, 0):y + 2, max(x - 1, 0):x + 2].max()}
    assert maxima == {(8, 10), (18, 10)}
    assert [(d.x, d.y) for d in dets] == [(8, 10), (18, 10)]


def test_nms_suppresses_close_peak():
    m = np.maximum(_gaussian((32, 32), 8, 10, sigma=1.0), _gaussian((32, 32), 11, 10, sigma=1.0, peak=0.9))
    dets = nms(m, 0.5, 5)
    assert [(d.x, d.y, d.score) for d in dets] == [(8, 10, 1.0)]


def test_nms_empty_map():
    assert nms(np.zeros((2, 16, 16))) == []


def test_nms_class_is_argmax_channel():
    m = np.zeros((3, 16, 16))
    m[2] = _gaussian((16, 16), 5, 6)
    m[0] = 0.5 * _gaussian((16, 16), 5, 6)
    (d,) = nms(m, 0.5, 3)
    assert d.cls == 2 and (d.x, d.y) == (5, 6)


def test_nms_rejects_nan():
    with pytest.raises(FloatingPointError):
        nms(np.full((4, 4), np.nan))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_nms_postconditions(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((24, 24))
    dets = nms(m, 0.6, 3.0)
    assert all(d.score >= 0.6 for d in dets)
    for i, a in enumerate(dets):
        for b in dets[i + 1:]:
            assert math.hypot(a.x - b.x, a.y - b.y) > 3.0


def test_hungarian_small_cases():
    assert hungarian([[1, 2], [2, 1]]) == [(0, 0), (1, 1)]
    eye = 1.0 - np.eye(5)
    assert hungarian(eye) == [(i, i) for i in range(5)]
    assert hungarian(np.zeros((0, 3))) == []


def test_hungarian_rejects_non_finite():
    with pytest.raises(ValueError):
        hungarian([[1.0, np.inf]])


@pytest.mark.parametrize("shape", [(3, 3), (4, 6), (6, 4), (7, 7), (1, 5), (5, 1)])
def test_hungarian_matches_permutation_oracle(shape):
    rng = np.random.default_rng(sum(shape))
    for _ in range(50):
        c = rng.integers(0, 20, size=shape).astype(float)
        pairs = hungarian(c)
        assert len(pairs) == min(shape)
        assert len({i for i, _ in pairs}) == len({j for _, j in pairs}) == min(shape)
        assert sum(c[i, j] for i, j in pairs) == brute_force_assignment(c)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_hungarian_agrees_with_scipy(n, m, seed):
    c = np.random.default_rng(seed).random((n, m))
    r, k = linear_sum_assignment(c)
    ours = sum(c[i, j] for i, j in hungarian(c))
    assert ours == pytest.approx(c[r, k].sum(), rel=1e-12, abs=1e-12)


def test_match_out_of_radius():
    rep = match_detections([(10, 10)], [(20, 25)], radius=16)
    assert (rep.tp, rep.fp, rep.fn) == (0, 1, 1)


def test_match_identical_sets():
    pts = [(1, 2), (30, 40), (5, 60)]
    rep = match_detections(pts, pts)
    assert rep.tp == 3 and all(d == 0 for _, _, d in rep.pairs)


def test_match_picks_closer_pred():
    rep = match_detections([(53, 50), (50, 55)], [(50, 50)])
    assert rep.pairs == [(0, 0, 3.0)] and rep.unmatched_pred == [1]


def _random_points(rng, n):
    return [tuple(int(v) for v in rng.integers(0, 60, size=2)) for _ in range(n)]


def test_match_agrees_with_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(200):
        preds, gts = _random_points(rng, rng.integers(0, 6)), _random_points(rng, rng.integers(0, 6))
        rep = match_detections(preds, gts, radius=16)
        count, total, _ = brute_force_match(preds, gts, 16)
        assert rep.tp == count
        assert sum(d for _, _, d in rep.pairs) == pytest.approx(total, abs=1e-9)
        assert all(d <= 16 for _, _, d in rep.pairs)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_match_swap_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = _random_points(rng, rng.integers(0, 8)), _random_points(rng, rng.integers(0, 8))
    ab, ba = match_detections(a, b), match_detections(b, a)
    assert ab.tp == ba.tp and ab.fp == ba.fn and ab.fn == ba.fp


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_match_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    a, b = _random_points(rng, rng.integers(0, 8)), _random_points(rng, rng.integers(0, 8))
    base = match_detections(a, b, radius=16)
    scaled = match_detections([(2 * x, 2 * y) for x, y in a], [(2 * x, 2 * y) for x, y in b], radius=32)
    assert [(i, j) for i, j, _ in base.pairs] == [(i, j) for i, j, _ in scaled.pairs]


@pytest.mark.parametrize("case", GOLDEN, ids=[c["name"] for c in GOLDEN])
def test_golden_case(case):
    preds = [tuple(p) for p in case["preds"]]
    gts = [tuple(g) for g in case["gts"]]
    rep = score(match_detections(preds, gts, case["radius"]), preds, gts)
    frac = lambda k: float(Fraction(case[k]))  # noqa: E731
    assert (rep.tp, rep.fp, rep.fn) == (case["tp"], case["fp"], case["fn"])
    for k in ("det_p", "det_r", "det_f1", "cls_p", "cls_r", "cls_f1"):
        assert getattr(rep, k) == frac(k), k
    assert rep.dist_mu == frac("mu")
    assert rep.dist_sigma == math.sqrt(frac("sigma_sq"))


def test_f1_is_harmonic_mean_of_p_and_r():
    rng = np.random.default_rng(9)
    for _ in range(200):
        preds, gts = _random_points(rng, rng.integers(1, 8)), _random_points(rng, rng.integers(1, 8))
        rep = score(match_detections(preds, [(*g, 0) for g in gts]), [(*p, 0) for p in preds],
                    [(*g, 0) for g in gts])
        p = Fraction(rep.tp, rep.tp + rep.fp)
        r = Fraction(rep.tp, rep.tp + rep.fn)
        expected = 2 * p * r / (p + r) if p + r else Fraction(0)
        assert rep.det_f1 == float(expected)


def test_empty_ground_truth_flags_recall():
    rep = score(match_detections([(1, 1, 0)], []), [(1, 1, 0)], [])
    assert rep.det_r == 0.0 and "empty_ground_truth" in rep.flags


def test_border_exclusion_flag():
    m = _gaussian((64, 64), 5, 30)
    m = np.maximum(m, _gaussian((64, 64), 32, 32))
    gts = [(5, 30, 0), (32, 32, 0)]
    on = evaluate_case(m[None], gts, border=16)
    off = evaluate_case(m[None], gts)
    assert on.tp == 1 and off.tp == 2


def test_aggregate_is_mean_over_cases():
    a = score(match_detections([(0, 0, 0)], [(0, 3, 0)]), [(0, 0, 0)], [(0, 3, 0)])
    b = score(match_detections([], [(0, 0, 0)]), [], [(0, 0, 0)])
    agg = aggregate([a, b])
    assert agg["det_f1"] == 0.5
    assert agg["dist_mu"] == 3.0  # the case without pairs is skipped for distances
    assert agg["cases"] == 2


def test_macro_f1_vector_labels():
    p, r, f = macro_f1([0, 0, 1, 1], [0, 1, 1, 1])
    assert (p, r, f) == (float(Fraction(5, 6)), 0.75, float(Fraction(11, 15)))


def test_detection_tuple_shape():
    d = Detection(3, 4, 1, 0.7)
    assert d[2] == 1 and d.score == 0.7
