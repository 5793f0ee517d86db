import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comwin.evalmetrics import MetricReport, overlap_metrics, pseudo_quality, surface, surface_metrics


def oracle_overlap(p, t):
    ps = {tuple(x) for x in np.argwhere(p)}
    ts = {tuple(x) for x in np.argwhere(t)}
    if not ps and not ts:
        return 1.0, 1.0
    return 2 * len(ps & ts) / (len(ps) + len(ts)), len(ps & ts) / len(ps | ts)


def oracle_border(mask):
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                a, b = i + di, j + dj
                if not (0 <= a < h and 0 <= b < w) or not mask[a, b]:
                    pts.append((i, j))
                    break
    return pts


def oracle_surface(p, t):
    sp, stt = oracle_border(p), oracle_border(t)
    d = []
    for a in sp:
        d.append(min(math.hypot(a[0] - b[0], a[1] - b[1]) for b in stt))
    for b in stt:
        d.append(min(math.hypot(a[0] - b[0], a[1] - b[1]) for a in sp))
    d = sorted(d)
    # linear-interpolated 95th percentile by hand
    pos = 0.95 * (len(d) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(d) - 1)
    hd = d[lo] + (d[hi] - d[lo]) * (pos - lo)
    return sum(d) / len(d), hd


def random_blobs(rng, h=32, w=32):
    mask = np.zeros((h, w), bool)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(1, 8, size=2)
        mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    if not mask.any():
        mask[int(rng.integers(h)), int(rng.integers(w))] = True
    return mask


def test_identical_masks():
    m = np.zeros((8, 8), int)
    m[2:5, 2:6] = 1
    assert overlap_metrics(m, m, 1) == (1.0, 1.0)
    assert surface_metrics(m, m, 1) == (0.0, 0.0)


def test_overlap_by_hand():
    p = np.zeros((4, 4), int)
    t = np.zeros((4, 4), int)
    p[0, 0:2] = 1
    t[0, 1:3] = 1
    dice, jac = overlap_metrics(p, t, 1)
    assert dice == 0.5 and jac == pytest.approx(1 / 3)


def test_both_empty_conventions():
    z = np.zeros((5, 5), int)
    assert overlap_metrics(z, z, 1) == (1.0, 1.0)
    assert surface_metrics(z, z, 1) == (0.0, 0.0)


def test_one_sided_empty_surface_is_undefined():
    z = np.zeros((5, 5), int)
    o = z.copy()
    o[2, 2] = 1
    assert surface_metrics(o, z, 1) is None
    assert surface_metrics(z, o, 1) is None


def test_three_four_five():
    p = np.zeros((6, 6), int)
    t = np.zeros((6, 6), int)
    p[0, 0] = 1
    t[3, 4] = 1
    assert surface_metrics(p, t, 1) == (5.0, 5.0)


def test_overlap_vs_set_oracle_1000_cases():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        p = rng.random((32, 32)) < rng.uniform(0, 0.6)
        t = rng.random((32, 32)) < rng.uniform(0, 0.6)
        got = overlap_metrics(p.astype(int), t.astype(int), 1)
        assert got == oracle_overlap(p, t)


def test_surface_vs_all_pairs_oracle_200_cases():
    rng = np.random.default_rng(1)
    for _ in range(200):
        p, t = random_blobs(rng), random_blobs(rng)
        asd, hd = surface_metrics(p.astype(int), t.astype(int), 1)
        easd, ehd = oracle_surface(p, t)
        assert abs(asd - easd) <= 1e-9 and abs(hd - ehd) <= 1e-9


def test_surface_matches_border_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        m = random_blobs(rng, 16, 16)
        assert set(map(tuple, np.argwhere(surface(m)))) == set(oracle_border(m))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_symmetry_and_jaccard_bound(seed):
    rng = np.random.default_rng(seed)
    p, t = random_blobs(rng, 16, 16).astype(int), random_blobs(rng, 16, 16).astype(int)
    d1, j1 = overlap_metrics(p, t, 1)
    d2, j2 = overlap_metrics(t, p, 1)
    assert (d1, j1) == (d2, j2)
    assert j1 <= d1 + 1e-15
    assert 0 <= j1 <= 1 and 0 <= d1 <= 1
    s1, s2 = surface_metrics(p, t, 1), surface_metrics(t, p, 1)
    assert s1[0] == pytest.approx(s2[0], abs=1e-12) and s1[1] == pytest.approx(s2[1], abs=1e-12)
    assert s1[0] >= 0 and s1[1] >= 0


def test_dilation_toward_truth_never_hurts_convex():
    truth = np.zeros((20, 20), int)
    truth[4:16, 5:15] = 1
    pred = np.zeros_like(truth)
    pred[8:12, 8:12] = 1
    prev = overlap_metrics(pred, truth, 1)[0]
    for grow in range(1, 6):
        pred = np.zeros_like(truth)
        pred[max(4, 8 - grow) : min(16, 12 + grow), max(5, 8 - grow) : min(15, 12 + grow)] = 1
        cur = overlap_metrics(pred, truth, 1)[0]
        assert cur >= prev
        prev = cur


def test_pseudo_quality_identity_and_counts():
    t = np.zeros((4, 4), int)
    t[:2] = 1
    assert pseudo_quality(t, t) == (1.0, 1.0)
    assert pseudo_quality(np.ones_like(t), t) == (0.5, 1.0)


def test_pseudo_quality_undefined():
    z = np.zeros((4, 4), int)
    assert pseudo_quality(z, z) == (None, None)


def test_pseudo_quality_vs_confusion_oracle():
    rng = np.random.default_rng(3)
    for _ in range(300):
        p = rng.integers(0, 3, (8, 8))
        t = rng.integers(0, 3, (8, 8))
        for c in (1, 2):
            tp = fp = fn = 0
            for a, b in zip(p.ravel(), t.ravel()):
                tp += a == c and b == c
                fp += a == c and b != c
                fn += a != c and b == c
            prec = tp / (tp + fp) if tp + fp else None
            rec = tp / (tp + fn) if tp + fn else None
            assert pseudo_quality(p, t, c) == (prec, rec)


def test_report_aggregates_and_missing():
    rep = MetricReport(classes=[1])
    t = np.zeros((8, 8), int)
    t[2:5, 2:5] = 1
    rep.add("a", t, t)
    rep.add("b", np.zeros_like(t), t)  # empty prediction: surface undefined
    agg = rep.aggregate()
    assert agg["1"]["dice"]["mean"] == 0.5
    assert agg["1"]["dice"]["std"] == 0.5
    assert agg["1"]["asd"]["missing"] == 1 and agg["1"]["asd"]["mean"] == 0.0
    doc = rep.to_json()
    assert {"mean", "std"} <= set(doc["aggregate"]["mean"]["dice"])
