import csv
import io
import json
import time

import numpy as np
import pytest

from ravoskit.metrics import (
    CSV_COLUMNS,
    EvalReport,
    Timings,
    boundary,
    boundary_f,
    evaluate,
    region_j,
    reports_to_csv,
    reports_to_json,
    summarize,
    timing_scope,
)


def rect(H, W, r0, c0, r1, c1):
    m = np.zeros((H, W), bool)
    m[r0:r1, c0:c1] = True
    return m


def brute_f(pred, truth, tol):
    """Boundary F with explicit Chebyshev distances between boundary cells."""
    bp, bt = np.argwhere(boundary(pred)), np.argwhere(boundary(truth))
    if len(bp) == 0 and len(bt) == 0:
        return 1.0
    if len(bp) == 0 or len(bt) == 0:
        return 0.0
    d = np.abs(bp[:, None, :] - bt[None, :, :]).max(-1)
    p = np.mean(d.min(axis=1) <= tol)
    r = np.mean(d.min(axis=0) <= tol)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def test_region_j_examples():
    a = rect(6, 6, 1, 1, 4, 4)
    assert region_j(a, a) == 1.0
    assert region_j(a, rect(6, 6, 4, 4, 6, 6)) == 0.0
    assert region_j(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    assert region_j(a, np.zeros((6, 6))) == 0.0
    # two 2x3 rects overlapping in 2x2
    assert region_j(rect(5, 5, 0, 0, 2, 3), rect(5, 5, 0, 1, 2, 4)) == 0.5


def test_region_j_shape_mismatch():
    with pytest.raises(ValueError):
        region_j(np.zeros((2, 2)), np.zeros((2, 3)))


def test_region_j_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.random((8, 8)) < 0.4, rng.random((8, 8)) < 0.4
        assert region_j(a, b) == region_j(b, a)


def test_boundary_f_examples():
    a = rect(12, 12, 3, 3, 8, 8)
    assert boundary_f(a, a) == 1.0
    assert boundary_f(a, rect(12, 12, 3, 9, 8, 12), tol=1) == 0.0  # every boundary cell 2 apart
    assert boundary_f(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    with pytest.raises(ValueError):
        boundary_f(a, a, tol=-1)


def test_boundary_f_dilated_by_one():
    from scipy import ndimage

    a = rect(16, 16, 4, 4, 10, 11)
    d = ndimage.binary_dilation(a, structure=np.ones((3, 3), bool))
    assert boundary_f(d, a, tol=1) == brute_f(d, a, 1) == 1.0


def test_boundary_f_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(40):
        a, b = rng.random((14, 14)) < 0.35, rng.random((14, 14)) < 0.35
        for tol in (0, 1, 2):
            assert boundary_f(a, b, tol) == pytest.approx(brute_f(a, b, tol), abs=1e-12)


def test_boundary_f_self_is_one():
    rng = np.random.default_rng(2)
    for _ in range(10):
        a = rng.random((10, 10)) < 0.5
        if a.any():
            assert boundary_f(a, a, 0) == 1.0


def test_timings():
    t = Timings()
    assert t.table() == {}
    with timing_scope(t, "match"):
        with t.scope("assign"):
            time.sleep(0.001)
    with t.scope("match"):
        pass
    assert t.count("match") == 2 and t.count("assign") == 1
    assert t.table()["assign"]["median_ms"] >= 1.0
    assert t.total("match") >= t.samples["match"][0]


def fixture_reports():
    # hand-made per-frame scores for three sequences
    r1 = EvalReport("a", {1: [1.0, 0.5]}, {1: [1.0, 1.0]})
    r2 = EvalReport("b", {1: [0.2], 2: [0.4]}, {1: [0.6], 2: [0.0]})
    r3 = EvalReport("c", {3: [0.9, 0.9, 0.6]}, {3: [0.3, 0.3, 0.3]})
    return [r1, r2, r3]


def test_aggregation_by_hand():
    r1, r2, r3 = fixture_reports()
    assert r1.J_mean() == 0.75 and r1.F_mean() == 1.0 and r1.JF() == 0.875
    assert r2.J_mean() == pytest.approx(0.3) and r2.F_mean() == pytest.approx(0.3)
    s = summarize([r1, r2, r3])
    # object-level means: J (0.75, 0.2, 0.4, 0.8), F (1.0, 0.6, 0.0, 0.3)
    assert s["J"] == pytest.approx(2.15 / 4)
    assert s["F"] == pytest.approx(1.9 / 4)
    assert s["JF"] == pytest.approx((2.15 + 1.9) / 8)


def test_evaluate_skips_annotated_frame():
    truth = [np.ones((3, 3), int), np.ones((3, 3), int), np.zeros((3, 3), int)]
    pred = [np.zeros((3, 3), int), np.ones((3, 3), int), np.zeros((3, 3), int)]
    rep = evaluate("s", pred, truth, [1])
    assert rep.J[1] == [1.0, 1.0] and rep.F[1] == [1.0, 1.0]
    with pytest.raises(ValueError):
        evaluate("s", pred[:2], truth, [1])


def test_csv_and_json_writers():
    reps = fixture_reports()
    reps[0].match_ms_med, reps[0].mem_entries = 1.5, 10
    rows = list(csv.DictReader(io.StringIO(reports_to_csv(reps))))
    assert list(rows[0]) == CSV_COLUMNS
    assert [r["obj"] for r in rows if r["seq"] == "b"] == ["1", "2", "all"]
    assert float(rows[0]["match_ms_med"]) == 1.5
    blank = list(csv.DictReader(io.StringIO(reports_to_csv(reps, include_timing=False))))
    assert blank[0]["match_ms_med"] == "" and blank[0]["mem_entries"] == "10"
    doc = json.loads(reports_to_json(reps))
    assert doc["summary"]["JF"] == pytest.approx(summarize(reps)["JF"], abs=1e-6)
    assert doc["sequences"][0]["match_ms_med"] == 1.5
    assert json.loads(reports_to_json(reps, include_timing=False))["sequences"][0]["match_ms_med"] is None
