"""Matching and evaluation metric tests.

The numeric cases (2/3 repeatability, 3/4 MMA, 0.4 matching score,
3-point mutual-NN exclusion) are worked out by hand from the metric
definitions and frozen here.
"""

import numpy as np
import pytest

from relfeat.extract import Keypoint, KeypointSet
from relfeat.metrics import (EvalResult, MScoreResult, build_eval_report,
                             evaluate_pair, matching_score, mma,
                             mutual_nn_match, repeatability_score)
from relfeat.synth import CorrespondenceField, apply_homography


def kset(coords, descs=None, hw=(32, 32)):
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if descs is None:
        # distinct one-hot rows so mutual NN pairs index i with index i
        descs = np.eye(max(len(coords), 1), dtype=np.float32)[:len(coords)]
    kps = [Keypoint(x=float(x), y=float(y), scale=1.0, score=1.0,
                    descriptor=np.asarray(d, dtype=np.float32))
           for (x, y), d in zip(coords, descs)]
    return KeypointSet(keypoints=kps, image_hw=hw)


def circle_desc(deg):
    t = np.deg2rad(deg)
    return np.array([np.cos(t), np.sin(t)], dtype=np.float32)


# ------------------------------------------------------------------
# mutual nearest neighbor matching
# ------------------------------------------------------------------

def test_mutual_nn_identity():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(6, 8)).astype(np.float32)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    A = kset(rng.uniform(0, 30, size=(6, 2)), d)
    m = mutual_nn_match(A, A)
    assert len(m) == 6
    assert np.array_equal(m.a_idx, np.arange(6))
    assert np.array_equal(m.b_idx, np.arange(6))
    assert np.allclose(m.distance, 0.0)


def test_mutual_nn_three_point_exclusion():
    # a1's nearest is b1, but b1 prefers a2, so (a1, b1) must not appear
    A = kset([(0, 0), (1, 0)], [circle_desc(0), circle_desc(10)])
    B = kset([(0, 0)], [circle_desc(6)])
    m = mutual_nn_match(A, B)
    assert len(m) == 1
    assert (int(m.a_idx[0]), int(m.b_idx[0])) == (1, 0)


def test_mutual_nn_matches_bruteforce_oracle():
    rng = np.random.default_rng(3)
    da = rng.normal(size=(8, 5))
    db = rng.normal(size=(6, 5))
    da /= np.linalg.norm(da, axis=1, keepdims=True)
    db /= np.linalg.norm(db, axis=1, keepdims=True)
    A = kset(rng.uniform(0, 30, size=(8, 2)), da)
    B = kset(rng.uniform(0, 30, size=(6, 2)), db)
    D = np.linalg.norm(da[:, None, :] - db[None, :, :], axis=2)
    expected = set()
    for i in range(8):
        j = int(np.argmin(D[i]))
        if int(np.argmin(D[:, j])) == i:
            expected.add((i, j))
    m = mutual_nn_match(A, B)
    assert set(zip(m.a_idx.tolist(), m.b_idx.tolist())) == expected
    assert len(expected) > 0


def test_mutual_nn_tie_goes_to_lowest_index():
    A = kset([(0, 0)], [circle_desc(0)])
    B = kset([(0, 0), (5, 5)], [circle_desc(40), circle_desc(40)])
    m = mutual_nn_match(A, B)
    assert len(m) == 1 and int(m.b_idx[0]) == 0


def test_mutual_nn_is_symmetric():
    rng = np.random.default_rng(11)
    da = rng.normal(size=(7, 4))
    db = rng.normal(size=(5, 4))
    da /= np.linalg.norm(da, axis=1, keepdims=True)
    db /= np.linalg.norm(db, axis=1, keepdims=True)
    A = kset(rng.uniform(0, 30, size=(7, 2)), da)
    B = kset(rng.uniform(0, 30, size=(5, 2)), db)
    m1 = mutual_nn_match(A, B)
    m2 = mutual_nn_match(B, A)
    assert (set(zip(m1.a_idx.tolist(), m1.b_idx.tolist()))
            == set(zip(m2.b_idx.tolist(), m2.a_idx.tolist())))


def test_mutual_nn_partial_bijection():
    rng = np.random.default_rng(4)
    da = rng.normal(size=(9, 3))
    db = rng.normal(size=(9, 3))
    da /= np.linalg.norm(da, axis=1, keepdims=True)
    db /= np.linalg.norm(db, axis=1, keepdims=True)
    m = mutual_nn_match(kset(rng.uniform(0, 9, (9, 2)), da),
                        kset(rng.uniform(0, 9, (9, 2)), db))
    assert len(np.unique(m.a_idx)) == len(m)
    assert len(np.unique(m.b_idx)) == len(m)


def test_mutual_nn_empty_side():
    A = kset([(0, 0)], [circle_desc(0)])
    empty = KeypointSet(keypoints=[], image_hw=(32, 32))
    assert len(mutual_nn_match(A, empty)) == 0
    assert len(mutual_nn_match(empty, A)) == 0
    assert len(mutual_nn_match(empty, empty)) == 0


# ------------------------------------------------------------------
# repeatability
# ------------------------------------------------------------------

def test_repeatability_identity_is_one():
    A = kset([(5, 5), (10, 20), (25, 8)])
    assert repeatability_score(A, A, np.eye(3), tol_px=1.0) == 1.0


def test_repeatability_two_thirds_case():
    # 3 vs 4 keypoints, identity geometry: a0 and a1 land within 2 px
    # of distinct partners, a2 is 5 px from everything, denom = min(3, 4)
    A = kset([(5, 5), (10, 10), (20, 20)])
    B = kset([(5.5, 5), (11, 10), (25, 20), (28, 28)])
    r = repeatability_score(A, B, np.eye(3), tol_px=2.0)
    assert r == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_repeatability_greedy_one_to_one():
    # both A points are within tol of the single close B point; the
    # nearer one claims it and the other stays unmatched
    A = kset([(5.0, 5), (5.7, 5)])
    B = kset([(5.4, 5), (20, 20)])
    r = repeatability_score(A, B, np.eye(3), tol_px=1.0)
    assert r == pytest.approx(0.5, abs=1e-12)


def test_repeatability_shared_region_restriction():
    # the +30 px shift pushes a0 outside the 32-wide image, so the
    # denominator only counts a1
    H = np.array([[1, 0, 30], [0, 1, 0], [0, 0, 1]], dtype=np.float64)
    A = kset([(5, 5), (1, 5)])
    B = kset([(31, 5)])
    assert repeatability_score(A, B, H, tol_px=1.0) == 1.0


def test_repeatability_all_far_is_zero():
    A = kset([(5, 5)])
    B = kset([(25, 25)])
    assert repeatability_score(A, B, np.eye(3), tol_px=2.0) == 0.0


def test_repeatability_empty_rules():
    A = kset([(5, 5)])
    empty = KeypointSet(keypoints=[], image_hw=(32, 32))
    assert repeatability_score(A, empty, np.eye(3), 2.0) == 0.0
    assert repeatability_score(empty, A, np.eye(3), 2.0) == 0.0
    with pytest.raises(ValueError):
        repeatability_score(empty, empty, np.eye(3), 2.0)


def test_repeatability_ignores_descriptors():
    rng = np.random.default_rng(7)
    coords_a = [(5, 5), (10, 10), (20, 20)]
    coords_b = [(5.5, 5), (11, 10), (25, 20)]
    r1 = repeatability_score(kset(coords_a), kset(coords_b), np.eye(3), 2.0)
    da = rng.normal(size=(3, 6)).astype(np.float32)
    db = rng.normal(size=(3, 6)).astype(np.float32)
    r2 = repeatability_score(kset(coords_a, da), kset(coords_b, db),
                             np.eye(3), 2.0)
    assert r1 == r2


def test_repeatability_requires_image_size():
    A = kset([(5, 5)])
    B = kset([(5, 5)], hw=None)
    with pytest.raises(ValueError, match="image_hw"):
        repeatability_score(A, B, np.eye(3), 2.0)


# ------------------------------------------------------------------
# mean matching accuracy
# ------------------------------------------------------------------

def four_error_pair():
    # identity pairing with reprojection errors 0.5, 1.5, 2.5, 9 px
    a = [(0, 10), (10, 10), (20, 10), (30, 10)]
    errs = [0.5, 1.5, 2.5, 9.0]
    b = [(x + e, y) for (x, y), e in zip(a, errs)]
    A, B = kset(a, hw=(64, 64)), kset(b, hw=(64, 64))
    return A, B, mutual_nn_match(A, B)


def test_mma_three_quarters_case():
    A, B, m = four_error_pair()
    assert len(m) == 4
    out = mma(m, A, B, np.eye(3), thresholds=[3.0])
    assert out[3.0] == pytest.approx(0.75, abs=1e-12)


def test_mma_monotone_in_threshold():
    A, B, m = four_error_pair()
    out = mma(m, A, B, np.eye(3), thresholds=[1.0, 2.0, 3.0, 10.0])
    assert out[1.0] == pytest.approx(0.25)
    assert out[2.0] == pytest.approx(0.50)
    assert out[3.0] == pytest.approx(0.75)
    assert out[10.0] == pytest.approx(1.0)
    vals = [out[t] for t in (1.0, 2.0, 3.0, 10.0)]
    assert vals == sorted(vals)


def test_mma_exact_matches_score_one():
    coords = [(4, 4), (10, 18), (25, 9)]
    A, B = kset(coords), kset(coords)
    m = mutual_nn_match(A, B)
    out = mma(m, A, B, np.eye(3), thresholds=[0.5, 1.0])
    assert out[0.5] == 1.0 and out[1.0] == 1.0


def test_mma_empty_matches_is_zero():
    A = kset([(5, 5)])
    m = mutual_nn_match(A, KeypointSet(keypoints=[], image_hw=(32, 32)))
    out = mma(m, A, A, np.eye(3), thresholds=[1.0, 3.0])
    assert out == {1.0: 0.0, 3.0: 0.0}


def test_mma_excludes_invalid_flow():
    A, B, m = four_error_pair()
    h, w = 64, 64
    U = np.stack(np.meshgrid(np.arange(w), np.arange(h))[:2], axis=-1)
    U = U.astype(np.float64)
    valid = np.ones((h, w), dtype=bool)
    valid[:, 29:] = False        # kills the 9 px outlier at x = 30
    field = CorrespondenceField(U=U, valid=valid)
    out = mma(m, A, B, field, thresholds=[3.0])
    assert out[3.0] == pytest.approx(1.0)


# ------------------------------------------------------------------
# matching score
# ------------------------------------------------------------------

def test_matching_score_point_four_case():
    # 10 features per side all inside the shared region; the one-hot
    # descriptors give the identity mutual matching and exactly 4 of
    # those matches are geometrically correct in each direction
    rng = np.random.default_rng(5)
    a = np.stack([rng.uniform(5, 45, 10), rng.uniform(5, 55, 10)], axis=1)
    b = a.copy()
    b[:4, 0] += 0.5
    b[4:, 0] += 10.0
    A, B = kset(a, hw=(64, 64)), kset(b, hw=(64, 64))
    res = matching_score(A, B, np.eye(3), tol_px=2.0)
    assert res.status == "ok"
    assert res.shared_a == 10 and res.shared_b == 10
    assert res.correct_ab == 4 and res.correct_ba == 4
    assert res.value == pytest.approx(0.4, abs=1e-12)


def test_matching_score_perfect_pipeline():
    coords = [(4, 4), (10, 18), (25, 9), (30, 30)]
    A, B = kset(coords), kset(coords)
    res = matching_score(A, B, np.eye(3), tol_px=1.0)
    assert res.status == "ok" and res.value == pytest.approx(1.0)


def test_matching_score_skips_empty_shared_region():
    H = np.array([[1, 0, 1000], [0, 1, 0], [0, 0, 1]], dtype=np.float64)
    A = kset([(5, 5), (10, 10)])
    B = kset([(5, 5), (10, 10)])
    res = matching_score(A, B, H, tol_px=2.0)
    assert res.status == "skipped" and res.value is None


def test_matching_score_rejects_field_geometry():
    A = kset([(5, 5)])
    U = np.zeros((4, 4, 2))
    field = CorrespondenceField(U=U, valid=np.ones((4, 4), bool))
    with pytest.raises(TypeError):
        matching_score(A, A, field, tol_px=2.0)


def test_matching_score_requires_image_size():
    A = kset([(5, 5)], hw=None)
    B = kset([(5, 5)])
    with pytest.raises(ValueError, match="image_hw"):
        matching_score(A, B, np.eye(3), 2.0)


def test_matching_score_empty_side_skipped():
    A = kset([(5, 5)])
    empty = KeypointSet(keypoints=[], image_hw=(32, 32))
    assert matching_score(A, empty, np.eye(3), 2.0).status == "skipped"


# ------------------------------------------------------------------
# planted-detector property and the report
# ------------------------------------------------------------------

def test_planted_detector_is_perfect():
    # keypoints planted at exact corresponding locations under a known
    # homography must give repeatability 1 and MMA 1 at any threshold
    rng = np.random.default_rng(9)
    H = np.array([[0.95, 0.04, 3.0],
                  [-0.03, 1.05, -2.0],
                  [1e-4, -5e-5, 1.0]], dtype=np.float64)
    pts = np.stack([rng.uniform(10, 50, 12), rng.uniform(10, 50, 12)], axis=1)
    proj = apply_homography(H, pts)
    keep = ((proj[:, 0] >= 0) & (proj[:, 0] <= 63)
            & (proj[:, 1] >= 0) & (proj[:, 1] <= 63))
    assert keep.sum() >= 8
    descs = np.eye(16, dtype=np.float32)[:int(keep.sum())]
    A = kset(pts[keep], descs, hw=(64, 64))
    B = kset(proj[keep], descs, hw=(64, 64))
    r = evaluate_pair(A, B, H, thresholds=[1.0, 3.0], tol_px=3.0)
    assert r.repeatability == pytest.approx(1.0)
    assert r.mma_at[1.0] == pytest.approx(1.0)
    assert r.m_score.value == pytest.approx(1.0)
    assert r.n_matches == int(keep.sum())


def test_build_eval_report_aggregates():
    r1 = EvalResult(repeatability=0.5, mma_at={3.0: 0.6},
                    m_score=MScoreResult(status="ok", value=0.4),
                    n_a=10, n_b=10, n_matches=5)
    r2 = EvalResult(repeatability=1.0, mma_at={3.0: 0.8},
                    m_score=MScoreResult(status="skipped", value=None),
                    n_a=4, n_b=4, n_matches=2)
    rep = build_eval_report(["p1", "p2"], [r1, r2], thresholds=[3.0])
    assert len(rep["pairs"]) == 2
    assert rep["pairs"][1]["m_score"] is None
    agg = rep["aggregate"]
    assert agg["repeatability"] == pytest.approx(0.75)
    assert agg["mma"]["3.0"] == pytest.approx(0.7)
    assert agg["m_score"] == pytest.approx(0.4)   # skipped pair stays out
    assert agg["pairs_scored"] == 1 and agg["pairs_skipped"] == 1
