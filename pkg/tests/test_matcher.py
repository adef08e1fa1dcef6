"""Matcher forward pass, Sinkhorn normalisation, decoding and Hungarian baselines.

Oracles: a loop-based re-implementation of the dustbin attention pass,
factorial enumeration for assignments and a direct mutual-argmax scan.
"""
from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reid3d.geometry import BoundingBox3D
from reid3d.matcher import (MatcherParams, MatchResult, augment_with_dustbins, baseline_match, dustbin_scores,
                            extract_matches, hungarian, init_params, load_params, matcher_forward,
                            pooled_covariance, project_descriptors, save_params, score_matrix, sinkhorn)
from reid3d.object_map import MapSchemaError, ObjectInstance, ObjectMap


def _map(F, tag="A"):
    F = np.asarray(F, dtype=float)
    box = BoundingBox3D((0, 0, 0), (1, 1, 1))
    return ObjectMap([ObjectInstance(box, "x", 1.0, f) for f in F], tag, F.shape[1])


def _brute_assignment(cost):
    n, m = cost.shape
    if n <= m:
        return min(sum(cost[i, c] for i, c in enumerate(p)) for p in itertools.permutations(range(m), n))
    return _brute_assignment(cost.T)


def _mlp(layers, x):
    for k, (w, b) in enumerate(layers):
        x = w @ x + b
        if k < len(layers) - 1:
            x = np.maximum(x, 0)
    return x[0]


def _dustbin_oracle(HA, HB, p):
    def side(Hq, Hg):
        z = []
        for hq in Hq:
            w = np.array([_mlp(p.att, np.concatenate([hq, hg])) for hg in Hg])
            w = np.exp(w - w.max())
            w /= w.sum()
            a = sum(wj * hg for wj, hg in zip(w, Hg))
            z.append(_mlp(p.fin, np.concatenate([hq, a])))
        return np.array(z)
    return side(HA, HB), side(HB, HA)


# --- projection and scores -------------------------------------------------

def test_projection_identity_and_bias():
    p = init_params(3, 3, "fixed", noise=0.0)
    F = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(project_descriptors(F, p), F)
    p.proj_bias[:] = [1.0, -2.0, 0.5]
    np.testing.assert_array_equal(project_descriptors(np.zeros((2, 3)), p), [[1.0, -2.0, 0.5]] * 2)


def test_projection_hand_product():
    p = init_params(3, 2, "fixed", noise=0.0)
    p.proj_weight[:] = [[1.0, 2.0, 3.0], [0.0, -1.0, 4.0]]
    p.proj_bias[:] = [0.5, -0.5]
    got = project_descriptors(np.array([[1.0, 1.0, 1.0], [2.0, 0.0, -1.0]]), p)
    np.testing.assert_allclose(got, [[6.5, 2.5], [-0.5, -4.5]])


def test_projection_dim_mismatch():
    p = init_params(3, 3, "fixed")
    with pytest.raises(MapSchemaError):
        project_descriptors(np.zeros((2, 4)), p)


def test_score_matrix_examples():
    Q, _ = np.linalg.qr(np.random.default_rng(1).normal(size=(4, 4)))
    np.testing.assert_allclose(score_matrix(Q, Q), np.eye(4), atol=1e-12)
    assert score_matrix(np.zeros((0, 3)), np.ones((5, 3))).shape == (0, 5)
    np.testing.assert_allclose(score_matrix([[1, 2], [3, 4]], [[5, 6], [7, 8]]), [[17, 23], [39, 53]])


# --- dustbins --------------------------------------------------------------

def test_dustbin_singleton_gallery():
    p = init_params(4, 4, "adaptive", hidden=(6, 5), seed=2)
    rng = np.random.default_rng(2)
    HA, HB = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    zA, _ = dustbin_scores(HA, HB, p)
    want = [_mlp(p.fin, np.concatenate([h, HB[0]])) for h in HA]
    np.testing.assert_allclose(zA, want, rtol=1e-12)


def test_dustbin_matches_loop_oracle():
    p = init_params(3, 3, "adaptive", hidden=(5, 4), seed=3)
    rng = np.random.default_rng(3)
    HA, HB = rng.normal(size=(2, 3)), rng.normal(size=(3, 3))
    zA, zB = dustbin_scores(HA, HB, p)
    oA, oB = _dustbin_oracle(HA, HB, p)
    np.testing.assert_allclose(zA, oA, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(zB, oB, rtol=1e-12, atol=1e-14)


def test_dustbin_permutation_equivariance():
    p = init_params(5, 5, "adaptive", hidden=(8, 4), seed=4)
    rng = np.random.default_rng(4)
    HA, HB = rng.normal(size=(4, 5)), rng.normal(size=(6, 5))
    zA, zB = dustbin_scores(HA, HB, p)
    pa, pb = rng.permutation(4), rng.permutation(6)
    zA2, zB2 = dustbin_scores(HA[pa], HB, p)
    np.testing.assert_allclose(zA2, zA[pa], atol=1e-12)
    np.testing.assert_allclose(zB2, zB, atol=1e-12)
    zA3, _ = dustbin_scores(HA, HB[pb], p)
    np.testing.assert_allclose(zA3, zA, atol=1e-12)


def test_augment_examples():
    np.testing.assert_array_equal(augment_with_dustbins(np.zeros((0, 0)), alpha=0.7), [[0.7]])
    S = np.array([[5.0, 6.0], [7.0, 8.0]])
    out = augment_with_dustbins(S, [1.0, 2.0], [3.0, 4.0])
    np.testing.assert_array_equal(out, [[5, 6, 1], [7, 8, 2], [3, 4, 0]])
    fixed = augment_with_dustbins(S, alpha=1.5)
    const = augment_with_dustbins(S, [1.5, 1.5], [1.5, 1.5])
    np.testing.assert_array_equal(fixed[:-1, :], const[:-1, :])
    np.testing.assert_array_equal(fixed[:, :-1], const[:, :-1])


# --- Sinkhorn --------------------------------------------------------------

def _marginal_error(P):
    mA, mB = P.shape[0] - 1, P.shape[1] - 1
    r, c = P.sum(axis=1), P.sum(axis=0)
    return max(np.abs(r[:mA] - 1).max(), np.abs(c[:mB] - 1).max(),
               abs(r[mA] - mB) / mB, abs(c[mB] - mA) / mA)


def test_sinkhorn_dominant_score():
    # 1x1 with zero dustbins: the cross ratio gives P11 = sqrt(a) / (1 + sqrt(a)), a = exp(S11)
    for s in (0.0, 2.0, 5.0, 10.0):
        P = sinkhorn(augment_with_dustbins(np.array([[s]]), alpha=0.0), 1000)
        r = math.exp(s / 2)
        assert P[0, 0] == pytest.approx(r / (1 + r), abs=1e-9)
    vals = [sinkhorn(augment_with_dustbins(np.array([[s]]), alpha=0.0))[0, 0] for s in (1, 5, 10, 20)]
    assert np.all(np.diff(vals) > 0) and vals[-1] > 0.99


def test_sinkhorn_symmetric_two_by_two():
    P = sinkhorn(augment_with_dustbins(np.ones((2, 2)), [0.3, 0.3], [0.3, 0.3]))
    core = P[:2, :2]
    assert np.allclose(core, core[0, 0], atol=1e-12)


def test_sinkhorn_marginals_small():
    rng = np.random.default_rng(5)
    for _ in range(20):
        S = augment_with_dustbins(rng.normal(size=(3, 3)), rng.normal(size=3), rng.normal(size=3))
        assert _marginal_error(sinkhorn(S)) < 1e-6


def test_sinkhorn_degenerate_shapes():
    assert sinkhorn(np.zeros((1, 1))).shape == (1, 1)
    P = sinkhorn(np.zeros((3, 1)))
    np.testing.assert_array_equal(P[:2, 0], [1.0, 1.0])


def test_sinkhorn_rejects_nonfinite():
    with pytest.raises(ValueError):
        sinkhorn(np.array([[np.nan, 0.0], [0.0, 0.0]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(2, 8)), elements=st.floats(-3, 3)),
       st.floats(-50, 50))
def test_sinkhorn_shift_invariance(S, c):
    P = sinkhorn(S)
    assert np.abs(sinkhorn(S + c) - P).max() < 1e-9
    assert _marginal_error(P) < 1e-6


# --- decoding ------------------------------------------------------------

def _mutual_oracle(P, thr):
    mA, mB = P.shape[0] - 1, P.shape[1] - 1
    pairs = []
    for i in range(mA):
        for j in range(mB):
            row_ok = all(P[i, j] >= P[i, k] and (P[i, j] > P[i, k] or j <= k) for k in range(mB))
            col_ok = all(P[i, j] >= P[k, j] and (P[i, j] > P[k, j] or i <= k) for k in range(mA))
            if row_ok and col_ok and P[i, j] >= thr:
                pairs.append((i, j))
    return pairs


def _check_partition(res, mA, mB):
    a = [i for i, _, _ in res.pairs] + list(res.unmatched_a)
    b = [j for _, j, _ in res.pairs] + list(res.unmatched_b)
    assert sorted(a) == list(range(mA)) and sorted(b) == list(range(mB))


def test_extract_identity():
    P = np.full((4, 4), 0.01)
    np.fill_diagonal(P, 0.97)
    res = extract_matches(P)
    assert [(i, j) for i, j, _ in res.pairs] == [(0, 0), (1, 1), (2, 2)]


def test_extract_dustbin_row():
    P = np.array([[0.1, 0.05, 0.85], [0.05, 0.9, 0.05], [0.85, 0.05, 0.0]])
    res = extract_matches(P)
    assert res.unmatched_a == [0] and [(i, j) for i, j, _ in res.pairs] == [(1, 1)]
    assert res.unmatched_b == [0]


def test_extract_matches_bruteforce_scan():
    rng = np.random.default_rng(6)
    for _ in range(200):
        P = rng.random((5, 6))
        res = extract_matches(P, 0.3)
        assert [(i, j) for i, j, _ in res.pairs] == _mutual_oracle(P, 0.3)
        _check_partition(res, 4, 5)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7)), elements=st.floats(0, 1)),
       st.floats(0, 1))
def test_extract_partition(P, thr):
    res = extract_matches(P, thr)
    _check_partition(res, P.shape[0] - 1, P.shape[1] - 1)


def test_match_result_dict_round_trip():
    r = MatchResult.from_pairs([(1, 0, 0.5)], 3, 2)
    assert MatchResult.from_dict(r.to_dict()) == r


# --- Hungarian -------------------------------------------------------------

def test_hungarian_identity_and_row():
    cost = 1.0 - np.eye(4)
    assert hungarian(cost) == [(0, 0), (1, 1), (2, 2), (3, 3)]
    assert hungarian([[3.0, 1.0, 2.0]]) == [(0, 1)]
    with pytest.raises(ValueError):
        hungarian([[np.inf]])


def test_hungarian_equals_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(60):
        n, m = rng.integers(1, 8, size=2)
        cost = rng.normal(size=(n, m))
        pairs = hungarian(cost)
        assert len(pairs) == min(n, m)
        assert len({i for i, _ in pairs}) == len({j for _, j in pairs}) == len(pairs)
        assert sum(cost[i, j] for i, j in pairs) == pytest.approx(_brute_assignment(cost), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.integers(-5, 5)))
def test_hungarian_beats_random_assignments(cost):
    pairs = hungarian(cost)
    best = sum(cost[i, j] for i, j in pairs)
    rng = np.random.default_rng(0)
    n, m = cost.shape
    k = min(n, m)
    for _ in range(200):
        r, c = rng.permutation(n)[:k], rng.permutation(m)[:k]
        assert best <= cost[r, c].sum() + 1e-9


# --- baselines -------------------------------------------------------------

def test_l2_identical_maps():
    F = np.random.default_rng(8).normal(size=(6, 5))
    _, res = baseline_match(_map(F), _map(F, "B"))
    assert [(i, j) for i, j, _ in res.pairs] == [(i, i) for i in range(6)]


def test_mahalanobis_full_shrinkage_equals_l2():
    rng = np.random.default_rng(9)
    A, B = _map(rng.normal(size=(5, 4))), _map(rng.normal(size=(5, 4)), "B")
    _, l2 = baseline_match(A, B, "l2")
    _, mh = baseline_match(A, B, "mahalanobis", shrinkage=1.0)
    assert [p[:2] for p in l2.pairs] == [p[:2] for p in mh.pairs]


def test_l2_five_by_five_enumeration():
    rng = np.random.default_rng(10)
    FA, FB = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    scores, res = baseline_match(_map(FA), _map(FB, "B"))
    total = sum(-scores[i, j] for i, j, _ in res.pairs)
    assert total == pytest.approx(_brute_assignment(-scores), abs=1e-9)


def test_l2_orthogonal_invariance():
    rng = np.random.default_rng(11)
    FA, FB = rng.normal(size=(6, 4)), rng.normal(size=(7, 4))
    Q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    _, r1 = baseline_match(_map(FA), _map(FB, "B"))
    _, r2 = baseline_match(_map(FA @ Q), _map(FB @ Q, "B"))
    assert [p[:2] for p in r1.pairs] == [p[:2] for p in r2.pairs]


def test_pooled_covariance_examples():
    X = np.random.default_rng(12).normal(scale=2.0, size=(20000, 3))
    S, Sinv = pooled_covariance(X, 1.0)
    assert np.allclose(S, S[0, 0] * np.eye(3))
    S, Sinv = pooled_covariance(X, 0.1)
    np.testing.assert_allclose(S, 4.0 * np.eye(3), atol=0.15)
    np.testing.assert_allclose(S @ Sinv, np.eye(3), atol=1e-10)
    dup = np.tile([[1.0, 2.0, 3.0]], (5, 1)) + np.array([[0.0, 0, 0]] * 4 + [[1e-3, 0, 0]])
    S, Sinv = pooled_covariance(dup, 0.1)
    assert np.all(np.linalg.eigvalsh(S) > 0)
    S, _ = pooled_covariance(np.ones((1, 3)))
    np.testing.assert_array_equal(S, np.eye(3))


# --- full forward and persistence ---------------------------------------

def test_forward_shapes_and_marginals():
    rng = np.random.default_rng(13)
    for variant in ("adaptive", "fixed"):
        p = init_params(6, 4, variant, hidden=(8, 4), seed=1)
        fw = matcher_forward(rng.normal(size=(3, 6)), rng.normal(size=(5, 6)), p)
        assert fw.P.shape == (4, 6)
        assert _marginal_error(fw.P) < 1e-6
        assert len(fw.dustbin_values) == 8


def test_params_file_round_trip(tmp_path):
    for variant in ("adaptive", "fixed"):
        p = init_params(5, 3, variant, hidden=(4, 2), seed=2)
        save_params(p, tmp_path / "p.json")
        q = load_params(tmp_path / "p.json")
        assert q.variant == variant
        for k, v in p.tensors().items():
            assert q.tensors()[k].tobytes() == v.tobytes()
        assert q.check() == []


def test_params_check_flags_bad_shapes():
    p = init_params(5, 3, "adaptive", hidden=(4, 2))
    p.att[1] = (np.zeros((2, 3)), np.zeros(2))
    p.proj_bias = np.array([math.nan, 0.0, 0.0])
    bad = p.check()
    assert any("att.1" in b for b in bad) and any("non-finite" in b for b in bad)
    assert isinstance(p, MatcherParams)
