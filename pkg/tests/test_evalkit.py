import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opengcd import evalkit
from opengcd.core_math import ContractError, ParameterError, RngState


def brute_force_acc(pred, truth):
    ps, ts = sorted(set(pred)), sorted(set(truth))
    n = max(len(ps), len(ts))
    ps = ps + [("pad", i) for i in range(n - len(ps))]
    best = 0
    for perm in itertools.permutations(ts + [None] * (n - len(ts))):
        m = dict(zip(ps, perm))
        best = max(best, sum(m[p] == t for p, t in zip(pred, truth)))
    return best / len(pred)


def pairwise_auroc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def blobs(centers, n, sigma, rng):
    X = np.concatenate([c + sigma * rng.normal((n, len(c))) for c in centers])
    return X, np.repeat(np.arange(len(centers)), n)


def test_kmeans_trivial_cases():
    _, inertia = evalkit.kmeans(np.array([[0.0, 0.0], [1.0, 1.0]]), 2, RngState(0))
    assert inertia == 0.0
    _, inertia = evalkit.kmeans(np.ones((5, 3)), 1, RngState(0))
    assert inertia == 0.0
    with pytest.raises(ParameterError):
        evalkit.kmeans(np.ones((3, 2)), 4, RngState(0))


def test_kmeans_separated_blobs_are_pure():
    rng = RngState(1)
    X, y = blobs(np.array([[0, 0], [3, 0], [0, 3.0]]), 30, 0.01, rng)
    lab, _ = evalkit.kmeans(X, 3, rng)
    for k in range(3):
        assert len(set(y[lab == k])) == 1


def test_kmeans_uses_every_cluster_on_distinct_points():
    X = np.concatenate([np.zeros((10, 2)), np.ones((1, 2)), np.full((1, 2), 5.0)])
    lab, inertia = evalkit.kmeans(X, 3, RngState(0))
    assert len(np.unique(lab)) == 3 and inertia == 0.0


def test_hungarian_label_invariance():
    truth = np.repeat(np.arange(4), 5)
    assert evalkit.hungarian_acc(truth, truth, [0, 1]) == (1.0, 1.0, 1.0)
    assert evalkit.hungarian_acc((truth * 3 + 7) % 11, truth, [0, 1]) == (1.0, 1.0, 1.0)
    with pytest.raises(ContractError):
        evalkit.hungarian_acc([], [], [0])


def test_hungarian_old_new_share_one_matching():
    truth = np.array([0, 0, 1, 1])
    pred = np.array([5, 5, 5, 5])  # one cluster can serve only one class
    a, o, n = evalkit.hungarian_acc(pred, truth, [0])
    assert a == 0.5 and (o, n) in {(1.0, 0.0), (0.0, 1.0)}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_hungarian_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 5, 20)
    truth = rng.integers(0, 5, 20)
    assert evalkit.hungarian_acc(pred, truth, [0])[0] == pytest.approx(brute_force_acc(pred.tolist(), truth.tolist()))


def test_auroc_examples():
    assert evalkit.auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert evalkit.auroc([1.0] * 6, [0, 1] * 3) == 0.5
    with pytest.raises(ContractError):
        evalkit.auroc([1.0, 2.0], [1, 1])


@settings(max_examples=40)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=30)
       .filter(lambda r: len({l for _, l in r}) == 2))
def test_auroc_equals_pairwise_count(rows):
    scores = [float(s) for s, _ in rows]
    labels = [l for _, l in rows]
    assert evalkit.auroc(scores, labels) == pytest.approx(pairwise_auroc(scores, labels), abs=1e-12)


def test_estimate_k_blobs():
    rng = RngState(3)
    X, _ = blobs(np.array([[0, 0], [6, 0], [0, 6], [6, 6.0]]), 25, 0.5, rng)
    assert evalkit.estimate_k(X, 2, 8, rng) == 4


def test_estimate_k_degenerate_and_labeled():
    assert evalkit.estimate_k(np.ones((10, 2)), 2, 5, RngState(0)) == 2
    with pytest.raises(ParameterError):
        evalkit.estimate_k(np.ones((4, 2)), 3, 2, RngState(0))
    rng = RngState(5)
    X, y = blobs(np.array([[0, 0], [6, 0], [0, 6.0]]), 20, 0.3, rng)
    mask = np.arange(len(X)) % 2 == 0
    assert evalkit.estimate_k(X, 2, 6, rng, method="labeled", labeled=(mask, y[mask])) == 3


def test_margin_stats_examples():
    X = np.array([[0.0, 0.0], [0.0, 0.0], [2.0, 0.0], [2.0, 0.0]])
    assert evalkit.margin_stats(X, [0, 0, 1, 1]) == (2.0, 0.0)
    assert evalkit.margin_stats(np.array([[0.0], [5.0], [9.0]]), [0, 1, 2])[1] == 0.0
    with pytest.warns(UserWarning):
        evalkit.margin_stats(X, [0, 0, 1, 1], classes=[0, 1, 2])


def test_margin_stats_double_loop():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(30, 3))
    y = rng.integers(0, 3, 30)
    cents = {c: sum(X[i] for i in range(30) if y[i] == c) / sum(y == c) for c in range(3)}
    dmin = min(math.dist(cents[a], cents[b]) for a in range(3) for b in range(3) if a != b)
    s2 = sum(sum((X[i][j] - cents[y[i]][j]) ** 2 for j in range(3)) for i in range(30)) / 30
    got = evalkit.margin_stats(X, y)
    assert got[0] == pytest.approx(dmin, rel=1e-12)
    assert got[1] == pytest.approx(s2, rel=1e-12)


def test_cluster_and_score_report():
    rng = RngState(2)
    X, y = blobs(np.array([[0, 0], [5, 0], [0, 5.0]]), 10, 0.1, rng)
    rep = evalkit.cluster_and_score(X, y, [0, 1], rng)
    assert rep.acc_all == 1.0 and rep.k_used == 3
    assert set(rep.to_dict()) >= {"acc_all", "acc_old", "acc_new", "assignments", "matching", "inertia"}
