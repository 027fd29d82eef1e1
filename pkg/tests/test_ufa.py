import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from opengcd import ufa
from opengcd.core_math import ContractError, ParameterError, RngState


def stats_with(mus, sigmas=None, **kw):
    d = len(mus[0])
    s = ufa.ClassStats(tuple(range(len(mus))), d, **kw)
    for y, mu in enumerate(mus):
        s.mu[y] = np.asarray(mu, dtype=float)
        s.sigma[y] = np.eye(d) if sigmas is None else np.asarray(sigmas[y], dtype=float)
    return s


def test_ema_first_touch_adopts_batch():
    s = ufa.ClassStats((0, 1), 2)
    z = np.array([[1.0, 0.0], [3.0, 2.0]])
    ufa.ema_update(s, z, [0, 0])
    np.testing.assert_allclose(s.mu[0], [2.0, 1.0])
    np.testing.assert_allclose(s.sigma[0], np.cov(z.T))
    assert s.initialized_classes == [0]


@pytest.mark.parametrize("alpha,expect_batch", [(1.0, False), (0.0, True)])
def test_ema_extremes(alpha, expect_batch):
    s = stats_with([[0.0, 0.0]], alpha1=alpha, alpha2=alpha)
    z = np.array([[1.0, 1.0], [3.0, -1.0]])
    ufa.ema_update(s, z, [0, 0])
    mean = z.mean(0) if expect_batch else np.zeros(2)
    cov = np.cov(z.T) if expect_batch else np.eye(2)
    np.testing.assert_allclose(s.mu[0], mean)
    np.testing.assert_allclose(s.sigma[0], cov)


def test_ema_scalar_arithmetic():
    s = stats_with([[0.0]], alpha1=0.9)
    ufa.ema_update(s, [[1.0]], [0])
    assert s.mu[0][0] == pytest.approx(0.1)


def test_ema_rejects_unknown_label():
    with pytest.raises(ContractError):
        ufa.ema_update(ufa.ClassStats((0,), 2), np.ones((1, 2)), [3])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_ema_covariance_stays_psd(seed, alpha):
    rng = RngState(seed)
    s = ufa.ClassStats((0, 1), 3, alpha1=alpha, alpha2=alpha)
    for _ in range(4):
        ufa.ema_update(s, rng.normal((6, 3)), rng.integers(0, 2, 6))
    for y in s.initialized_classes:
        np.testing.assert_allclose(s.sigma[y], s.sigma[y].T)
        assert np.linalg.eigvalsh(s.sigma[y]).min() > -1e-12


@pytest.mark.parametrize("beta", [1.0, 2.0])
def test_tail_covariance(beta):
    s = stats_with([np.zeros(4)], ridge=0.0)
    x = ufa.sample_tail(s, 0, beta, 50_000, RngState(11))
    target = beta * np.eye(4)
    assert np.linalg.norm(np.cov(x.T) - target) / np.linalg.norm(target) < 0.05


def test_tail_errors_and_degenerate_covariance():
    s = stats_with([np.ones(3)], sigmas=[np.zeros((3, 3))])
    x = ufa.sample_tail(s, 0, 1.0, 100, RngState(0))
    assert np.abs(x - 1).max() < 10 * math.sqrt(s.ridge) * 5
    with pytest.raises(ufa.UninitializedClassError):
        ufa.sample_tail(ufa.ClassStats((0,), 3), 0, 1.0, 2, RngState(0))
    with pytest.raises(ParameterError):
        ufa.sample_tail(s, 0, 0.5, 2, RngState(0))


def test_mix_convexity_and_weights():
    mus = [[0.0, 0.0], [4.0, 2.0], [-1.0, 5.0]]
    s = stats_with(mus)
    z, w, c = ufa.sample_mix(s, 1, 0.0, 5, RngState(0))
    np.testing.assert_array_equal(z, np.asarray(mus)[c[:, 0]])
    z, w, c = ufa.sample_mix(s, 2, 0.0, 200, RngState(1))
    M = np.asarray(mus)
    recon = w[:, :1] * M[c[:, 0]] + w[:, 1:] * M[c[:, 1]]
    np.testing.assert_allclose(z, recon, atol=1e-12)
    assert np.all(c[:, 0] != c[:, 1])
    with pytest.raises(ContractError):
        ufa.sample_mix(s, 4, 0.0, 1, RngState(0))


def test_mix_weight_marginal_is_uniform():
    s = stats_with([[0.0], [1.0]])
    _, w, _ = ufa.sample_mix(s, 2, 0.0, 50_000, RngState(2))
    assert sps.kstest(w[:, 0], "uniform").statistic < 0.02


def test_sphere_samples():
    x = ufa.sample_sphere(5, 1000, RngState(0))
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-12)
    x = ufa.sample_sphere(2, 50_000, RngState(1))
    counts = np.histogram(np.arctan2(x[:, 1], x[:, 0]), bins=16, range=(-np.pi, np.pi))[0]
    assert sps.chisquare(counts).pvalue > 0.01
    assert np.linalg.norm(x.mean(0)) < 0.02


def test_split_counts():
    assert ufa.split_counts(64) == (22, 21, 21)
    assert ufa.split_counts(3) == (1, 1, 1)
    assert ufa.split_counts(10, (0, 0.5, 0.5)) == (0, 5, 5)


@given(st.integers(0, 500), st.tuples(*[st.floats(0, 1)] * 3).filter(lambda t: sum(t) > 0.01))
def test_split_counts_total(n, split):
    counts = ufa.split_counts(n, split)
    assert sum(counts) == n
    assert all(c == 0 for c, w in zip(counts, split) if w == 0)


def test_propose_ood_tags_and_shapes():
    s = stats_with([[0.0] * 4, [1.0] * 4, [2.0] * 4])
    batch = ufa.propose_ood(s, RngState(0))
    assert batch.counts() == (22, 21, 21)
    assert batch.z.shape == (64, 4)
    np.testing.assert_allclose(np.linalg.norm(batch.z[batch.tags == 2], axis=1), 1.0)


def clf(W, gamma=10.0, **kw):
    return ufa.CosineClassifier(np.asarray(W, dtype=float), math.log(gamma), **kw)


def test_cosine_logits():
    W = np.array([[3.0, 0.0], [0.0, 1.0]])
    g, deg = ufa.logits(clf(W), W[0] / 3)
    assert g[0] == pytest.approx(10.0) and g[1] == pytest.approx(0.0, abs=1e-12) and not deg
    z = np.array([0.3, -0.7])
    np.testing.assert_allclose(ufa.logits(clf(W), 4.2 * z)[0], ufa.logits(clf(W), z)[0])
    g, deg = ufa.logits(clf(W), np.zeros(2))
    assert deg and g.tolist() == [0.0, 0.0]


def test_energy_examples():
    c = clf(np.eye(3), gamma=1e-300)  # all logits essentially 0
    assert ufa.energy(c, np.ones(3)) == pytest.approx(-math.log(3))
    c1 = clf([[1.0, 0.0]], gamma=5.0)
    assert ufa.energy(c1, np.array([1.0, 0.0])) == pytest.approx(-5.0)


@settings(max_examples=30)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.integers(0, 5), st.floats(0.01, 2))
def test_energy_decreases_with_any_logit(g, j, bump):
    j %= len(g)
    g = np.array(g)
    g2 = g.copy()
    g2[j] += bump
    from opengcd.core_math import logsumexp
    assert -logsumexp(g2) < -logsumexp(g)


def test_oe_loss_examples():
    c = clf([[1.0, 0.0]], gamma=3.0, margin=5.0)  # single class: E = -g
    assert ufa.loss_oe(c, np.array([[-1.0, 0.0]])) == pytest.approx(2.0)  # E = 3
    assert ufa.loss_oe(c, np.array([[-1.0, 0.0]]) * 2) == pytest.approx(2.0)
    c = clf([[1.0, 0.0]], gamma=3.0, margin=-4.0)
    assert ufa.loss_oe(c, np.array([[1.0, 0.0], [-1.0, 0.0]])) == 0.0
    with pytest.raises(ContractError):
        ufa.loss_oe(c, np.empty((0, 2)))


def test_entropy_loss_examples():
    c = clf(np.eye(4), gamma=1e-300)
    assert ufa.loss_ent(c, np.ones((3, 4))) == pytest.approx(math.log(4), abs=1e-10)
    c = clf(np.eye(2), gamma=1e4)
    assert ufa.loss_ent(c, np.array([[1.0, 0.0]])) < 1e-10
    c = clf([[1.0, 0.0], [0.0, 1.0]], gamma=1.0)
    p = np.array([1 / (1 + math.exp(-1)), 1 / (1 + math.exp(1))])
    assert ufa.loss_ent(c, np.array([[1.0, 0.0]])) == pytest.approx(-(p * np.log(p)).sum(), abs=1e-12)
    # direct evaluation of H([0.7311, 0.2689]) gives 0.5822
    assert ufa.loss_ent(c, np.array([[1.0, 0.0]])) == pytest.approx(sps.entropy(p), abs=1e-12)
    assert ufa.loss_ent(c, np.array([[1.0, 0.0]])) == pytest.approx(0.5822, abs=1e-4)


def test_loss_ufa_combination():
    assert ufa.loss_ufa(2.0, math.log(2), 0.0, 0.0) == 0.0
    assert ufa.loss_ufa(2.0, math.log(2)) == pytest.approx(1 - 0.5 * math.log(2), abs=1e-12)
    assert ufa.loss_ufa(2.0, math.log(2)) == pytest.approx(0.6534, abs=1e-4)
    with pytest.raises(ParameterError):
        ufa.loss_ufa(1.0, 1.0, -1.0)


@settings(max_examples=25)
@given(st.integers(0, 1000))
def test_entropy_scores_bounded(seed):
    rng = RngState(seed)
    c = ufa.CosineClassifier.init(rng, 5, 4, gamma=float(rng.uniform() * 30 + 0.1))
    h = ufa.entropy_scores(c, rng.normal((8, 4)))
    assert np.all(h >= -1e-12) and np.all(h <= math.log(5) + 1e-12)
