"""Feature-space outlier synthesis and open-set calibration losses.

Known-class Gaussians are tracked with exponential moving averages; three
samplers draw synthetic outliers from them (inflated class tails, noisy convex
mixtures of class means, uniform directions on the sphere).  A cosine
classifier is then pushed to assign those outliers high free energy and high
predictive entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .core_math import (RIDGE, ContractError, ParameterError, RngState, cholesky,
                        sample_dirichlet, sample_gaussian)

TAGS = ("tail", "mix", "sphere")


class UninitializedClassError(KeyError):
    pass


@dataclass
class ClassStats:
    """EMA mean/covariance per known class."""

    known: tuple
    dim: int
    alpha1: float = 0.9
    alpha2: float = 0.9
    ridge: float = RIDGE
    mu: dict = field(default_factory=dict)
    sigma: dict = field(default_factory=dict)

    def __post_init__(self):
        self.known = tuple(int(y) for y in self.known)

    def initialized(self, y) -> bool:
        return int(y) in self.mu

    @property
    def initialized_classes(self):
        return [y for y in self.known if y in self.mu]

    def copy(self):
        return ClassStats(self.known, self.dim, self.alpha1, self.alpha2, self.ridge,
                          {k: v.copy() for k, v in self.mu.items()},
                          {k: v.copy() for k, v in self.sigma.items()})

    def factor(self, y, beta: float = 1.0):
        if not self.initialized(y):
            raise UninitializedClassError(f"class {y} has no statistics yet")
        return cholesky(beta * self.sigma[int(y)], self.ridge, class_id=int(y))


def ema_update(stats: ClassStats, z, labels) -> ClassStats:
    """In-place EMA update from a labelled batch; returns ``stats``.

    Classes seen for the first time adopt the batch statistics directly.
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    unknown = set(np.unique(labels).tolist()) - set(stats.known)
    if unknown:
        raise ContractError(f"labels {sorted(unknown)} are not known classes")
    for y in np.unique(labels):
        y = int(y)
        zy = z[labels == y]
        mean = zy.mean(axis=0)
        centered = zy - mean
        cov = centered.T @ centered / max(len(zy) - 1, 1)
        if y not in stats.mu:
            stats.mu[y], stats.sigma[y] = mean, cov
            continue
        stats.mu[y] = stats.alpha1 * stats.mu[y] + (1 - stats.alpha1) * mean
        s = stats.alpha2 * stats.sigma[y] + (1 - stats.alpha2) * cov
        stats.sigma[y] = 0.5 * (s + s.T)
    return stats


def sample_tail(stats: ClassStats, y, beta: float, n: int, rng: RngState):
    """Draws from N(mu_y, beta * Sigma_y + ridge I)."""
    if beta < 1:
        raise ParameterError(f"beta must be >= 1, got {beta}")
    L = stats.factor(y, beta)
    return sample_gaussian(rng, stats.mu[int(y)], L, n)


def sample_mix(stats: ClassStats, k: int, sigma: float, n: int, rng: RngState):
    """Noisy Dirichlet(1_k) mixtures of k distinct class means.

    Returns ``(samples, weights, classes)`` so callers can check convexity.
    """
    ready = stats.initialized_classes
    if k < 1:
        raise ParameterError("k must be >= 1")
    if len(ready) < k:
        raise ContractError(f"need {k} initialised classes, have {len(ready)}")
    out = np.empty((n, stats.dim))
    weights = np.empty((n, k))
    classes = np.empty((n, k), dtype=int)
    for i in range(n):
        pick = rng.choice(len(ready), k, replace=False)
        w = sample_dirichlet(rng, k)
        means = np.stack([stats.mu[ready[j]] for j in pick])
        out[i] = w @ means + sigma * rng.normal(stats.dim)
        weights[i], classes[i] = w, [ready[j] for j in pick]
    return out, weights, classes


def sample_sphere(d: int, n: int, rng: RngState):
    if d < 1:
        raise ParameterError("d must be >= 1")
    v = rng.normal((n, d))
    norms = np.linalg.norm(v, axis=1)
    for i in np.flatnonzero(norms < 1e-12):
        while norms[i] < 1e-12:
            v[i] = rng.normal(d)
            norms[i] = np.linalg.norm(v[i])
    return v / norms[:, None]


@dataclass
class OODBatch:
    z: np.ndarray
    tags: np.ndarray  # index into TAGS

    def counts(self):
        return tuple(int(np.sum(self.tags == i)) for i in range(len(TAGS)))

    def __len__(self):
        return len(self.z)


def split_counts(n_total: int, split=(1 / 3, 1 / 3, 1 / 3)):
    """Per-sampler counts; rounding remainder goes to the first active sampler (tail)."""
    split = np.asarray(split, dtype=np.float64)
    split = split / split.sum()
    counts = np.floor(n_total * split + 1e-9).astype(int)
    active = np.flatnonzero(split > 0)
    counts[active[0]] += n_total - counts.sum()
    return tuple(int(c) for c in counts)


def propose_ood(stats: ClassStats, rng: RngState, n_total: int = 64, split=(1 / 3, 1 / 3, 1 / 3),
                beta: float = 2.0, k: int = 2, sigma: float = 0.1) -> OODBatch:
    n_tail, n_mix, n_sphere = split_counts(n_total, split)
    parts, tags = [], []
    if n_tail:
        ready = stats.initialized_classes
        if not ready:
            raise ContractError("tail sampling needs at least one initialised class")
        which = rng.choice(len(ready), n_tail, replace=True)
        tail = np.empty((n_tail, stats.dim))
        for j in np.unique(which):
            idx = np.flatnonzero(which == j)
            tail[idx] = sample_tail(stats, ready[j], beta, len(idx), rng)
        parts.append(tail)
        tags.append(np.zeros(n_tail, dtype=int))
    if n_mix:
        parts.append(sample_mix(stats, k, sigma, n_mix, rng)[0])
        tags.append(np.ones(n_mix, dtype=int))
    if n_sphere:
        parts.append(sample_sphere(stats.dim, n_sphere, rng))
        tags.append(np.full(n_sphere, 2))
    if not parts:
        return OODBatch(np.empty((0, stats.dim)), np.empty(0, dtype=int))
    return OODBatch(np.concatenate(parts), np.concatenate(tags))


@dataclass
class CosineClassifier:
    """g_y(z) = gamma * cos(w_y, z), with gamma = exp(log_gamma)."""

    W: np.ndarray
    log_gamma: float = math.log(10.0)
    tau_temp: float = 1.0
    margin: float = 5.0

    @property
    def gamma(self):
        return math.exp(self.log_gamma)

    @classmethod
    def init(cls, rng: RngState, n_classes: int, dim: int, gamma: float = 10.0, **kw):
        return cls(rng.normal((n_classes, dim)) / math.sqrt(dim), math.log(gamma), **kw)


# -- graph versions (used by the training objective) --------------------------

def logits_graph(W, log_gamma, z):
    """gamma * cos(W_y, z) for a (B, Dz) batch of z."""
    cos = ag.matmul(ag.l2_normalize(z), ag.transpose(ag.l2_normalize(W)))
    return ag.mul(ag.exp(log_gamma), cos)


def energy_graph(logits, tau_temp):
    return ag.neg(ag.logsumexp(logits, tau=tau_temp))


def loss_oe_graph(logits, tau_temp, margin):
    return ag.mean(ag.hinge(energy_graph(logits, tau_temp), margin))


def loss_ent_graph(logits, tau_temp):
    return ag.mean(ag.entropy(ag.softmax(logits, tau=tau_temp)))


# -- numpy-facing operations --------------------------------------------------

def _clf_vars(clf):
    return ag.const(clf.W), ag.const(np.array(clf.log_gamma))


def logits(clf: CosineClassifier, z):
    """Returns ``(logits, degenerate)``; a zero input yields all-zero logits."""
    z = np.asarray(z, dtype=np.float64)
    flat = z.ndim == 1
    Z = np.atleast_2d(z)
    degenerate = np.linalg.norm(Z, axis=1) < 1e-12
    out = logits_graph(*_clf_vars(clf), ag.const(Z)).value.copy()
    out[degenerate] = 0.0
    return (out[0], bool(degenerate[0])) if flat else (out, degenerate)


def energy(clf: CosineClassifier, z):
    g, _ = logits(clf, z)
    return -ag.logsumexp(ag.const(np.atleast_2d(g)), tau=clf.tau_temp).value.reshape(np.shape(g)[:-1])


def _ood_z(ood):
    z = ood.z if isinstance(ood, OODBatch) else np.asarray(ood, dtype=np.float64)
    if len(z) == 0:
        raise ContractError("empty OOD batch")
    return np.atleast_2d(z)


def loss_oe(clf: CosineClassifier, ood) -> float:
    E = energy(clf, _ood_z(ood))
    return float(np.mean(np.maximum(0.0, clf.margin - E)))


def loss_ent(clf: CosineClassifier, ood) -> float:
    g, _ = logits(clf, _ood_z(ood))
    return float(loss_ent_graph(ag.const(g), clf.tau_temp).value)


def loss_ufa(l_oe: float, l_ent: float, lambda_oe: float = 0.5, lambda_ent: float = 0.5) -> float:
    if lambda_oe < 0 or lambda_ent < 0:
        raise ParameterError("loss weights must be non-negative")
    return lambda_oe * l_oe - lambda_ent * l_ent


def entropy_scores(clf: CosineClassifier, z):
    g, _ = logits(clf, np.atleast_2d(z))
    return ag.entropy(ag.softmax(ag.const(g), tau=clf.tau_temp)).value


def density_coverage(stats: ClassStats, ood: OODBatch, quantile: float = 0.01):
    """Fraction of OOD samples whose best class log-density is below the given
    quantile of in-class log-densities (diagnostic only)."""
    from scipy.stats import multivariate_normal

    ys = stats.initialized_classes
    dists = {y: multivariate_normal(stats.mu[y], stats.sigma[y] + stats.ridge * np.eye(stats.dim),
                                    allow_singular=True) for y in ys}
    ref = np.concatenate([dists[y].logpdf(dists[y].rvs(200, random_state=0)) for y in ys])
    thresh = np.quantile(ref, quantile)
    best = np.max(np.stack([dists[y].logpdf(ood.z) for y in ys]), axis=0)
    return float(np.mean(best < thresh))
