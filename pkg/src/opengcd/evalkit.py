"""Clustering and evaluation metrics for category discovery."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata
from sklearn.metrics import silhouette_score

from .core_math import ContractError, ParameterError, RngState
from .ufa import CosineClassifier, entropy_scores  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)


@dataclass
class ClusterReport:
    assignments: np.ndarray
    k_used: int
    inertia: float
    matching: dict
    acc_all: float
    acc_old: float
    acc_new: float
    k_estimated: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["assignments"] = np.asarray(self.assignments).tolist()
        d["matching"] = {str(k): int(v) for k, v in self.matching.items()}
        return d


def _sqdist(X, C):
    return np.maximum((X ** 2).sum(1)[:, None] - 2 * X @ C.T + (C ** 2).sum(1)[None, :], 0.0)


def _kmeanspp(X, K, rng):
    n = len(X)
    centers = [X[rng.integers(0, n)]]
    d2 = _sqdist(X, centers[0][None])[:, 0]
    for _ in range(1, K):
        tot = d2.sum()
        i = rng.integers(0, n) if tot <= 0 else rng.choice(n, 1, p=d2 / tot)[0]
        centers.append(X[i])
        d2 = np.minimum(d2, _sqdist(X, X[i][None])[:, 0])
    return np.array(centers)


def _lloyd(X, C, max_iter, tol=1e-10):
    prev = np.inf
    for _ in range(max_iter):
        D = _sqdist(X, C)
        lab = D.argmin(1)
        inertia = D[np.arange(len(X)), lab].sum()
        assert inertia <= prev + 1e-9 * max(1.0, abs(prev)), "k-means inertia increased"
        C = C.copy()
        for k in range(len(C)):
            members = lab == k
            if members.any():
                C[k] = X[members].mean(0)
        # repair empty clusters by splitting the largest one
        for k in np.flatnonzero(np.bincount(lab, minlength=len(C)) == 0):
            big = np.bincount(lab, minlength=len(C)).argmax()
            members = np.flatnonzero(lab == big)
            far = members[D[members, big].argmax()]
            C[k] = X[far]
            lab[far] = k
        if prev - inertia <= tol * max(1.0, inertia):
            break
        prev = inertia
    D = _sqdist(X, C)
    lab = D.argmin(1)
    return lab, float(D[np.arange(len(X)), lab].sum())


def kmeans(X, K: int, rng: RngState, max_iter: int = 300, restarts: int = 10):
    """k-means++ seeded Lloyd iterations; best of ``restarts`` by inertia.

    Returns ``(assignments, inertia)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if not 1 <= K <= len(X):
        raise ParameterError(f"K={K} must lie in [1, {len(X)}]")
    best = None
    for _ in range(restarts):
        lab, inertia = _lloyd(X, _kmeanspp(X, K, rng), max_iter)
        if best is None or inertia < best[1] - 1e-12:
            best = (lab, inertia)
    return best


def hungarian_acc(pred, truth, old_set):
    """All/Old/New accuracy under one global optimal cluster-to-class matching."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ContractError("pred and truth differ in length")
    if pred.size == 0:
        raise ContractError("empty input")
    acc_all, _, _, mapping = _match(pred, truth)
    hit = np.array([mapping.get(p, None) == t for p, t in zip(pred.tolist(), truth.tolist())])
    old = np.isin(truth, np.asarray(list(old_set)))
    acc_old = float(hit[old].mean()) if old.any() else float("nan")
    acc_new = float(hit[~old].mean()) if (~old).any() else float("nan")
    return acc_all, acc_old, acc_new


def _match(pred, truth):
    p_ids, p_idx = np.unique(pred, return_inverse=True)
    t_ids, t_idx = np.unique(truth, return_inverse=True)
    size = max(len(p_ids), len(t_ids))
    w = np.zeros((size, size), dtype=np.int64)
    np.add.at(w, (p_idx, t_idx), 1)
    rows, cols = linear_sum_assignment(w, maximize=True)
    mapping = {p_ids[r].item(): t_ids[c].item() for r, c in zip(rows, cols)
               if r < len(p_ids) and c < len(t_ids)}
    return float(w[rows, cols].sum() / len(pred)), rows, cols, mapping


def matching(pred, truth):
    return _match(np.asarray(pred), np.asarray(truth))[3]


def estimate_k(X, k_min: int, k_max: int, rng: RngState, method: str = "silhouette",
               labeled=None, restarts: int = 5):
    """Pick K on the grid [k_min, k_max].

    ``method="silhouette"`` maximises mean silhouette of k-means partitions.
    ``method="labeled"`` maximises Hungarian accuracy on a labelled subset,
    passed as ``labeled=(mask, labels)`` over rows of ``X``.
    """
    X = np.asarray(X, dtype=np.float64)
    if k_min < 2 or k_max < k_min or k_max > len(X) - 1:
        raise ParameterError(f"degenerate K grid [{k_min}, {k_max}] for {len(X)} samples")
    best_k, best_score = k_min, -np.inf
    for K in range(k_min, k_max + 1):
        lab, _ = kmeans(X, K, rng, restarts=restarts)
        if method == "silhouette":
            if len(np.unique(lab)) < 2 or np.allclose(X, X[0]):
                continue
            score = silhouette_score(X, lab)
        elif method == "labeled":
            mask, y = labeled
            score = hungarian_acc(lab[mask], np.asarray(y), np.unique(y))[0]
        else:
            raise ParameterError(f"unknown K-estimation method {method!r}")
        if score > best_score + 1e-12:
            best_k, best_score = K, score
    return best_k


def auroc(scores, labels):
    """P(novel score > seen score) + 0.5 P(tie), labels seen=0 / novel=1."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n1 = int((labels == 1).sum())
    n0 = int((labels == 0).sum())
    if n1 == 0 or n0 == 0:
        raise ContractError("AUROC needs both seen and novel samples")
    ranks = rankdata(scores)  # average ranks resolve ties as half-wins
    u = ranks[labels == 1].sum() - n1 * (n1 + 1) / 2
    return float(u / (n0 * n1))


def margin_stats(X, labels, classes=None):
    """Minimum centroid distance and mean squared distance to own centroid.

    Classes listed in ``classes`` without any sample are skipped with a warning.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    present = np.unique(labels)
    if classes is not None:
        missing = sorted(set(np.asarray(classes).tolist()) - set(present.tolist()))
        if missing:
            warnings.warn(f"classes without samples ignored: {missing}")
    if len(present) < 2:
        raise ContractError("margin_stats needs at least two classes")
    # shifted mean: exact when every member of a class is identical
    cents = np.stack([X[labels == c][0] + (X[labels == c] - X[labels == c][0]).mean(0) for c in present])
    d = np.linalg.norm(cents[:, None, :] - cents[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    own = cents[np.searchsorted(present, labels)]
    return float(d.min()), float(((X - own) ** 2).sum(1).mean())


def cluster_and_score(X, truth, old_set, rng: RngState, K=None, estimate=False, k_range=None,
                      restarts: int = 10):
    """K-means on ``X`` followed by the All/Old/New accuracy report."""
    truth = np.asarray(truth)
    k_est = None
    if estimate:
        lo, hi = k_range or (2, min(len(X) - 1, 2 * len(np.unique(truth))))
        k_est = estimate_k(X, lo, hi, rng)
    K = K or k_est or len(np.unique(truth))
    lab, inertia = kmeans(X, K, rng, restarts=restarts)
    a, o, n = hungarian_acc(lab, truth, old_set)
    return ClusterReport(lab, K, inertia, matching(lab, truth), a, o, n, k_est)
