"""Part discovery over precomputed ViT patch features.

Four stages turn a :class:`PatchFeatureSet` into a fused embedding:

1. attention priors: per head, masked mean of the top ``ceil(rho * N)`` patches
   by CLS attention;
2. query conditioning: learnable part prototypes attend to those priors;
3. routing: Gumbel-softmax over patch/query cosine similarities with a
   straight-through hard assignment;
4. fusion: part means are averaged and added to the CLS token in the space of
   a small projection head, then L2-normalised.

The numpy-facing functions below evaluate the same graph code used in
training (see :func:`embed`), with constant inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .core_math import ContractError, ParameterError, RngState, sample_gumbel

DELTA = 1e-6


@dataclass
class PatchFeatureSet:
    """Patch embeddings (N, D), CLS embedding (D,), CLS->patch attention (H, N)."""

    F_patch: np.ndarray
    f_cls: np.ndarray
    A_cls: np.ndarray
    part_labels: np.ndarray | None = None  # ground truth, synthetic data only

    def __post_init__(self):
        self.F_patch = np.asarray(self.F_patch, dtype=np.float64)
        self.f_cls = np.asarray(self.f_cls, dtype=np.float64)
        A = np.atleast_2d(np.asarray(self.A_cls, dtype=np.float64))
        if self.F_patch.ndim != 2 or self.F_patch.shape[0] < 1 or self.F_patch.shape[1] < 1:
            raise ContractError(f"F_patch must be N x D with N, D >= 1, got {self.F_patch.shape}")
        if self.f_cls.shape != (self.F_patch.shape[1],):
            raise ContractError("f_cls dimension does not match patch dimension")
        if A.shape[1] != self.F_patch.shape[0]:
            raise ContractError("attention rows must have one entry per patch")
        if np.any(A < 0):
            raise ContractError("attention weights must be non-negative")
        self.A_cls = A / A.sum(axis=1, keepdims=True)

    @property
    def n_patches(self):
        return self.F_patch.shape[0]


@dataclass
class CrossAttention:
    """Projection weights for multi-head cross-attention, each (D, D)."""

    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    n_heads: int = 4

    @classmethod
    def init(cls, rng: RngState, dim: int, n_heads: int = 4):
        s = 1.0 / math.sqrt(dim)
        return cls(*(rng.normal((dim, dim)) * s for _ in range(4)), n_heads=n_heads)


@dataclass
class FusionHead:
    """Two-layer projection head: affine -> ReLU -> affine."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, rng: RngState, dim: int, hidden: int = 256, out: int = 128):
        return cls(rng.normal((dim, hidden)) * math.sqrt(2.0 / dim), np.zeros(hidden),
                   rng.normal((hidden, out)) / math.sqrt(hidden), np.zeros(out))

    @classmethod
    def identity(cls, dim: int):
        """Head that maps non-negative inputs to themselves (test helper)."""
        return cls(np.eye(dim), np.zeros(dim), np.eye(dim), np.zeros(dim))

    def __call__(self, x):
        return project(*(ag.const(w) for w in (self.W1, self.b1, self.W2, self.b2)), ag.const(x)).value


def top_fraction_count(rho: float, n: int) -> int:
    if not 0 < rho <= 1:
        raise ParameterError(f"rho must lie in (0, 1], got {rho}")
    # guard against 0.3 * 10 = 3.0000000000000004
    return max(1, min(n, math.ceil(rho * n - 1e-9)))


def attention_mask(A_cls, rho: float):
    """Binary (..., H, N) mask of the top ``ceil(rho N)`` patches per head."""
    A = np.asarray(A_cls, dtype=np.float64)
    k = top_fraction_count(rho, A.shape[-1])
    order = np.argsort(-A, axis=-1, kind="stable")  # stable: lower index wins ties
    mask = np.zeros_like(A)
    np.put_along_axis(mask, order[..., :k], 1.0, axis=-1)
    return mask


def attention_priors(pfs, rho: float = 0.30):
    """Per-head masked mean of salient patches, (H, D).

    Also accepts batched arrays ``(F_patch (B,N,D), A_cls (B,H,N))``.
    """
    if isinstance(pfs, PatchFeatureSet):
        F, A = pfs.F_patch, pfs.A_cls
    else:
        F, A = (np.asarray(x, dtype=np.float64) for x in pfs)
    M = attention_mask(A, rho)
    return (M @ F) / (M.sum(axis=-1, keepdims=True) + DELTA)


# -- graph building blocks ---------------------------------------------------

def cross_attention(Q, F_prior, Wq, Wk, Wv, Wo, n_heads):
    """Q_I = Q + MHA(Q, F_prior, F_prior).

    Q is (T, D); F_prior is (..., H, D); output is (..., T, D).
    """
    T, D = Q.shape
    if D % n_heads:
        raise ContractError(f"{n_heads} heads do not divide dimension {D}")
    F_prior = ag.const(F_prior)
    if F_prior.shape[-1] != D or Wq.shape != (D, D):
        raise ContractError("cross-attention dimension mismatch")
    lead = F_prior.shape[:-2]
    Hp = F_prior.shape[-2]
    dh = D // n_heads
    q = ag.transpose(ag.reshape(ag.matmul(Q, Wq), (T, n_heads, dh)), (1, 0, 2))  # (nh, T, dh)
    k = ag.matmul(F_prior, Wk)
    v = ag.matmul(F_prior, Wv)
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    k = ag.transpose(ag.reshape(k, lead + (Hp, n_heads, dh)), perm)  # (..., nh, Hp, dh)
    v = ag.transpose(ag.reshape(v, lead + (Hp, n_heads, dh)), perm)
    scores = ag.matmul(q, ag.transpose(k)) * (1.0 / math.sqrt(dh))  # (..., nh, T, Hp)
    attn = ag.softmax(scores, axis=-1)
    out = ag.matmul(attn, v)  # (..., nh, T, dh)
    out = ag.reshape(ag.transpose(out, perm), lead + (T, D))
    return ag.add(Q, ag.matmul(out, Wo))


def route(F_patch, Q_I, tau, noise=None, hard=True):
    """Similarity, soft and (straight-through) assignment as graph nodes."""
    Fn = ag.const(_normalize_rows(np.asarray(F_patch, dtype=np.float64)))
    S = ag.matmul(Fn, ag.transpose(ag.l2_normalize(Q_I)))
    logits = S if noise is None else ag.add(S, noise)
    H_soft = ag.softmax(logits, tau=tau)
    H = ag.straight_through(H_soft) if hard else H_soft
    return S, H_soft, H


def aggregate(F_patch, H):
    """Part means (..., T, D), part mass (..., T) and their average (..., D)."""
    num = ag.matmul(ag.transpose(H), ag.const(F_patch))
    mass = ag.sum(H, axis=-2)
    P = ag.div(num, ag.add(ag.reshape(mass, mass.shape + (1,)), DELTA))
    return P, mass, ag.mean(P, axis=-2)


def project(W1, b1, W2, b2, x):
    """h(x) = relu(x W1 + b1) W2 + b2 over the last axis."""
    flat = x.value.ndim == 1
    if flat:
        x = ag.reshape(x, (1,) + x.shape)
    out = ag.add(ag.matmul(ag.relu(ag.add(ag.matmul(x, W1), b1)), W2), b2)
    return ag.reshape(out, out.shape[1:]) if flat else out


def embed(params, F_patch, f_cls, F_prior, tau, noise=None, hard=True, n_heads=4):
    """Batched forward to the fused unit embedding.

    ``params`` maps names (Q, Wq, Wk, Wv, Wo, W1, b1, W2, b2) to graph vars.
    Returns ``(z, extras)`` where ``extras`` holds S, H_soft, H and P.
    """
    p = params
    Q_I = cross_attention(p["Q"], F_prior, p["Wq"], p["Wk"], p["Wv"], p["Wo"], n_heads)
    S, H_soft, H = route(F_patch, Q_I, tau, noise, hard)
    P, mass, f_part = aggregate(F_patch, H)
    head = (p["W1"], p["b1"], p["W2"], p["b2"])
    fused = ag.add(project(*head, ag.const(f_cls)), project(*head, f_part))
    z = ag.l2_normalize(fused)
    return z, {"Q_I": Q_I, "S": S, "H_soft": H_soft, "H": H, "P": P, "mass": mass}


def _normalize_rows(x, eps=1e-12):
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)


# -- numpy-facing operations ---------------------------------------------------

def condition_queries(Q, F_prior, attn: CrossAttention):
    Q = np.asarray(Q, dtype=np.float64)
    F_prior = np.atleast_2d(np.asarray(F_prior, dtype=np.float64))
    if Q.ndim != 2 or Q.shape[1] != F_prior.shape[-1]:
        raise ContractError(f"query shape {Q.shape} does not match prior shape {F_prior.shape}")
    W = [ag.const(w) for w in (attn.Wq, attn.Wk, attn.Wv, attn.Wo)]
    return cross_attention(ag.const(Q), F_prior, *W, attn.n_heads).value


def assign_patches(F_patch, Q_I, tau: float, rng: RngState | None = None, mode: str = "stochastic"):
    """Returns ``(S, H_soft, H_hard)``; deterministic mode uses zero noise."""
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    F_patch = np.asarray(F_patch, dtype=np.float64)
    Q_I = np.asarray(Q_I, dtype=np.float64)
    if F_patch.shape[-1] != Q_I.shape[-1]:
        raise ContractError("patch and query dimensions differ")
    noise = None
    if mode == "stochastic":
        if rng is None:
            raise ContractError("stochastic routing needs an rng")
        noise = sample_gumbel(rng, F_patch.shape[:-1] + (Q_I.shape[-2],))
    elif mode != "deterministic":
        raise ParameterError(f"unknown routing mode {mode!r}")
    S, H_soft, H = route(F_patch, ag.const(Q_I), tau, noise, hard=True)
    return S.value, H_soft.value, H.value


def aggregate_parts(F_patch, H):
    """Returns ``(P, mass, f_part)``; parts with mass below delta are zero."""
    H = np.asarray(H, dtype=np.float64)
    P, mass, _ = aggregate(np.asarray(F_patch, dtype=np.float64), ag.const(H))
    P, mass = P.value.copy(), mass.value
    P[mass < DELTA] = 0.0
    return P, mass, P.mean(axis=-2)


def fuse(f_cls, f_part, head: FusionHead):
    """Returns ``(z, degenerate)``; a zero fused vector maps to e_1."""
    v = head(np.asarray(f_cls, dtype=np.float64)) + head(np.asarray(f_part, dtype=np.float64))
    v = v.reshape(-1)
    n = np.linalg.norm(v)
    if n < 1e-12:
        e = np.zeros_like(v)
        e[0] = 1.0
        return e, True
    return v / n, False


def _entropy(q):
    q = q[q > 0]
    return float(-(q * np.log(q)).sum())


def parts_usage_entropy(routings) -> float:
    """Entropy of pooled hard patch-to-part counts over a batch of (N, T) one-hots."""
    routings = [np.asarray(h) for h in routings]
    if not routings:
        raise ContractError("parts_usage_entropy needs at least one routing")
    counts = np.sum([h.reshape(-1, h.shape[-1]).sum(axis=0) for h in routings], axis=0)
    return _entropy(counts / counts.sum())


def soft_allocation_entropy(soft_routings) -> float:
    """Entropy of pooled soft allocation mass (same pooling as PUE)."""
    return parts_usage_entropy(soft_routings)


def attention_kl(a, b, eps: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"attention maps differ in shape: {a.shape} vs {b.shape}")
    a = np.maximum(a, eps)
    b = np.maximum(b, eps)
    a, b = a / a.sum(), b / b.sum()
    return float(np.sum(a * np.log(a / b)))


def fit_routing(sets, n_parts: int, rng: RngState, iters: int = 50, restarts: int = 5):
    """Routing-only fit: spherical k-means on pooled patches gives part queries.

    Returns the (T, D) query matrix with the lowest total cosine distortion.
    """
    X = _normalize_rows(np.concatenate([s.F_patch for s in sets]))
    best, best_cost = None, np.inf
    for _ in range(restarts):
        Q = _kmeanspp_cosine(X, n_parts, rng)
        for _ in range(iters):
            lab = np.argmax(X @ Q.T, axis=1)
            newQ = Q.copy()
            for t in range(n_parts):
                if np.any(lab == t):
                    newQ[t] = X[lab == t].sum(axis=0)
            newQ = _normalize_rows(newQ)
            if np.allclose(newQ, Q):
                break
            Q = newQ
        cost = float(np.sum(1.0 - np.max(X @ Q.T, axis=1)))
        if cost < best_cost - 1e-12:
            best, best_cost = Q, cost
    return best


def _kmeanspp_cosine(X, k, rng):
    centers = [X[rng.integers(0, len(X))]]
    for _ in range(1, k):
        d = np.clip(1.0 - np.max(X @ np.array(centers).T, axis=1), 0.0, None)
        if d.sum() <= 0:
            centers.append(X[rng.integers(0, len(X))])
            continue
        centers.append(X[rng.choice(len(X), 1, p=d / d.sum())[0]])
    return np.array(centers)
