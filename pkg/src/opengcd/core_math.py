"""Dense kernels, stable reductions and seeded sampling primitives.

Everything runs in float64.  Randomness goes through :class:`RngState`, a thin
wrapper over numpy's counter-based Philox generator so that a (seed, call
order) pair reproduces the same stream on every platform.
"""

from __future__ import annotations

import numpy as np

RIDGE = 1e-4


class ParameterError(ValueError):
    """A scalar hyperparameter is outside its legal range."""


class ContractError(ValueError):
    """An input violates an operation's precondition."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, class_id, message=""):
        self.class_id = class_id
        super().__init__(f"covariance of class {class_id!r} is not positive definite"
                         + (f": {message}" if message else ""))


class RngState:
    """Seeded Philox stream.

    ``position`` is the generator's internal 256-bit counter (low word), which
    advances with every draw; two states with equal seed and position produce
    identical futures.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.Philox(key=self.seed))

    @property
    def position(self) -> int:
        state = self.generator.bit_generator.state["state"]
        return int(state["counter"][0])

    def spawn(self, tag: int) -> "RngState":
        """Independent child stream derived from (seed, tag)."""
        return RngState((self.seed * 1_000_003 + int(tag) * 7919 + 1) & 0xFFFFFFFFFFFFFFFF)

    # convenience passthroughs used throughout the package
    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, n, size, replace=True, p=None):
        return self.generator.choice(n, size=size, replace=replace, p=p)


def _check_tau(tau):
    if not tau > 0:
        raise ParameterError(f"scale must be positive, got {tau}")


def logsumexp(values, tau: float = 1.0, axis: int = -1):
    """tau * log(sum(exp(v / tau))) with max subtraction."""
    _check_tau(tau)
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ContractError("logsumexp of an empty vector")
    s = v / tau
    m = np.max(s, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = m + np.log(np.sum(np.exp(s - m), axis=axis, keepdims=True))
    return tau * np.squeeze(out, axis=axis)


def softmax(values, tau: float = 1.0, axis: int = -1):
    _check_tau(tau)
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ContractError("softmax of an empty vector")
    s = v / tau
    s = s - np.max(s, axis=axis, keepdims=True)
    e = np.exp(s)
    return e / np.sum(e, axis=axis, keepdims=True)


def cosine_sim(a, b, eps: float = 1e-12):
    """Cosine similarity clamped to [-1, 1].

    Returns ``(value, degenerate)``; a zero-norm input gives ``(0.0, True)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < eps or nb < eps:
        return 0.0, True
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0)), False


def cholesky(sigma, ridge: float = RIDGE, class_id=None):
    """Lower factor of ``sigma + ridge * I``."""
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {s.shape}")
    if not np.allclose(s, s.T, atol=1e-10 * max(1.0, np.abs(s).max(initial=0.0))):
        raise ContractError(f"covariance of class {class_id!r} is not symmetric")
    try:
        return np.linalg.cholesky(s + ridge * np.eye(s.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(class_id, str(exc)) from None


def sample_gaussian(rng: RngState, mu, L, n: int):
    """``n`` draws of ``mu + L v`` with ``v`` standard normal, shape (n, d)."""
    mu = np.asarray(mu, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    d = mu.shape[0]
    if L.shape != (d, d):
        raise ContractError(f"factor shape {L.shape} does not match mean of dim {d}")
    v = rng.normal((n, d))
    return mu + v @ L.T


def sample_dirichlet(rng: RngState, k: int):
    """Dirichlet(1_k) draw via normalized unit exponentials."""
    if k < 1:
        raise ParameterError(f"Dirichlet needs k >= 1, got {k}")
    e = rng.generator.standard_exponential(k)
    return e / e.sum()


def sample_gumbel(rng: RngState, shape):
    tiny = np.finfo(np.float64).tiny
    u = np.clip(rng.uniform(shape), tiny, 1.0 - np.finfo(np.float64).eps)
    return -np.log(-np.log(u))
