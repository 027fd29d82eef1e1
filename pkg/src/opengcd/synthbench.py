"""Seeded synthetic discovery tasks in embedding space.

A task is a Gaussian mixture whose class means sit on a sphere.  The first
half of the classes is labelled in the source split; the target split holds
all classes after a rotation + translation + noise shift.  Each embedding can
be expanded into a structured :class:`~opengcd.dcpd.PatchFeatureSet` whose
patches are noisy copies of a few latent part vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError, SynthConfig
from .core_math import RngState
from .dcpd import PatchFeatureSet
from .evalkit import margin_stats
from .objectives import FeatureData


@dataclass
class ShiftSpec:
    rotation: np.ndarray
    translation: np.ndarray
    noise_std: float = 0.0
    class_jitter: float = 0.0

    @classmethod
    def identity(cls, d):
        return cls(np.eye(d), np.zeros(d))

    @classmethod
    def random(cls, d, rng: RngState, angle=None, translation=0.0, noise_std=0.0, class_jitter=0.0):
        """Orthogonal basis from a QR of a Gaussian matrix.

        With ``angle`` set, every coordinate plane of that basis is rotated by
        ``angle``; otherwise the basis itself is the rotation.
        """
        U, r = np.linalg.qr(rng.normal((d, d)))
        U = U * np.sign(np.diag(r))
        if angle is None:
            R = U
        else:
            block = np.eye(d)
            c, s = np.cos(angle), np.sin(angle)
            for i in range(0, d - 1, 2):
                block[i:i + 2, i:i + 2] = [[c, -s], [s, c]]
            R = U @ block @ U.T
        t = rng.normal(d)
        t = translation * t / max(np.linalg.norm(t), 1e-12)
        return cls(R, t, noise_std, class_jitter)


@dataclass
class SynthTask:
    config: SynthConfig
    seed: int
    means: np.ndarray  # (C, d)
    sigmas: np.ndarray  # (C,)
    known: tuple
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray
    shift: ShiftSpec
    delta_inter: float
    sigma2_intra: float

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_classes(self):
        return len(self.means)

    @property
    def novel(self):
        return tuple(c for c in range(self.n_classes) if c not in self.known)


def place_means(n: int, d: int, radius: float, rng: RngState, iters: int = 200):
    """Approximately uniform points on a sphere via Coulomb-style repulsion."""
    X = rng.normal((n, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    for it in range(iters):
        diff = X[:, None, :] - X[None, :, :]
        dist = np.linalg.norm(diff, axis=-1) + np.eye(n)
        force = (diff / dist[..., None] ** 3).sum(1)
        force -= (force * X).sum(1, keepdims=True) * X  # tangent component
        X = X + 0.05 / (1 + it) ** 0.5 * force / max(np.abs(force).max(), 1e-12)
        X /= np.linalg.norm(X, axis=1, keepdims=True)
    return radius * X


def _draw(means, sigmas, per_class, classes, rng):
    d = means.shape[1]
    xs, ys = [], []
    for c in classes:
        xs.append(means[c] + sigmas[c] * rng.normal((per_class, d)))
        ys.append(np.full(per_class, c))
    return np.concatenate(xs), np.concatenate(ys)


def generate(cfg: SynthConfig | None = None, rng: RngState | int = 0) -> SynthTask:
    cfg = cfg or SynthConfig()
    cfg.validate()
    seed = rng if isinstance(rng, int) else rng.seed
    rng = RngState(rng) if isinstance(rng, int) else rng
    C, d = cfg.n_classes, cfg.dim
    means = place_means(C, d, cfg.radius, rng, cfg.repulsion_iters)
    sigma = cfg.class_sigma
    if cfg.margin_ratio is not None:
        cd = np.linalg.norm(means[:, None] - means[None], axis=-1) + np.diag(np.full(C, np.inf))
        delta = cd.min()
        if not np.isfinite(delta) or delta <= 0:
            raise ConfigError("cannot meet a margin request with coincident class means")
        sigma = float(np.sqrt(cfg.margin_ratio * delta / d))
    sigmas = np.full(C, sigma)
    known = tuple(range(C // 2))
    sx, sy = _draw(means, sigmas, cfg.per_class, known, rng)
    tx, ty = _draw(means, sigmas, cfg.target_per_class, range(C), rng)
    delta_inter, s2 = margin_stats(np.concatenate([sx, tx]), np.concatenate([sy, ty]))
    shift = ShiftSpec.random(d, rng, cfg.shift_angle, cfg.shift_translation, cfg.shift_noise, cfg.shift_jitter)
    tx = apply_shift(tx, ty, shift, rng)
    return SynthTask(cfg, seed, means, sigmas, known, sx, sy, tx, ty, shift, delta_inter, s2)


def apply_shift(X, labels, shift: ShiftSpec, rng: RngState):
    """x -> R x + t + eps, plus an optional per-class random offset."""
    X = np.asarray(X, dtype=np.float64)
    if shift.rotation.shape != (X.shape[1], X.shape[1]):
        raise ValueError("shift dimension does not match samples")
    out = X @ shift.rotation.T + shift.translation
    if shift.class_jitter > 0:
        labels = np.asarray(labels)
        for c in np.unique(labels):
            out[labels == c] += shift.class_jitter * rng.normal(X.shape[1])
    if shift.noise_std > 0:
        out = out + shift.noise_std * rng.normal(X.shape)
    return out


@dataclass
class PartWorld:
    """Shared latent part geometry: templates plus per-part views of the sample."""

    templates: np.ndarray  # (T_true, D)
    views: np.ndarray  # (T_true, D, d)
    informative: np.ndarray  # (T_true,) bool

    @classmethod
    def create(cls, d, n_parts, n_informative, rng: RngState, scale=2.0):
        templates = rng.normal((n_parts, d))
        templates = scale * templates / np.linalg.norm(templates, axis=1, keepdims=True)
        views = np.stack([np.linalg.qr(rng.normal((d, d)))[0] for _ in range(n_parts)])
        informative = np.arange(n_parts) < n_informative
        return cls(templates, views, informative)

    def part_vectors(self, x):
        v = self.templates.copy()
        v[self.informative] += np.einsum("tij,j->ti", self.views[self.informative], x)
        return v


def patch_feature_synthesizer(x, world: PartWorld, rng: RngState, n_patches=24, n_heads=4,
                              noise=0.3, rho=0.30, sharpness=4.0) -> PatchFeatureSet:
    """One image: patches are latent part vectors plus noise; each head's
    attention favours one informative part."""
    T = len(world.templates)
    if n_patches < T:
        raise ValueError("need at least one patch per latent part")
    parts = np.concatenate([np.arange(T), rng.integers(0, T, n_patches - T)])
    parts = parts[rng.permutation(n_patches)]
    F = world.part_vectors(np.asarray(x, dtype=np.float64))[parts]
    if noise > 0:
        F = F + noise * rng.normal(F.shape)
    inf_parts = np.flatnonzero(world.informative)
    logits = 0.5 * rng.normal((n_heads, n_patches))
    for h in range(n_heads):
        logits[h, parts == inf_parts[h % len(inf_parts)]] += sharpness
        logits[h, np.isin(parts, inf_parts)] += sharpness / 2
    A = np.exp(logits)
    A /= A.sum(axis=1, keepdims=True)
    f_cls = np.asarray(x, dtype=np.float64).copy()
    return PatchFeatureSet(F, f_cls, A, part_labels=parts)


def to_feature_data(X, labels, world: PartWorld, rng: RngState, cfg: SynthConfig, classes=()):
    sets = [patch_feature_synthesizer(x, world, rng, cfg.n_patches, cfg.n_attn_heads, cfg.patch_noise)
            for x in X]
    return FeatureData(np.stack([s.F_patch for s in sets]), np.stack([s.f_cls for s in sets]),
                       np.stack([s.A_cls for s in sets]), np.asarray(labels), tuple(classes))


def build_datasets(task: SynthTask, rng: RngState | None = None):
    """Patch-level source (known classes) and target (all classes) datasets."""
    cfg = task.config
    rng = rng or RngState(task.seed).spawn(17)
    world = PartWorld.create(task.dim, cfg.n_true_parts, cfg.n_informative, rng, cfg.part_scale)
    source = to_feature_data(task.source_x, task.source_y, world, rng, cfg, task.known)
    target = to_feature_data(task.target_x, task.target_y, world, rng, cfg, tuple(range(task.n_classes)))
    return source, target, world
