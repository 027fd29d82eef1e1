"""Central finite-difference check of every parameter gradient of the total loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import objectives as obj
from . import ufa
from .config import RunConfig
from .core_math import RngState

# Relative error is |a - n| / max(|a|, |n|, FLOOR).  Below the floor the test is
# effectively absolute (1e-9 at tol 1e-4), still above the ~1e-10 round-off of
# a central difference with step 1e-5 on these losses.
FLOOR = 1e-5


@dataclass
class CheckResult:
    seed: int
    max_rel_error: float
    worst_param: str
    n_params: int


def tiny_problem(seed: int, n_patches=6, n_parts=3, dim=8, embed=8, n_known=4, batch=8, heads=2):
    """Random tiny model, batch and frozen randomness for a loss evaluation."""
    rng = RngState(seed)
    cfg = RunConfig(n_parts=n_parts, attn_heads=2, hidden_dim=8, embed_dim=embed, n_ood=12,
                    margin=1.0, tau=0.7, seed=seed)
    params = obj.Parameters.from_config(rng, dim, n_known, cfg)
    params.Q = params.Q + 0.1 * rng.normal(params.Q.shape)
    labels = np.arange(batch) % n_known
    data = obj.FeatureData(rng.normal((batch, n_patches, dim)), rng.normal((batch, dim)),
                           rng.uniform((batch, heads, n_patches)) + 0.05, labels, tuple(range(n_known)))
    inputs = obj.draw_step_inputs(data.F_patch, data.f_cls, n_parts, rng, cfg)
    stats = ufa.ClassStats(data.classes, embed, ridge=cfg.ridge)
    ufa.ema_update(stats, rng.normal((4 * n_known, embed)), np.repeat(np.arange(n_known), 4))
    inputs.ood = ufa.propose_ood(stats, rng, cfg.n_ood, cfg.ood_split, cfg.beta, cfg.mix_k, cfg.mix_sigma)
    protos = rng.normal((n_known, embed))
    return params, data, stats, protos, cfg, inputs


def _loss(params, data, stats, protos, cfg, inputs):
    report, root, V = obj.total_loss(params, data, stats, protos, cfg, inputs=inputs, hard=False,
                                     update_stats=False)
    return report.total, root, V


def check(seed: int, step: float = 1e-5, **shape) -> CheckResult:
    params, data, stats, protos, cfg, inputs = tiny_problem(seed, **shape)
    _, root, V = _loss(params, data, stats, protos, cfg, inputs)
    analytic = obj.gradients(root, V).flatten()
    base = params.flatten()
    numeric = np.empty_like(base)
    for i in range(base.size):
        hi, lo = base.copy(), base.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = _loss(params.unflatten(hi), data, stats, protos, cfg, inputs)[0]
        f_lo = _loss(params.unflatten(lo), data, stats, protos, cfg, inputs)[0]
        numeric[i] = (f_hi - f_lo) / (2 * step)
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)
    worst = int(np.argmax(rel))
    return CheckResult(seed, float(rel[worst]), _owner(params, worst), base.size)


def _owner(params, flat_index):
    i = 0
    for name, v in params.items():
        if flat_index < i + np.size(v):
            return name
        i += np.size(v)
    return "?"


def run_suite(seed: int = 0, n_configs: int = 10):
    return [check(seed * 1000 + k) for k in range(n_configs)]
