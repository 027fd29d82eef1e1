"""Composite training objective, gradients and the SGD training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autograd as ag
from . import dcpd, ufa
from .config import RunConfig
from .core_math import ContractError, RngState, sample_gumbel

log = logging.getLogger(__name__)

PARAM_NAMES = ("Q", "Wq", "Wk", "Wv", "Wo", "W1", "b1", "W2", "b2", "W", "log_gamma")
NO_DECAY = frozenset({"b1", "b2", "log_gamma"})
TERMS = ("infonce", "supcon", "ce", "oe", "ent", "ufa", "total")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step, term):
        self.step, self.term = step, term
        super().__init__(f"non-finite {term} loss at step {step}")


@dataclass
class Parameters:
    Q: np.ndarray
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W: np.ndarray
    log_gamma: np.ndarray

    @classmethod
    def init(cls, rng: RngState, dim: int, n_known: int, n_parts=16, hidden=256, embed=128,
             gamma=10.0):
        attn = dcpd.CrossAttention.init(rng, dim)
        head = dcpd.FusionHead.init(rng, dim, hidden, embed)
        return cls(Q=rng.normal((n_parts, dim)), Wq=attn.Wq, Wk=attn.Wk, Wv=attn.Wv, Wo=attn.Wo,
                   W1=head.W1, b1=head.b1, W2=head.W2, b2=head.b2,
                   W=rng.normal((n_known, embed)) / math.sqrt(embed),
                   log_gamma=np.array(math.log(gamma)))

    @classmethod
    def from_config(cls, rng, dim, n_known, cfg: RunConfig):
        return cls.init(rng, dim, n_known, cfg.n_parts, cfg.hidden_dim, cfg.embed_dim, cfg.gamma_init)

    def items(self):
        return [(n, getattr(self, n)) for n in PARAM_NAMES]

    def copy(self):
        return Parameters(**{n: np.array(v, dtype=np.float64, copy=True) for n, v in self.items()})

    def flatten(self):
        return np.concatenate([np.ravel(v) for _, v in self.items()])

    def unflatten(self, vec):
        out, i = {}, 0
        for n, v in self.items():
            size = np.size(v)
            out[n] = np.asarray(vec[i:i + size], dtype=np.float64).reshape(np.shape(v))
            i += size
        return Parameters(**out)

    def head(self):
        return dcpd.FusionHead(self.W1, self.b1, self.W2, self.b2)

    def classifier(self, cfg: RunConfig | None = None):
        cfg = cfg or RunConfig()
        return ufa.CosineClassifier(self.W, float(self.log_gamma), cfg.tau_temp, cfg.margin)


@dataclass
class LossReport:
    infonce: float
    supcon: float
    ce: float
    oe: float
    ent: float
    ufa: float
    total: float
    epoch: int = 0
    step: int = 0

    def recombined(self, cfg: RunConfig):
        return (cfg.lambda_nce * self.infonce + cfg.lambda_scon * self.supcon
                + cfg.lambda_ce * self.ce + self.ufa)

    def row(self):
        return [self.epoch, self.step] + [getattr(self, t) for t in TERMS]


@dataclass
class OptimizerState:
    lr0: float = 0.3
    momentum: float = 0.9
    weight_decay: float = 5e-5
    total_epochs: int = 101
    epoch: int = 0
    buffers: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: RunConfig):
        return cls(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.epochs)

    def lr(self, epoch=None):
        e = self.epoch if epoch is None else epoch
        if self.total_epochs <= 0:
            return self.lr0
        return self.lr0 * 0.5 * (1.0 + math.cos(math.pi * e / self.total_epochs))


# -- loss terms ---------------------------------------------------------------

def supcon_graph(z, labels, prototypes, tau_c):
    """Prototype-based supervised contrastive loss.

    ``prototypes`` is a (C, Dz) array of class means aligned with class indices.
    """
    P = ag.const(_unit_rows(prototypes))
    sims = ag.matmul(ag.l2_normalize(z), ag.transpose(P))
    return ag.mean((ag.logsumexp(sims, tau=tau_c) - ag.gather(sims, labels)) * (1.0 / tau_c))


def infonce_graph(z1, z2, tau_c):
    """Symmetric InfoNCE; self-similarity is excluded from each denominator."""
    B = z1.shape[0]
    if B < 2 or z2.shape[0] != B:
        raise ContractError("InfoNCE needs two views of equal batch size >= 2")
    Z = ag.l2_normalize(ag.concat([z1, z2], axis=0))
    sims = ag.matmul(Z, ag.transpose(Z))
    mask = np.zeros((2 * B, 2 * B))
    np.fill_diagonal(mask, -np.inf)
    sims_masked = ag.add(sims, mask)
    pos = np.concatenate([np.arange(B, 2 * B), np.arange(B)])
    return ag.mean((ag.logsumexp(sims_masked, tau=tau_c) - ag.gather(sims, pos)) * (1.0 / tau_c))


def ce_graph(logits, labels, tau_temp):
    return ag.mean((ag.logsumexp(logits, tau=tau_temp) - ag.gather(logits, labels)) * (1.0 / tau_temp))


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def loss_supcon(z, labels, prototypes, tau_c=0.1):
    """``prototypes``: mapping class id -> vector, or an aligned (C, Dz) array."""
    labels = np.asarray(labels)
    if isinstance(prototypes, dict):
        keys = sorted(prototypes)
        missing = set(labels.tolist()) - set(keys)
        if missing:
            raise ContractError(f"no prototype for classes {sorted(missing)}")
        index = {k: i for i, k in enumerate(keys)}
        labels = np.array([index[y] for y in labels.tolist()])
        prototypes = np.stack([prototypes[k] for k in keys])
    elif labels.max(initial=-1) >= len(prototypes) or labels.min(initial=0) < 0:
        raise ContractError("label without a prototype")
    return float(supcon_graph(ag.const(np.atleast_2d(z)), labels, prototypes, tau_c).value)


def loss_infonce(z1, z2, tau_c=0.1):
    return float(infonce_graph(ag.const(z1), ag.const(z2), tau_c).value)


def loss_ce(logits, labels, tau_temp=1.0):
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ContractError("label outside the class range")
    return float(ce_graph(ag.const(logits), labels, tau_temp).value)


# -- data -----------------------------------------------------------------------

@dataclass
class FeatureData:
    """A stack of PatchFeatureSets as arrays, with labels indexing ``classes``."""

    F_patch: np.ndarray  # (n, N, D)
    f_cls: np.ndarray  # (n, D)
    A_cls: np.ndarray  # (n, H, N)
    labels: np.ndarray  # (n,) class ids
    classes: tuple = ()

    def __post_init__(self):
        self.A_cls = self.A_cls / self.A_cls.sum(axis=-1, keepdims=True)
        if not self.classes:
            self.classes = tuple(sorted(set(np.asarray(self.labels).tolist())))

    def __len__(self):
        return len(self.labels)

    @property
    def class_index(self):
        lookup = {c: i for i, c in enumerate(self.classes)}
        return np.array([lookup[int(y)] for y in self.labels])

    def subset(self, idx):
        return FeatureData(self.F_patch[idx], self.f_cls[idx], self.A_cls[idx], self.labels[idx], self.classes)


@dataclass
class StepInputs:
    """Every random quantity a loss evaluation consumes; fixing it makes the loss
    a deterministic function of the parameters (used for gradient checks)."""

    view2_patch: np.ndarray
    view2_cls: np.ndarray
    noise1: np.ndarray | None
    noise2: np.ndarray | None
    ood: ufa.OODBatch | None = None


def augment_view(F_patch, f_cls, rng: RngState, jitter=0.05, dropout=0.1):
    """Feature-space second view: Gaussian jitter then random feature dropout."""
    def aug(x):
        y = x + jitter * rng.normal(x.shape)
        if dropout > 0:
            y = y * (rng.uniform(x.shape) >= dropout)
        return y
    return aug(F_patch), aug(f_cls)


def draw_step_inputs(F_patch, f_cls, n_parts, rng: RngState, cfg: RunConfig, hard=True):
    v2p, v2c = augment_view(F_patch, f_cls, rng, cfg.view_jitter, cfg.view_dropout)
    shape = F_patch.shape[:-1] + (n_parts,)
    return StepInputs(v2p, v2c, sample_gumbel(rng, shape), sample_gumbel(rng, shape))


# -- objective ---------------------------------------------------------------------

def param_vars(params: Parameters):
    return {n: ag.param(v) for n, v in params.items()}


def total_loss(params: Parameters, data: FeatureData, stats: ufa.ClassStats, prototypes, cfg: RunConfig,
               rng: RngState | None = None, *, inputs: StepInputs | None = None, tau=None,
               hard=True, update_stats=True, ood_rng: RngState | None = None):
    """Forward pass of the composite loss on one batch.

    Runs parts discovery on both views, the contrastive and supervised terms,
    the EMA statistics update, outlier proposal and the calibration terms.
    Outlier proposals draw from ``ood_rng`` when given, else from ``rng``.
    Returns ``(report, root, vars)``; call :func:`gradients` on the result.
    """
    tau = cfg.tau if tau is None else tau
    if inputs is None:
        inputs = draw_step_inputs(data.F_patch, data.f_cls, params.Q.shape[0], rng, cfg)
    V = param_vars(params)
    n_heads = cfg.attn_heads
    prior1 = dcpd.attention_priors((data.F_patch, data.A_cls), cfg.rho)
    prior2 = dcpd.attention_priors((inputs.view2_patch, data.A_cls), cfg.rho)
    z1, _ = dcpd.embed(V, data.F_patch, data.f_cls, prior1, tau, inputs.noise1, hard, n_heads)
    z2, _ = dcpd.embed(V, inputs.view2_patch, inputs.view2_cls, prior2, tau, inputs.noise2, hard, n_heads)

    y = data.class_index
    y2 = np.concatenate([y, y])
    z_both = ag.concat([z1, z2], axis=0)
    l_nce = infonce_graph(z1, z2, cfg.tau_c)
    l_scon = supcon_graph(z_both, y2, prototypes, cfg.tau_c)
    l_ce = ce_graph(ufa.logits_graph(V["W"], V["log_gamma"], z_both), y2, cfg.tau_temp)

    if not (np.all(np.isfinite(z1.value)) and np.all(np.isfinite(z2.value))):
        # stop before non-finite embeddings reach the class statistics
        raise TrainingDivergedError(None, "embedding")
    if update_stats:
        ufa.ema_update(stats, z1.value, data.labels)
    ood = inputs.ood
    if ood is None and cfg.n_ood > 0:
        ood = ufa.propose_ood(stats, ood_rng or rng, cfg.n_ood, cfg.ood_split, cfg.beta, cfg.mix_k, cfg.mix_sigma)
    if ood is not None and len(ood):
        g_ood = ufa.logits_graph(V["W"], V["log_gamma"], ag.const(ood.z))
        l_oe = ufa.loss_oe_graph(g_ood, cfg.tau_temp, cfg.margin)
        l_ent = ufa.loss_ent_graph(g_ood, cfg.tau_temp)
    else:
        l_oe = l_ent = ag.const(0.0)
    l_ufa = cfg.lambda_oe * l_oe - cfg.lambda_ent * l_ent
    root = cfg.lambda_nce * l_nce + cfg.lambda_scon * l_scon + cfg.lambda_ce * l_ce + l_ufa
    report = LossReport(*(float(t.value) for t in (l_nce, l_scon, l_ce, l_oe, l_ent, l_ufa, root)))
    return report, root, V


def gradients(root, V) -> Parameters:
    """Reverse-mode gradients of ``root`` for every parameter var in ``V``."""
    ag.backward(root)
    return Parameters(**{n: (v.grad if v.grad is not None else np.zeros_like(v.value)) for n, v in V.items()})


def sgd_step(params: Parameters, grads: Parameters, opt: OptimizerState) -> Parameters:
    """Momentum SGD with decoupled-from-bias weight decay and cosine lr."""
    lr = opt.lr()
    out = {}
    for name, p in params.items():
        g = getattr(grads, name)
        if np.shape(g) != np.shape(p):
            raise ContractError(f"gradient shape mismatch for {name}")
        if name not in NO_DECAY:
            g = g + opt.weight_decay * p
        buf = opt.buffers.get(name)
        buf = g if buf is None else opt.momentum * buf + g
        opt.buffers[name] = buf
        out[name] = p - lr * buf
    return Parameters(**out)


def embed_data(params: Parameters, data: FeatureData, cfg: RunConfig, batch=256, tau=None):
    """Deterministic (noise-free, hard-routed) embeddings for a whole dataset."""
    tau = cfg.tau if tau is None else tau
    V = {n: ag.const(v) for n, v in params.items()}
    out = []
    for s in range(0, len(data), batch):
        F, c, A = data.F_patch[s:s + batch], data.f_cls[s:s + batch], data.A_cls[s:s + batch]
        prior = dcpd.attention_priors((F, A), cfg.rho)
        out.append(dcpd.embed(V, F, c, prior, tau, None, True, cfg.attn_heads)[0].value)
    return np.concatenate(out) if out else np.empty((0, params.W.shape[1]))


def class_prototypes(z, class_index, n_classes):
    protos = np.zeros((n_classes, z.shape[1]))
    for c in range(n_classes):
        sel = class_index == c
        if np.any(sel):
            protos[c] = z[sel].mean(axis=0)
    return protos


def tau_schedule(cfg: RunConfig, epoch: int):
    if not cfg.tau_anneal:
        return cfg.tau
    span = max(cfg.epochs - 1, 1)
    return 1.0 + (0.1 - 1.0) * min(epoch, span) / span


@dataclass
class TrainResult:
    params: Parameters
    stats: ufa.ClassStats
    history: list

    def epoch_totals(self):
        by = {}
        for r in self.history:
            by.setdefault(r.epoch, []).append(r.total)
        return [float(np.mean(by[e])) for e in sorted(by)]


def train(data: FeatureData, cfg: RunConfig, rng: RngState, params: Parameters | None = None,
          stats: ufa.ClassStats | None = None, on_step=None) -> TrainResult:
    """Minibatch training, one optimisation step per batch."""
    n_known = len(data.classes)
    dim = data.F_patch.shape[-1]
    if params is None:
        params = Parameters.from_config(rng.spawn(1), dim, n_known, cfg)
    if stats is None:
        stats = ufa.ClassStats(data.classes, cfg.embed_dim, cfg.alpha1, cfg.alpha2, cfg.ridge)
    opt = OptimizerState.from_config(cfg)
    # separate stream so that changing the outlier recipe leaves batches and views untouched
    ood_rng = rng.spawn(99)
    history = []
    step = 0
    y_all = data.class_index
    for epoch in range(cfg.epochs):
        opt.epoch = epoch
        tau = tau_schedule(cfg, epoch)
        # prototypes from the previous parameters, frozen for the epoch
        protos = class_prototypes(embed_data(params, data, cfg, tau=tau), y_all, n_known)
        order = rng.permutation(len(data))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if len(idx) < 2:
                continue
            try:
                report, root, V = total_loss(params, data.subset(idx), stats, protos, cfg, rng, tau=tau,
                                             ood_rng=ood_rng)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(step, exc.term) from None
            report.epoch, report.step = epoch, step
            for term in TERMS:
                if not math.isfinite(getattr(report, term)):
                    raise TrainingDivergedError(step, term)
            params = sgd_step(params, gradients(root, V), opt)
            history.append(report)
            if on_step is not None:
                on_step(report)
            step += 1
        log.debug("epoch %d mean total %.4f", epoch,
                  np.mean([r.total for r in history if r.epoch == epoch]))
    return TrainResult(params, stats, history)


def field_names():
    return [f.name for f in fields(LossReport)]
