"""Run configuration: every tunable knob with its default, plus JSON I/O."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    dim: int = 32
    n_classes: int = 20
    per_class: int = 100
    target_per_class: int = 50
    radius: float = 4.0
    class_sigma: float = 0.7
    margin_ratio: float | None = None  # requested sigma2_intra / delta_inter
    repulsion_iters: int = 200
    # domain shift applied to the target split
    shift_angle: float = 0.6  # radians, applied in every rotation plane
    shift_translation: float = 0.5
    shift_noise: float = 0.5
    shift_jitter: float = 0.0
    # patch-level synthesis
    n_patches: int = 24
    n_attn_heads: int = 4
    n_true_parts: int = 4
    n_informative: int = 3
    patch_noise: float = 0.3
    part_scale: float = 2.0

    def validate(self):
        if self.n_classes < 2 or self.n_classes % 2:
            raise ConfigError("n_classes must be even and >= 2")
        if self.per_class < 2 or self.target_per_class < 1:
            raise ConfigError("per_class must be >= 2 and target_per_class >= 1")
        if self.dim < 1 or self.radius <= 0 or self.class_sigma < 0:
            raise ConfigError("dim >= 1, radius > 0, class_sigma >= 0 required")
        if self.margin_ratio is not None and self.margin_ratio <= 0:
            raise ConfigError("margin_ratio must be positive")
        if self.n_patches < self.n_true_parts or not 1 <= self.n_informative <= self.n_true_parts:
            raise ConfigError("need n_patches >= n_true_parts >= n_informative >= 1")
        if min(self.shift_noise, self.shift_jitter, self.patch_noise) < 0:
            raise ConfigError("noise levels must be non-negative")


@dataclass
class RunConfig:
    # parts discovery
    rho: float = 0.30
    n_parts: int = 16
    tau: float = 0.5
    tau_anneal: bool = False  # linear 1.0 -> 0.1 over training when set
    attn_heads: int = 4
    hidden_dim: int = 256
    embed_dim: int = 128
    # uncertainty-aware augmentation
    margin: float = 5.0
    n_ood: int = 64
    ood_split: tuple = (1 / 3, 1 / 3, 1 / 3)  # tail, mix, sphere
    beta: float = 2.0
    mix_k: int = 2
    mix_sigma: float = 0.1
    alpha1: float = 0.9
    alpha2: float = 0.9
    ridge: float = 1e-4
    tau_temp: float = 1.0
    gamma_init: float = 10.0
    # objective
    lambda_nce: float = 0.65
    lambda_scon: float = 0.35
    lambda_ce: float = 1.0
    lambda_oe: float = 0.5
    lambda_ent: float = 0.5
    tau_c: float = 0.1
    view_jitter: float = 0.05
    view_dropout: float = 0.1
    # optimisation
    lr: float = 0.3
    momentum: float = 0.9
    weight_decay: float = 5e-5
    epochs: int = 101
    batch_size: int = 128
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self):
        checks = [
            (0 < self.rho <= 1, "rho must lie in (0, 1]"),
            (self.n_parts >= 1, "n_parts must be >= 1"),
            (self.tau > 0 and self.tau_temp > 0 and self.tau_c > 0, "temperatures must be positive"),
            (self.attn_heads >= 1 and self.hidden_dim >= 1 and self.embed_dim >= 1, "dims must be >= 1"),
            (self.n_ood >= 0, "n_ood must be >= 0"),
            (len(self.ood_split) == 3 and min(self.ood_split) >= 0 and sum(self.ood_split) > 0,
             "ood_split needs three non-negative weights with positive sum"),
            (self.beta >= 1, "beta must be >= 1"),
            (self.mix_k >= 1 and self.mix_sigma >= 0, "mix_k >= 1 and mix_sigma >= 0 required"),
            (0 <= self.alpha1 <= 1 and 0 <= self.alpha2 <= 1, "EMA decays must lie in [0, 1]"),
            (self.ridge >= 0 and self.gamma_init > 0, "ridge >= 0 and gamma_init > 0 required"),
            (min(self.lambda_nce, self.lambda_scon, self.lambda_ce, self.lambda_oe, self.lambda_ent) >= 0,
             "loss weights must be non-negative"),
            (0 <= self.view_dropout < 1 and self.view_jitter >= 0, "view augmentation out of range"),
            (self.lr >= 0 and 0 <= self.momentum < 1 and self.weight_decay >= 0, "optimizer settings out of range"),
            (self.epochs >= 0 and self.batch_size >= 2, "epochs >= 0 and batch_size >= 2 required"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        self.synth.validate()
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["ood_split"] = list(self.ood_split)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        synth = data.pop("synth", {})
        _reject_unknown(cls, data, "")
        _reject_unknown(SynthConfig, synth, "synth.")
        if "ood_split" in data:
            data["ood_split"] = tuple(data["ood_split"])
        return cls(**data, synth=SynthConfig(**synth)).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "RunConfig":
        synth = changes.pop("synth", None)
        out = dataclasses.replace(self, **changes)
        if synth is not None:
            out.synth = synth if isinstance(synth, SynthConfig) else dataclasses.replace(self.synth, **synth)
        else:
            out.synth = dataclasses.replace(self.synth)
        return out.validate()


def _reject_unknown(klass, data, prefix):
    known = {f.name for f in dataclasses.fields(klass)} - {"synth"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
