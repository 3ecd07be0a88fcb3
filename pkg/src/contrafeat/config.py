"""Run configuration: one flat JSON document, unknown keys rejected."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .losses import MODES, VARIANTS, LossConfig
from .toyworld import ToyWorldSpec

SEED_ENV = "CONTRAFEAT_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # toy world
    z_dim: int = 8
    n: int = 16
    k_layers: int = 5
    image_size: int = 32
    stages: int = 3
    world_seed: int = 0
    # informative subspace
    pca_samples: int = 50_000
    subspace_k: int = 8
    direction_length: float = 1.0
    # navigator / training
    seed: int = 0
    steps: int = 10_000
    batch_size: int = 8
    directions: int = 6
    lr_navigator: float = 0.05
    lr_prototypes: float = 0.01
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    grad_clip: float = 10.0
    attention_sigma: float = 1.0
    strength: float = 1.0
    frozen_directions: str | None = None
    freeze_attention: bool = False
    prototype_init_std: float = 0.1
    log_every: int = 50
    checkpoint_every: int = 0
    # losses
    mode: str = "l2mask"
    variant: str = "bi"
    lam: float = 0.01
    eps_q: float = 1e-8
    # evaluation / reports
    eval_samples: int = 100
    eval_runs: int = 5
    traverse_steps: int = 7
    traverse_strength: float = 30.0
    mask_samples: int = 1000
    # group-VAE distillation
    distill_pairs: int = 6000
    distill_strength: float = 40.0
    vae_steps: int = 1500
    vae_batch: int = 64
    vae_lr: float = 1e-3
    vae_obs_std: float = 0.1
    vae_latent: int = 0
    metric_samples: int = 5000
    output_dir: str = "runs/default"

    def __post_init__(self):
        errors = []
        positive_ints = ("z_dim", "n", "k_layers", "image_size", "stages", "pca_samples", "subspace_k",
                         "batch_size", "directions", "log_every", "eval_samples", "eval_runs",
                         "traverse_steps", "mask_samples", "distill_pairs", "vae_batch", "metric_samples")
        for name in positive_ints:
            if getattr(self, name) < 1:
                errors.append(f"{name} must be positive")
        for name in ("steps", "checkpoint_every", "vae_steps", "vae_latent"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be non-negative")
        for name in ("direction_length", "lr_navigator", "lr_prototypes", "adam_eps", "grad_clip",
                     "attention_sigma", "eps_q", "vae_lr", "vae_obs_std", "prototype_init_std"):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be positive")
        if not 0.0 <= self.adam_beta1 < 1.0 or not 0.0 <= self.adam_beta2 < 1.0:
            errors.append("Adam betas must lie in [0, 1)")
        if self.subspace_k > self.n:
            errors.append("subspace_k must not exceed n")
        if self.pca_samples < 2:
            errors.append("pca_samples must be >= 2")
        if self.mode not in MODES:
            errors.append(f"mode must be one of {MODES}")
        if self.variant not in VARIANTS:
            errors.append(f"variant must be one of {VARIANTS}")
        if self.lam < 0:
            errors.append("lam must be non-negative")
        if self.directions < 2:
            errors.append("directions must be >= 2 (orthogonality needs a second direction)")
        if errors:
            raise ConfigError("; ".join(errors))
        try:
            self.world_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- views -------------------------------------------------------------
    def world_spec(self) -> ToyWorldSpec:
        return ToyWorldSpec(z_dim=self.z_dim, n=self.n, k_layers=self.k_layers,
                            image_size=self.image_size, stages=self.stages, seed=self.world_seed)

    def loss_config(self) -> LossConfig:
        return LossConfig(mode=self.mode, variant=self.variant, lam=self.lam, eps=self.eps_q)

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(data) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        coerced = {}
        for f in fields(cls):
            if f.name not in data:
                continue
            coerced[f.name] = _coerce(f.name, f.type, data[f.name])
        return cls(**coerced)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def with_overrides(self, **overrides) -> "RunConfig":
        overrides = {k: v for k, v in overrides.items() if v is not None}
        unknown = sorted(set(overrides) - set(self.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return replace(self, **overrides)

    def with_env(self, environ=os.environ) -> "RunConfig":
        raw = environ.get(SEED_ENV)
        if raw is None or raw == "":
            return self
        try:
            return replace(self, seed=int(raw))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def _coerce(name: str, annotation, value):
    kind = str(annotation)
    if "None" in kind and value is None:
        return None
    if kind.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
        return value
    if kind.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if kind.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if kind.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
        return value
    return value
