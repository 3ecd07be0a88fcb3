"""Contrastive deep-feature losses.

Feature stacks are lists of stage maps shaped (B, C, H, W); a leading batch
dimension is added for unbatched (C, H, W) input. Per-sample values have shape
(B,).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch

from .navigator import apply

MODES = ("l2mask", "pooled", "nofoc")
VARIANTS = ("bi", "pt")


@dataclass(frozen=True)
class LossConfig:
    mode: str = "l2mask"
    variant: str = "bi"
    lam: float = 0.01
    eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


class ContrastScore(NamedTuple):
    value: torch.Tensor       # (B,) sum over stages of the aggregated cos^2
    degenerate: torch.Tensor  # (B, L) bool, stage had an all-zero input


class LossBreakdown(NamedTuple):
    total: torch.Tensor
    cons: torch.Tensor
    orth: torch.Tensor
    div: torch.Tensor


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def _guarded_norm(x: torch.Tensor, dim: int, eps: float) -> torch.Tensor:
    # sqrt(|x|^2 + eps^2) keeps gradients finite at zero
    return torch.sqrt((x * x).sum(dim) + eps * eps)


def _stage(fx: torch.Tensor, fy: torch.Tensor, mode: str, eps: float):
    fx, fy = _batched(fx), _batched(fy)
    fx, fy = torch.broadcast_tensors(fx, fy)
    flat = lambda t: t.flatten(1)
    dead = ((flat(fx) == 0).all(1)) | ((flat(fy) == 0).all(1))
    if mode == "pooled":
        px, py = fx.mean((2, 3)), fy.mean((2, 3))
        cos = (px * py).sum(1) / (_guarded_norm(px, 1, eps) * _guarded_norm(py, 1, eps))
        dead = dead | (px == 0).all(1) | (py == 0).all(1)
        return torch.where(dead, torch.zeros_like(cos), cos * cos), dead
    nx = _guarded_norm(fx, 1, eps)  # (B, H, W)
    ny = _guarded_norm(fy, 1, eps)
    cos2 = ((fx * fy).sum(1) / (nx * ny)) ** 2
    if mode == "nofoc":
        value = cos2.flatten(1).mean(1)
    else:
        q = (nx / nx.flatten(1).amax(1)[:, None, None]) * (ny / ny.flatten(1).amax(1)[:, None, None])
        value = (q * cos2).flatten(1).sum(1) / (q.flatten(1).sum(1) + eps)
    return torch.where(dead, torch.zeros_like(value), value), dead


def contrast(fx_stack, fy_stack, mode: str = "l2mask", eps: float = 1e-8) -> ContrastScore:
    """Stage-summed masked mean of squared channel cosines between two stacks."""
    if len(fx_stack) != len(fy_stack):
        raise ValueError("feature stacks have different numbers of stages")
    values, flags = [], []
    for fx, fy in zip(fx_stack, fy_stack):
        if fx.shape[-3:] != fy.shape[-3:]:
            raise ValueError(f"stage shape mismatch: {tuple(fx.shape)} vs {tuple(fy.shape)}")
        v, dead = _stage(fx, fy, mode, eps)
        values.append(v)
        flags.append(dead)
    return ContrastScore(torch.stack(values).sum(0), torch.stack(flags, dim=1))


def masked_consistency(fx, fy, cfg: LossConfig = LossConfig()) -> ContrastScore:
    s = contrast(fx, fy, cfg.mode, cfg.eps)
    return s._replace(value=-s.value)


def masked_orthogonality(fx, fy, cfg: LossConfig = LossConfig()) -> ContrastScore:
    return contrast(fx, fy, cfg.mode, cfg.eps)


def feature_change(w: torch.Tensor, delta: torch.Tensor, world) -> list[torch.Tensor]:
    """Stage-wise E(G(w + delta)) - E(G(w))."""
    after = world.features(apply(w, delta))
    before = world.features(w)
    return [a - b for a, b in zip(after, before)]


def prototype_images(bank: torch.Tensor) -> torch.Tensor:
    return torch.tanh(bank)


def prototype_features(bank: torch.Tensor, d, world) -> list[torch.Tensor]:
    """Features of tanh(pattern d); ``d`` may be an int or an index tensor."""
    m = bank.shape[0]
    if isinstance(d, int) and not -m <= d < m:
        raise IndexError(f"prototype index {d} out of range for {m} patterns")
    return world.extract_features(prototype_images(bank[d]))


def pt_consistency(fx, proto, cfg: LossConfig = LossConfig()) -> ContrastScore:
    return masked_consistency(fx, proto, cfg)


def pt_orthogonality(fx, bank: torch.Tensor, d: int, cfg: LossConfig, world, proto_all=None) -> ContrastScore:
    """Mean masked orthogonality of ``fx`` against every other prototype."""
    m = bank.shape[0]
    if m < 2:
        raise ValueError("prototype orthogonality needs at least 2 patterns")
    if proto_all is None:
        proto_all = world.extract_features(prototype_images(bank))
    values, flags = [], []
    for other in range(m):
        if other == d:
            continue
        s = masked_orthogonality(fx, [p[other:other + 1] for p in proto_all], cfg)
        values.append(s.value)
        flags.append(s.degenerate)
    return ContrastScore(torch.stack(values).mean(0), torch.stack(flags).any(0))


def diversity(directions: torch.Tensor) -> torch.Tensor:
    """Sum over ordered pairs i != j of cos^2 between directions (m, n)."""
    m = directions.shape[0]
    if m < 2:
        raise ValueError("diversity needs at least 2 directions")
    unit = directions / directions.norm(dim=1, keepdim=True)
    cos2 = (unit @ unit.T) ** 2
    return cos2.sum() - cos2.diagonal().sum()


@dataclass
class Batch:
    """One training step's samples: base codes x, partner codes y, indices d, d'."""
    x: torch.Tensor
    y: torch.Tensor
    d: int
    d_prime: int


def total_loss(batch: Batch, nav, world, cfg: LossConfig, bank: torch.Tensor | None = None,
               strength: float = 1.0) -> LossBreakdown:
    """Batch-averaged objective for one sampled direction."""
    if (cfg.variant == "pt") != (bank is not None):
        raise ValueError("a prototype bank is required iff variant == 'pt'")
    dirs = nav.directions()
    att = nav.attention()
    mod = lambda i: strength * att[i].unsqueeze(-1) * dirs[i].unsqueeze(-2)
    x = batch.x
    div = diversity(dirs) if nav.m >= 2 else dirs.sum() * 0.0

    if cfg.variant == "bi":
        y = batch.y
        b = x.shape[0]
        codes = torch.cat([x, x + mod(batch.d), y, y + mod(batch.d), y + mod(batch.d_prime)])
        feats = [f.split(b) for f in world.features(codes)]
        fx = [f[1] - f[0] for f in feats]
        fy = [f[3] - f[2] for f in feats]
        fy2 = [f[4] - f[2] for f in feats]
        cons = masked_consistency(fx, fy, cfg).value.mean()
        orth = masked_orthogonality(fx, fy2, cfg).value.mean()
    else:
        b = x.shape[0]
        feats = [f.split(b) for f in world.features(torch.cat([x, x + mod(batch.d)]))]
        fx = [f[1] - f[0] for f in feats]
        proto_all = world.extract_features(prototype_images(bank))
        cons = pt_consistency(fx, [p[batch.d:batch.d + 1] for p in proto_all], cfg).value.mean()
        orth = pt_orthogonality(fx, bank, batch.d, cfg, world, proto_all).value.mean()
    total = cons + orth + cfg.lam * div
    return LossBreakdown(total, cons, orth, div)
