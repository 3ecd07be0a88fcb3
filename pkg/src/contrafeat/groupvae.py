"""Paired-image datasets and a group VAE that averages posteriors on shared dims."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .toyworld import ToyWorld

log = logging.getLogger(__name__)

ENCODER_CHANNELS = (16, 32, 64)
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PairDataset:
    images_a: torch.Tensor  # (N, 3, H, W)
    images_b: torch.Tensor
    varied: torch.Tensor    # (N,) int64 in 0..m-1
    factors_a: torch.Tensor | None = None  # (N, p) oracle reads, kept for diagnostics
    factors_b: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.varied.numel()

    def arrays(self) -> dict:
        out = {"images_a": self.images_a.numpy(), "images_b": self.images_b.numpy(),
               "varied": self.varied.to(torch.float32).numpy()}
        if self.factors_a is not None:
            out["factors_a"] = self.factors_a.numpy()
            out["factors_b"] = self.factors_b.numpy()
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> "PairDataset":
        fa, fb = arrays.get("factors_a"), arrays.get("factors_b")
        return cls(torch.from_numpy(arrays["images_a"]), torch.from_numpy(arrays["images_b"]),
                   torch.from_numpy(arrays["varied"]).round().to(torch.int64),
                   None if fa is None else torch.from_numpy(fa), None if fb is None else torch.from_numpy(fb))


def build_pair_dataset(modifications: torch.Tensor, world: ToyWorld, count: int, strength: float,
                       generator: torch.Generator | None = None, chunk: int = 512) -> PairDataset:
    """Pairs (G(w), G(w + strength * mod_d)) with d cycling over the m modifications.

    Base codes are drawn fresh per pair from independent factors spanning the
    render range, so the images carry enough variation to learn from.
    """
    mods = torch.as_tensor(modifications, dtype=world.dtype)
    m = mods.shape[0]
    if count < 1 or m < 1:
        raise ValueError("need count >= 1 and at least one modification")
    varied = torch.arange(count) % m
    a_parts, b_parts, fa_parts, fb_parts = [], [], [], []
    with torch.no_grad():
        for start in range(0, count, chunk):
            d = varied[start:start + chunk]
            w = world.codes_from_factors(world.sample_wide_factors(d.numel(), generator))
            w_b = w + strength * mods[d]
            a_parts.append(world.render(w))
            b_parts.append(world.render(w_b))
            fa_parts.append(world.read_factors(w))
            fb_parts.append(world.read_factors(w_b))
    return PairDataset(torch.cat(a_parts), torch.cat(b_parts), varied, torch.cat(fa_parts), torch.cat(fb_parts))


class GroupVAE(nn.Module):
    """Conv encoder (16/32/64, stride 2) with mean/log-variance heads and a mirrored decoder."""

    def __init__(self, latent: int, image_size: int = 32):
        super().__init__()
        if image_size % 8:
            raise ValueError("image_size must be divisible by 8")
        self.latent = latent
        self.base = image_size // 8
        c1, c2, c3 = ENCODER_CHANNELS
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c1, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(c1, c2, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(c2, c3, 4, 2, 1), nn.SiLU(),
            nn.Flatten(),
        )
        flat = c3 * self.base * self.base
        self.mean_head = nn.Linear(flat, latent)
        self.logvar_head = nn.Linear(flat, latent)
        self.decoder_in = nn.Linear(latent, flat)
        self.decoder = nn.Sequential(
            nn.SiLU(),
            nn.ConvTranspose2d(c3, c2, 4, 2, 1), nn.SiLU(),
            nn.ConvTranspose2d(c2, c1, 4, 2, 1), nn.SiLU(),
            nn.ConvTranspose2d(c1, 3, 4, 2, 1),
        )

    def encode(self, x):
        h = self.encoder(x)
        return self.mean_head(h), self.logvar_head(h)

    def decode(self, z):
        h = self.decoder_in(z).view(-1, ENCODER_CHANNELS[-1], self.base, self.base)
        return self.decoder(h)


def merge_posteriors(mean_a, var_a, mean_b, var_b, shared_mask):
    """Replace shared dims of both posteriors by the arithmetic mean of means and variances."""
    if not (mean_a.shape == var_a.shape == mean_b.shape == var_b.shape):
        raise ValueError("posterior shapes differ")
    shared = torch.as_tensor(shared_mask, dtype=torch.bool)
    if shared.shape[-1] != mean_a.shape[-1]:
        raise ValueError("shared_mask has the wrong latent dimension")
    mean = 0.5 * (mean_a + mean_b)
    var = 0.5 * (var_a + var_b)
    return ((torch.where(shared, mean, mean_a), torch.where(shared, var, var_a)),
            (torch.where(shared, mean, mean_b), torch.where(shared, var, var_b)))


def shared_mask_for(varied: torch.Tensor, latent: int) -> torch.Tensor:
    """(B,) varied indices -> (B, latent) mask that is False only on the varied dim."""
    mask = torch.ones(varied.numel(), latent, dtype=torch.bool)
    in_range = varied < latent
    mask[torch.arange(varied.numel())[in_range], varied[in_range]] = False
    return mask


def gaussian_kl(mean, var):
    """KL(N(mean, var) || N(0, I)) summed over the last dim."""
    return 0.5 * (mean ** 2 + var - torch.log(var) - 1.0).sum(-1)


def gaussian_nll(x, recon, obs_std: float = 1.0):
    """Fixed-variance Gaussian negative log-likelihood summed per sample."""
    d = x[0].numel()
    return (0.5 * ((x - recon) ** 2).flatten(1).sum(1) / obs_std ** 2
            + d * (0.5 * LOG_2PI + math.log(obs_std)))


def _sample(mean, var, noise):
    return mean + var.sqrt() * noise


def group_elbo(model: GroupVAE, xa, xb, shared_mask, noise_a=None, noise_b=None, generator=None,
               obs_std: float = 1.0):
    """Mean negative group ELBO over the batch; noise may be supplied for common random numbers."""
    mean_a, logvar_a = model.encode(xa)
    mean_b, logvar_b = model.encode(xb)
    (ma, va), (mb, vb) = merge_posteriors(mean_a, logvar_a.exp(), mean_b, logvar_b.exp(), shared_mask)
    if noise_a is None:
        noise_a = torch.randn(ma.shape, generator=generator, dtype=ma.dtype)
    if noise_b is None:
        noise_b = torch.randn(mb.shape, generator=generator, dtype=mb.dtype)
    rec = (gaussian_nll(xa, model.decode(_sample(ma, va, noise_a)), obs_std)
           + gaussian_nll(xb, model.decode(_sample(mb, vb, noise_b)), obs_std))
    kl = gaussian_kl(ma, va) + gaussian_kl(mb, vb)
    loss = (rec + kl).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite group ELBO")
    return loss


def vae_elbo(model: GroupVAE, x, noise=None, generator=None, obs_std: float = 1.0):
    """Mean negative ELBO of a plain VAE."""
    mean, logvar = model.encode(x)
    var = logvar.exp()
    if noise is None:
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    loss = (gaussian_nll(x, model.decode(_sample(mean, var, noise)), obs_std) + gaussian_kl(mean, var)).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite ELBO")
    return loss


def train_group_vae(dataset: PairDataset, latent: int, steps: int, batch: int, lr: float, seed: int,
                    grouped: bool = True, obs_std: float = 1.0) -> tuple[GroupVAE, list[float]]:
    """Adam training; ``grouped=False`` gives the plain-VAE baseline on the same images."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    model = GroupVAE(latent, dataset.images_a.shape[-1])
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    trace = []
    n = len(dataset)
    for step in range(steps):
        idx = torch.randint(n, (batch,), generator=g)
        xa, xb = dataset.images_a[idx], dataset.images_b[idx]
        if grouped:
            loss = group_elbo(model, xa, xb, shared_mask_for(dataset.varied[idx], latent), generator=g,
                              obs_std=obs_std)
        else:
            loss = 0.5 * (vae_elbo(model, xa, generator=g, obs_std=obs_std)
                          + vae_elbo(model, xb, generator=g, obs_std=obs_std))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
        if step % 250 == 0:
            log.debug("vae step %d loss %.3f", step, trace[-1])
    return model, trace


def encode_factors(model: GroupVAE, world: ToyWorld, factors, chunk: int = 1024) -> np.ndarray:
    """Posterior means for images rendered from (N, p) factor values."""
    f = torch.as_tensor(np.asarray(factors), dtype=world.dtype)
    out = []
    with torch.no_grad():
        for start in range(0, f.shape[0], chunk):
            imgs = world.render(world.codes_from_factors(f[start:start + chunk]))
            out.append(model.encode(imgs)[0].double().numpy())
    return np.concatenate(out)


def wide_factor_sampler(world: ToyWorld):
    """numpy-RNG sampler over the same factor distribution the pair bases use."""
    scale = 1.0 / world.factor_gain

    def sample(count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((count, world.p)) * scale
    return sample

