"""Direction branch + layer-attention branch over the extended latent space."""
from __future__ import annotations

import math

import torch
from torch import nn

from .latent import PcaBasis


def gaussian_taps(sigma: float = 1.0) -> torch.Tensor:
    """Normalized 3-tap Gaussian kernel (side, center, side)."""
    side = math.exp(-1.0 / (2.0 * sigma * sigma))
    taps = torch.tensor([side, 1.0, side], dtype=torch.float64)
    return taps / taps.sum()


def smooth(probs: torch.Tensor, sigma: float = 1.0) -> torch.Tensor:
    """Convolve (..., K) layer weights with the 3-tap kernel.

    Boundary taps that would fall outside the layer range are folded back onto
    the boundary layer (replicate padding), so the total mass is preserved and
    a uniform input stays uniform.
    """
    k = probs.shape[-1]
    if k == 1:
        return probs
    side, center, _ = gaussian_taps(sigma).to(probs.dtype)
    left = torch.cat([probs[..., :1], probs[..., :-1]], dim=-1)
    right = torch.cat([probs[..., 1:], probs[..., -1:]], dim=-1)
    return side * left + center * probs + side * right


def smooth_attention(logits, sigma: float = 1.0) -> torch.Tensor:
    logits = torch.as_tensor(logits)
    return smooth(torch.softmax(logits, dim=-1), sigma)


def compose_modification(v_dir: torch.Tensor, att: torch.Tensor, strength=1.0) -> torch.Tensor:
    """Outer product ``strength * att[r] * v_dir`` -> (..., K, n).

    ``strength`` may be a scalar or a tensor broadcastable to the leading dims.
    """
    strength = torch.as_tensor(strength, dtype=v_dir.dtype)
    delta = att.unsqueeze(-1) * v_dir.unsqueeze(-2)
    return strength.reshape(strength.shape + (1, 1)) * delta


def apply(w: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    if w.shape[-2:] != delta.shape[-2:]:
        raise ValueError(f"shape mismatch: code {tuple(w.shape)} vs modification {tuple(delta.shape)}")
    return w + delta


class Navigator(nn.Module):
    """Per-direction subspace coefficients and attention logits.

    The attention logits are free parameters (no input conditioning).
    """

    def __init__(self, m: int, k: int, k_layers: int, basis: PcaBasis, *,
                 length: float = 1.0, sigma: float = 1.0, generator: torch.Generator | None = None,
                 dtype=torch.float32):
        super().__init__()
        if m < 1 or k < 1 or k_layers < 1:
            raise ValueError("m, k and k_layers must be positive")
        if k > basis.n:
            raise ValueError(f"k={k} exceeds latent dimension {basis.n}")
        self.m, self.k, self.k_layers = m, k, k_layers
        self.basis = basis
        self.length = length
        self.sigma = sigma
        v = torch.randn(m, k, generator=generator, dtype=torch.float64)
        v = v / v.norm(dim=1, keepdim=True)
        self.v_sub = nn.Parameter(v.to(dtype))
        self.att_logits = nn.Parameter(torch.zeros(m, k_layers, dtype=dtype))
        self.register_buffer("pca_top", basis.top(k, dtype=dtype))

    def directions(self) -> torch.Tensor:
        """Unit W0 directions, (m, n)."""
        v = self.v_sub @ self.pca_top.T
        return self.length * v / v.norm(dim=-1, keepdim=True)

    def attention(self) -> torch.Tensor:
        return smooth_attention(self.att_logits, self.sigma)

    def modification(self, d, strength=1.0) -> torch.Tensor:
        """Extended-space modification(s) for direction index/indices ``d``."""
        return compose_modification(self.directions()[d], self.attention()[d], strength)

    def modifications(self, strength=1.0) -> torch.Tensor:
        return compose_modification(self.directions(), self.attention(), strength)

    @torch.no_grad()
    def reseed_degenerate(self, generator: torch.Generator | None = None, tol: float = 1e-8) -> int:
        """Re-randomize v_sub rows whose norm collapsed below ``tol``."""
        norms = self.v_sub.norm(dim=1)
        bad = torch.nonzero(norms < tol).flatten()
        for i in bad.tolist():
            v = torch.randn(self.k, generator=generator, dtype=torch.float64)
            self.v_sub[i] = (v / v.norm()).to(self.v_sub.dtype)
        return len(bad)

    @torch.no_grad()
    def set_directions(self, directions) -> None:
        """Load W0 directions (m, n) by projecting them onto the subspace."""
        dirs = torch.as_tensor(directions, dtype=torch.float64)
        if dirs.shape != (self.m, self.basis.n):
            raise ValueError(f"expected directions of shape {(self.m, self.basis.n)}, got {tuple(dirs.shape)}")
        coeffs = dirs @ torch.as_tensor(self.basis.components[:, :self.k], dtype=torch.float64)
        if torch.any(coeffs.norm(dim=1) < 1e-8):
            raise ValueError("a frozen direction has no component in the informative subspace")
        self.v_sub.copy_(coeffs.to(self.v_sub.dtype))
