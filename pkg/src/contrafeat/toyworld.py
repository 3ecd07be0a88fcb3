"""Differentiable stand-in for a layered generator and a frozen feature extractor.

The world has six ground-truth factors in three groups, placed on the first,
middle and last of the K W-space layers (layers 0, 1, 2 when K = 3; 0, 2, 4
when K = 5, leaving empty buffer layers between groups):

    first:  pos_x, pos_y          (blob center)
    middle: radius, blob_hue      (blob shape / color)
    last:   bg_hue, bg_brightness (background)

Each factor is a linear read ``a_i . w[layer(i)]`` of the extended code. Reads
sharing a layer are orthonormal. All six reads live in a common 4-dimensional
slice of the mapping's column space, so no single W0 direction applied to
every layer can move one factor alone; layer selection is needed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

FACTOR_NAMES = ("pos_x", "pos_y", "radius", "blob_hue", "bg_hue", "bg_brightness")
FACTOR_GROUPS = ((0, 1), (2, 3), (4, 5))

READ_RANK = 4
SINGULAR_MAX, SINGULAR_MIN = 3.0, 0.05
EXTRACTOR_CHANNELS = (8, 16, 32)
EXTRACTOR_GAIN = 1.5

# render constants; FACTOR_GAIN scales raw factor values before the render
# nonlinearities and is tuned so a unit factor change moves the image by a
# comparable amount for every factor
POS_RANGE = 0.5
RADIUS_BASE, RADIUS_RANGE = 0.05, 0.025
BLOB_HUE0, BG_HUE0 = 0.0, 2.0
BLOB_SATURATION = 0.8
BG_SATURATION = 0.35
BRIGHT_RANGE = 0.45
# background brightness fades from the top edge down and background tint from the
# bottom edge up, each to this fraction at the far edge
LIGHT_FLOOR = 0.0
FACTOR_GAIN = (0.00927, 0.00915, 0.106, 0.0743, 0.0116, 0.00633)


@dataclass(frozen=True)
class ToyWorldSpec:
    z_dim: int = 8
    n: int = 16
    k_layers: int = 3
    image_size: int = 32
    stages: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.z_dim < 1 or self.n < self.z_dim:
            raise ValueError("need 1 <= z_dim <= n")
        if self.z_dim < READ_RANK:
            raise ValueError(f"z_dim must be >= {READ_RANK}")
        if self.k_layers < len(FACTOR_GROUPS):
            raise ValueError(f"k_layers must be >= {len(FACTOR_GROUPS)}")
        if not 1 <= self.stages <= len(EXTRACTOR_CHANNELS):
            raise ValueError(f"stages must be in 1..{len(EXTRACTOR_CHANNELS)}")
        if self.image_size < 2 ** self.stages:
            raise ValueError("image too small for the number of extractor stages")


def _gram_schmidt(vectors: np.ndarray) -> np.ndarray:
    out = []
    for v in vectors:
        for u in out:
            v = v - (v @ u) * u
        out.append(v / np.linalg.norm(v))
    return np.stack(out)


class ToyWorld:
    """Frozen generator + extractor built deterministically from a spec."""

    def __init__(self, spec: ToyWorldSpec = ToyWorldSpec(), dtype=torch.float32):
        self.spec = spec
        self.dtype = dtype
        rng = np.random.default_rng(spec.seed)
        u, _ = np.linalg.qr(rng.standard_normal((spec.n, spec.z_dim)))
        v, _ = np.linalg.qr(rng.standard_normal((spec.z_dim, spec.z_dim)))
        self.singular_values = np.geomspace(SINGULAR_MAX, SINGULAR_MIN, spec.z_dim)
        mapping = u @ np.diag(self.singular_values) @ v.T

        # factor reads: Gram-Schmidt within a layer, all inside span(u[:, :READ_RANK])
        slice_basis = u[:, :READ_RANK]
        reads = []
        for group in FACTOR_GROUPS:
            raw = rng.standard_normal((len(group), READ_RANK)) @ slice_basis.T
            reads.append(_gram_schmidt(raw))
        reads = np.concatenate(reads)

        layer_of_group = np.round(np.linspace(0, spec.k_layers - 1, len(FACTOR_GROUPS))).astype(int)
        self.factor_layers = tuple(int(layer_of_group[g]) for g, grp in enumerate(FACTOR_GROUPS) for _ in grp)

        weights = []
        c_in = 3
        for c_out in EXTRACTOR_CHANNELS[:spec.stages]:
            fan_in = c_in * 9
            std = math.sqrt(EXTRACTOR_GAIN / fan_in)
            weights.append(rng.standard_normal((c_out, c_in, 3, 3)) * std)
            c_in = c_out

        self.factor_gain = np.asarray(FACTOR_GAIN, dtype=np.float64)
        self._mapping64 = mapping
        self._reads64 = reads
        self.mapping = torch.as_tensor(mapping, dtype=dtype)
        self.reads = torch.as_tensor(reads, dtype=dtype)
        self.conv_weights = tuple(torch.as_tensor(w, dtype=dtype) for w in weights)
        self._layer_index = torch.as_tensor(self.factor_layers)
        # analytic std of each factor under w = broadcast(M z), z ~ N(0, I)
        self.factor_std = np.sqrt(np.sum((reads @ mapping) ** 2, axis=1))
        size = spec.image_size
        coords = (torch.arange(size, dtype=torch.float64) + 0.5) / size * 2.0 - 1.0
        self._grid_y, self._grid_x = (g.to(dtype) for g in torch.meshgrid(coords, coords, indexing="ij"))
        self._light = LIGHT_FLOOR + (1.0 - LIGHT_FLOOR) * (1.0 - self._grid_y) / 2.0
        self._tint = LIGHT_FLOOR + (1.0 - LIGHT_FLOOR) * (1.0 + self._grid_y) / 2.0

    @property
    def p(self) -> int:
        return len(FACTOR_NAMES)

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def k_layers(self) -> int:
        return self.spec.k_layers

    def to(self, dtype) -> "ToyWorld":
        return ToyWorld(self.spec, dtype=dtype)

    # -- generator ---------------------------------------------------------
    def sample_z(self, count: int, generator: torch.Generator | None = None) -> torch.Tensor:
        return torch.randn(count, self.spec.z_dim, generator=generator, dtype=torch.float64).to(self.dtype)

    def map_latent(self, z) -> torch.Tensor:
        z = torch.as_tensor(z, dtype=self.dtype)
        return z @ self.mapping.T

    def sample_codes(self, count: int, generator: torch.Generator | None = None) -> torch.Tensor:
        """Extended codes broadcast from freshly mapped W0 samples, (count, K, n)."""
        w0 = self.map_latent(self.sample_z(count, generator))
        return w0.unsqueeze(1).expand(count, self.k_layers, self.n).clone()

    def read_factors(self, w: torch.Tensor) -> torch.Tensor:
        """(..., K, n) -> (..., p) factor values."""
        if w.shape[-2:] != (self.k_layers, self.n):
            raise ValueError(f"expected code shape (..., {self.k_layers}, {self.n}), got {tuple(w.shape)}")
        rows = w[..., self._layer_index, :]
        return (rows * self.reads.to(w.dtype)).sum(-1)

    def sample_factors(self, count: int, generator: torch.Generator | None = None) -> torch.Tensor:
        """Independent factor draws with each factor's marginal std, (count, p)."""
        eps = torch.randn(count, self.p, generator=generator, dtype=torch.float64)
        return (eps * torch.as_tensor(self.factor_std)).to(self.dtype)

    def sample_wide_factors(self, count: int, generator: torch.Generator | None = None) -> torch.Tensor:
        """Independent factors spread over the renderer's working range (unit std after gain)."""
        eps = torch.randn(count, self.p, generator=generator, dtype=torch.float64)
        return (eps / torch.as_tensor(self.factor_gain)).to(self.dtype)

    def codes_from_factors(self, factors: torch.Tensor) -> torch.Tensor:
        """Minimal-norm extended codes whose reads equal ``factors`` (..., p)."""
        factors = torch.as_tensor(factors, dtype=self.dtype)
        w = torch.zeros(*factors.shape[:-1], self.k_layers, self.n, dtype=self.dtype)
        for i, layer in enumerate(self.factor_layers):
            w[..., layer, :] += factors[..., i:i + 1] * self.reads[i]
        return w

    def oracle_modifications(self, strength: float = 1.0) -> torch.Tensor:
        """Ground-truth modifications (p, K, n): read a_i placed in layer(i) only."""
        return self.codes_from_factors(strength * torch.eye(self.p, dtype=self.dtype))

    def render_factors(self, f: torch.Tensor) -> torch.Tensor:
        """Factor values (B, p) -> images (B, 3, H, W) in (-1, 1)."""
        u = f * torch.as_tensor(self.factor_gain, dtype=f.dtype)
        cx = POS_RANGE * torch.tanh(u[:, 0])
        cy = POS_RANGE * torch.tanh(u[:, 1])
        radius = RADIUS_BASE + RADIUS_RANGE * torch.tanh(u[:, 2])
        phases = torch.arange(3, dtype=f.dtype) * (2.0 * math.pi / 3.0)
        blob = BLOB_SATURATION * torch.cos(BLOB_HUE0 + u[:, 3:4] - phases)
        bright = BRIGHT_RANGE * torch.tanh(u[:, 5])[:, None, None, None] * self._light.to(f.dtype)
        tint = BG_SATURATION * torch.cos(BG_HUE0 + u[:, 4:5] - phases)[:, :, None, None] * self._tint.to(f.dtype)
        bg = tint + bright
        gx, gy = self._grid_x.to(f.dtype), self._grid_y.to(f.dtype)
        dist2 = (gx - cx[:, None, None]) ** 2 + (gy - cy[:, None, None]) ** 2
        alpha = torch.exp(-dist2 / (2.0 * radius[:, None, None] ** 2)).unsqueeze(1)
        img = alpha * blob[:, :, None, None] + (1.0 - alpha) * bg
        return torch.tanh(img)

    def render(self, w: torch.Tensor) -> torch.Tensor:
        """Extended codes (..., K, n) -> images (..., 3, H, W)."""
        lead = w.shape[:-2]
        f = self.read_factors(w).reshape(-1, self.p)
        img = self.render_factors(f)
        return img.reshape(*lead, *img.shape[1:])

    # -- extractor ---------------------------------------------------------
    def extract_features(self, img: torch.Tensor) -> list[torch.Tensor]:
        """Images (B, 3, H, W) -> list of stage maps (B, C_l, H_l, W_l)."""
        squeeze = img.dim() == 3
        x = img.unsqueeze(0) if squeeze else img
        feats = []
        for weight in self.conv_weights:
            x = torch.tanh(F.conv2d(x, weight.to(x.dtype), stride=2, padding=1))
            feats.append(x[0] if squeeze else x)
        return feats

    def features(self, w: torch.Tensor) -> list[torch.Tensor]:
        return self.extract_features(self.render(w))
