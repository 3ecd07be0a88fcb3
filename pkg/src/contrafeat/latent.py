"""Base/extended latent spaces and the PCA informative subspace."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class PcaBasis:
    """Eigendecomposition of the W0 sample covariance.

    ``components`` holds eigenvectors as columns, sorted by decreasing
    eigenvalue. Each column is sign-canonicalized so that its
    largest-magnitude entry is positive.
    """

    components: np.ndarray
    eigenvalues: np.ndarray
    mean: np.ndarray
    sample_count: int

    @property
    def n(self) -> int:
        return self.components.shape[0]

    def explained_variance_ratio(self) -> np.ndarray:
        total = self.eigenvalues.sum()
        if total <= 0:
            return np.zeros_like(self.eigenvalues)
        return self.eigenvalues / total

    def top(self, k: int, dtype=torch.float32) -> torch.Tensor:
        if not 1 <= k <= self.n:
            raise ValueError(f"k={k} out of range 1..{self.n}")
        return torch.as_tensor(self.components[:, :k], dtype=dtype)


def _canonicalize_signs(vectors: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def compute_pca(samples) -> PcaBasis:
    """Exact PCA of ``samples`` (N x n), centered, with ddof=1 covariance."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must be a 2-D array (N x n)")
    if x.shape[0] < 2:
        raise ValueError("PCA needs at least 2 samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples contain non-finite values")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = _canonicalize_signs(evecs[:, order])
    return PcaBasis(
        components=np.ascontiguousarray(evecs),
        eigenvalues=evals,
        mean=mean,
        sample_count=int(x.shape[0]),
    )


def project_direction(coeffs, basis: PcaBasis, k: int, length: float = 1.0,
                      eps: float = 0.0) -> torch.Tensor:
    """Map subspace coefficients (..., k) to W0 directions (..., n) of fixed length.

    Differentiable w.r.t. ``coeffs`` when it is a tensor.
    """
    coeffs = torch.as_tensor(coeffs)
    if not coeffs.is_floating_point():
        coeffs = coeffs.to(torch.get_default_dtype())
    if coeffs.shape[-1] != k:
        raise ValueError(f"coefficient length {coeffs.shape[-1]} != k={k}")
    if length <= 0:
        raise ValueError("length must be positive")
    v = coeffs @ basis.top(k, dtype=coeffs.dtype).T
    norm = v.norm(dim=-1, keepdim=True)
    if torch.any(norm <= eps):
        raise ValueError("zero coefficients cannot be normalized")
    return length * v / norm


def broadcast(w0, k_layers: int) -> torch.Tensor:
    """Duplicate W0 codes (..., n) across ``k_layers`` layers -> (..., k_layers, n)."""
    w0 = torch.as_tensor(w0)
    if k_layers < 1:
        raise ValueError("k_layers must be >= 1")
    return w0.unsqueeze(-2).expand(*w0.shape[:-1], k_layers, w0.shape[-1]).clone()
