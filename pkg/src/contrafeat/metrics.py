"""Discovery metrics (attribute-change matrix, S_disen, N_discov) and MIG / FactorVAE score."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

log = logging.getLogger(__name__)

EPS_ROW = 1e-8
EPS_TIE = 1e-6


@dataclass
class AttributeChangeMatrix:
    A: np.ndarray
    A_raw: np.ndarray
    sample_count: int
    dead_rows: list[int] = field(default_factory=list)

    @classmethod
    def from_raw(cls, raw, sample_count: int = 1) -> "AttributeChangeMatrix":
        raw = np.abs(np.asarray(raw, dtype=np.float64))
        if raw.ndim != 2:
            raise ValueError("attribute-change matrix must be 2-D")
        row_max = raw.max(axis=1)
        dead = row_max < EPS_ROW
        safe = np.where(dead, 1.0, row_max)
        A = np.where(dead[:, None], 0.0, raw / safe[:, None])
        return cls(A=A, A_raw=raw, sample_count=sample_count, dead_rows=np.flatnonzero(dead).tolist())

    def live(self) -> np.ndarray:
        keep = np.ones(self.A.shape[0], dtype=bool)
        keep[self.dead_rows] = False
        return self.A[keep]

    def report(self) -> dict:
        return {
            "S_disen": s_disen(self),
            "N_discov": n_discov(self),
            "A": self.A.tolist(),
            "dead_rows": list(self.dead_rows),
        }


def attribute_change_matrix(modifications: torch.Tensor, world, N: int = 100,
                            generator: torch.Generator | None = None) -> AttributeChangeMatrix:
    """Mean absolute oracle-factor change of each modification (m, K, n) over N codes."""
    if N < 1:
        raise ValueError("N must be >= 1")
    mods = torch.as_tensor(modifications, dtype=torch.float64)
    world64 = world if world.dtype == torch.float64 else world.to(torch.float64)
    w = world64.sample_codes(N, generator)
    base = world64.read_factors(w)
    rows = []
    for mod in mods:
        rows.append((world64.read_factors(w + mod) - base).abs().mean(0))
    return AttributeChangeMatrix.from_raw(torch.stack(rows).numpy(), sample_count=N)


def _as_matrix(A) -> np.ndarray:
    if isinstance(A, AttributeChangeMatrix):
        return A.live()
    A = np.asarray(A, dtype=np.float64)
    return A[A.max(axis=1) >= EPS_ROW]


def s_disen(A) -> float:
    """Mean over live rows of (largest - second largest) entry."""
    rows = _as_matrix(A)
    if rows.shape[0] == 0:
        raise ValueError("all rows of the attribute-change matrix are dead")
    if rows.shape[1] < 2:
        return float(np.mean(rows[:, 0]))
    top2 = -np.sort(-rows, axis=1)[:, :2]
    return float(np.mean(top2[:, 0] - top2[:, 1]))


def n_discov(A) -> int:
    """Number of columns that reach a row maximum (value >= 1 - EPS_TIE somewhere)."""
    rows = _as_matrix(A)
    if rows.shape[0] == 0:
        return 0
    return int(np.sum(np.any(rows >= 1.0 - EPS_TIE, axis=0)))


# -- MIG / FactorVAE metric ------------------------------------------------------

def _discretize(x: np.ndarray, bins: int) -> np.ndarray:
    """Equal-width binning per column into integer labels 0..bins-1."""
    out = np.zeros(x.shape, dtype=np.int64)
    for j in range(x.shape[1]):
        col = x[:, j]
        lo, hi = col.min(), col.max()
        if hi <= lo:
            continue
        edges = np.linspace(lo, hi, bins + 1)[1:-1]
        out[:, j] = np.digitize(col, edges)
    return out


def _entropy(labels: np.ndarray) -> float:
    counts = np.bincount(labels)
    prob = counts[counts > 0] / labels.size
    return float(-(prob * np.log(prob)).sum())


def _mutual_info(a: np.ndarray, b: np.ndarray) -> float:
    joint = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(joint, (a, b), 1.0)
    joint /= a.size
    pa = joint.sum(1, keepdims=True)
    pb = joint.sum(0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


def mig(codes, factors, bins: int = 20) -> float:
    """Mutual information gap on binned codes (N, q) and factors (N, p)."""
    codes = np.asarray(codes, dtype=np.float64)
    factors = np.asarray(factors, dtype=np.float64)
    if codes.ndim != 2 or factors.ndim != 2 or codes.shape[0] != factors.shape[0]:
        raise ValueError("codes and factors must be 2-D with the same number of rows")
    if codes.shape[1] < 2:
        raise ValueError("MIG needs at least two code dimensions")
    c = _discretize(codes, bins)
    f = _discretize(factors, bins)
    gaps = []
    for i in range(f.shape[1]):
        h = _entropy(f[:, i])
        if h <= 0.0:
            warnings.warn(f"factor {i} has zero entropy; excluded from MIG", RuntimeWarning, stacklevel=2)
            continue
        mi = np.sort([_mutual_info(c[:, j], f[:, i]) for j in range(c.shape[1])])[::-1]
        gaps.append((mi[0] - mi[1]) / h)
    if not gaps:
        raise ValueError("every factor has zero entropy")
    return float(np.mean(gaps))


def fvm(encode, sample_factors, p: int, votes: int = 500, batch: int = 64, eval_votes: int | None = None,
        generator: np.random.Generator | None = None, std_samples: int = 10_000,
        prune_threshold: float = 0.05) -> float:
    """FactorVAE metric: majority-vote accuracy of argmin normalized code variance.

    ``encode(factors) -> codes`` maps an (N, p) factor matrix to (N, q) codes;
    ``sample_factors(count, rng) -> (count, p)`` draws independent factors.
    Votes are collected twice, once to fit the table and once to score it.
    """
    rng = generator if generator is not None else np.random.default_rng(0)
    eval_votes = votes if eval_votes is None else eval_votes
    codes = np.asarray(encode(sample_factors(std_samples, rng)), dtype=np.float64)
    scale = codes.std(axis=0)
    active = scale ** 2 >= prune_threshold
    if not active.any():
        return 0.0
    active_idx = np.flatnonzero(active)

    def collect(count):
        pairs = np.zeros((count, 2), dtype=np.int64)
        for v in range(count):
            k = int(rng.integers(p))
            f = sample_factors(batch, rng)
            f[:, k] = f[0, k]
            z = np.asarray(encode(f), dtype=np.float64)[:, active_idx] / scale[active_idx]
            pairs[v] = (int(np.argmin(z.var(axis=0, ddof=1))), k)
        return pairs

    table = np.zeros((active_idx.size, p), dtype=np.int64)
    for dim, k in collect(votes):
        table[dim, k] += 1
    guess = table.argmax(axis=1)
    test = collect(eval_votes)
    return float(np.mean(guess[test[:, 0]] == test[:, 1]))
