"""Feature, class-weight and prototype statistics.

Distance and sparsity work on l2-normalised features (rows are re-normalised
defensively); coding length, redundancy and spectra use features as given.
"""

from __future__ import annotations

from typing import List, NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from . import numkit


class AnalysisConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    every: int = 10
    pair_budget: int = 100_000
    sparsity_eps: float = 1e-5
    coding_precision: float = 0.5
    seed: int = 0


def _unit_rows(x) -> np.ndarray:
    return numkit.l2_normalize(np.asarray(x, dtype=np.float64))


def _tri_pairs(k: np.ndarray, n: int):
    """Map linear indices of the strict upper triangle of an n x n matrix to (i, j)."""
    k = np.asarray(k, dtype=np.int64)
    i = n - 2 - np.floor(np.sqrt(-8 * k + 4 * n * (n - 1) - 7) / 2.0 - 0.5).astype(np.int64)
    j = k + i + 1 - n * (n - 1) // 2 + (n - i) * ((n - i) - 1) // 2
    return i, j


def _pair_distances(x: np.ndarray, idx: np.ndarray, budget: int, rng: np.random.Generator) -> np.ndarray:
    """Distances over all pairs of rows ``idx``, or ``budget`` sampled pairs."""
    n = len(idx)
    total = n * (n - 1) // 2
    if total <= budget:
        i, j = np.triu_indices(n, k=1)
    else:
        i, j = _tri_pairs(rng.choice(total, size=budget, replace=False), n)
    diff = x[idx[i]] - x[idx[j]]
    return np.sqrt(np.sum(diff * diff, axis=1))


def pairwise_distance(features, labels=None, mode: str = "intra_class", pair_budget: int = 100_000,
                      seed: int = 0) -> float:
    """Mean l2 distance between same-class pairs or between all pairs."""
    x = _unit_rows(features)
    if len(x) < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    if mode == "all_sample":
        return float(_pair_distances(x, np.arange(len(x)), pair_budget, rng).mean())
    if mode != "intra_class":
        raise ValueError(f"unknown mode {mode!r}")
    labels = np.asarray(labels)
    groups = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    groups = [g for g in groups if len(g) > 1]
    if not groups:
        raise ValueError("every class has a single sample: no intra-class pairs")
    sizes = np.array([len(g) * (len(g) - 1) // 2 for g in groups])
    total = int(sizes.sum())
    if total <= pair_budget:
        d = np.concatenate([_pair_distances(x, g, total, rng) for g in groups])
        return float(d.mean())
    picks = np.sort(rng.choice(total, size=pair_budget, replace=False))
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for g, lo, hi in zip(groups, bounds[:-1], bounds[1:]):
        local = picks[(picks >= lo) & (picks < hi)] - lo
        if local.size:
            i, j = _tri_pairs(local, len(g))
            diff = x[g[i]] - x[g[j]]
            out.append(np.sqrt(np.sum(diff * diff, axis=1)))
    return float(np.concatenate(out).mean())


def sparsity_ratio(features, eps: float = 1e-5) -> float:
    """Fraction of entries of the normalised features with magnitude below eps."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = _unit_rows(features)
    return float(np.mean(np.abs(x) < eps))


def coding_length(x, precision: float = 0.5) -> float:
    """``0.5 * logdet(I_d + d / (N * precision) * X^T X)``, natural log."""
    if precision <= 0:
        raise ValueError("precision must be positive")
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n == 0:
        return 0.0
    s = np.eye(d) + (d / (n * precision)) * (x.T @ x)
    return 0.5 * numkit.logdet_psd(s)


def redundancy(x, return_flags: bool = False):
    """Mean absolute Pearson correlation over all (i, j) feature pairs, diagonal included.

    Zero-variance columns count as uncorrelated with everything, themselves
    included; ``return_flags`` also returns how many such columns there were.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    corr, degenerate = numkit.correlation_matrix(x)
    value = float(np.abs(corr).sum() / x.shape[1] ** 2)
    return (value, int(degenerate.sum())) if return_flags else value


def singular_spectrum(x) -> np.ndarray:
    """Singular values of X normalised to sum to one, in decreasing order."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n < 1:
        raise ValueError("need at least one sample")
    w, _ = numkit.sym_eigh(x.T @ x)
    sv = np.sqrt(np.clip(w, 0.0, None))[: min(n, d)]
    total = sv.sum()
    if total <= 0:
        raise ValueError("all-zero feature matrix has no spectrum")
    return sv / total


class GradientStats(NamedTuple):
    mean_abs_cos: float
    std: float
    frobenius: float
    n_zero_rows: int


def gradient_stats(grad_W, pair_budget: int = 100_000, seed: int = 0) -> GradientStats:
    """Mean |cosine| between per-class gradient rows, plus element std and Frobenius norm."""
    g = np.asarray(grad_W, dtype=np.float64)
    if g.shape[0] < 2:
        raise ValueError("need at least two classes")
    norms = np.sqrt(np.sum(g * g, axis=1))
    nonzero = np.flatnonzero(norms > 0)
    if nonzero.size < 2:
        raise ValueError("fewer than two non-zero gradient rows: similarity undefined")
    unit = g[nonzero] / norms[nonzero, None]
    n = len(nonzero)
    total = n * (n - 1) // 2
    if total <= pair_budget:
        i, j = np.triu_indices(n, k=1)
    else:
        i, j = _tri_pairs(np.random.default_rng(seed).choice(total, size=pair_budget, replace=False), n)
    cos = np.abs(np.sum(unit[i] * unit[j], axis=1))
    return GradientStats(float(cos.mean()), float(g.std()), float(np.sqrt(np.sum(g * g))),
                         int(g.shape[0] - n))


def drift(prev, curr) -> float:
    """Frobenius norm between row-normalised matrices (class weights or prototypes)."""
    prev = np.asarray(prev, dtype=np.float64)
    curr = np.asarray(curr, dtype=np.float64)
    if prev.shape != curr.shape:
        raise ValueError(f"shape mismatch {prev.shape} vs {curr.shape}")
    for m in (prev, curr):
        if np.any(np.sum(m * m, axis=1) == 0):
            raise ValueError("zero row: cannot normalise")
    diff = numkit.l2_normalize(curr) - numkit.l2_normalize(prev)
    return float(np.sqrt(np.sum(diff * diff)))


def nearest_prototypes(prototypes, query: int, k: int) -> List[int]:
    """Top-k classes by cosine similarity to ``query`` (excluded); ties by index."""
    u = _unit_rows(prototypes)
    n = len(u)
    if not 0 <= query < n:
        raise ValueError("query class out of range")
    if k >= n:
        raise ValueError(f"k must be < number of classes ({n})")
    sims = u @ u[query]
    order = [c for c in np.lexsort((np.arange(n), -sims)) if c != query]
    return [int(c) for c in order[:k]]


def analyze_features(features, labels, cfg: Optional[AnalysisConfig] = None) -> dict:
    """All per-dataset metrics for one feature matrix."""
    cfg = cfg or AnalysisConfig()
    red, flagged = redundancy(features, return_flags=True)
    return {
        "intra_class_distance": pairwise_distance(features, labels, "intra_class", cfg.pair_budget, cfg.seed),
        "all_sample_distance": pairwise_distance(features, labels, "all_sample", cfg.pair_budget, cfg.seed),
        "sparsity_ratio": sparsity_ratio(features, cfg.sparsity_eps),
        "coding_length": coding_length(features, cfg.coding_precision),
        "redundancy": red,
        "redundancy_zero_variance_columns": flagged,
        "singular_spectrum": singular_spectrum(features).tolist(),
    }
