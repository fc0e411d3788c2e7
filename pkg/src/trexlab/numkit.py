"""Dense linear-algebra and statistics kernels.

Arrays are plain ``numpy.ndarray`` objects. The working float width is a
process-wide setting (``float32`` for training, ``float64`` for gradient checks
and analysis) read through :func:`get_dtype`.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Tuple

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32


class ContractError(ValueError):
    """An input violates an operation's precondition."""


def set_precision(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the global float width."""
    global _dtype
    saved = _dtype
    set_precision(name)
    try:
        yield
    finally:
        _dtype = saved


def asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=_dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def l2_normalize(v: np.ndarray, eps: float = 1e-12, axis: int = -1) -> np.ndarray:
    """Return ``v / max(||v||, eps)`` along ``axis``."""
    v = np.asarray(v)
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    return v / np.maximum(norm, eps)


def sym_eigh(s: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues sorted in descending order and the matching
    eigenvectors as columns. Always computed in float64.
    """
    a = np.array(s, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-6 * scale):
        raise ContractError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    d = a.shape[0]
    v = np.eye(d)
    total = np.linalg.norm(a)
    if d < 2 or total == 0.0:
        return _sorted(np.diag(a).copy(), v)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off < tol * total:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - sn * aq
                a[:, q] = sn * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - sn * rq
                a[q, :] = sn * rp + c * rq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
    return _sorted(np.diag(a).copy(), v)


def _sorted(w: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def logdet_psd(s: np.ndarray) -> float:
    """Natural log-determinant of ``I + PSD``; every eigenvalue must be >= 1."""
    w, _ = sym_eigh(s)
    if w.size and w[-1] < 1.0 - 1e-6:
        raise ContractError(f"eigenvalue {w[-1]:.3g} < 1: input is not identity plus PSD")
    return float(np.sum(np.log(np.maximum(w, 1.0 - 1e-6))))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Sample Pearson correlation; 0 when either input has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ContractError("pearson needs two 1-d arrays of equal length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    na = np.sqrt(np.dot(da, da))
    nb = np.sqrt(np.dot(db, db))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


def correlation_matrix(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Column-wise Pearson correlations of an N x d matrix.

    Zero-variance columns get a zero row/column (diagonal included). Returns the
    matrix and the boolean mask of degenerate columns.
    """
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0, keepdims=True)
    norms = np.sqrt(np.sum(centered * centered, axis=0))
    degenerate = norms == 0.0
    safe = np.where(degenerate, 1.0, norms)
    unit = centered / safe
    corr = np.clip(unit.T @ unit, -1.0, 1.0)
    corr[degenerate, :] = 0.0
    corr[:, degenerate] = 0.0
    return corr, degenerate
