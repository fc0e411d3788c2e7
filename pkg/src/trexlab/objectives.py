"""Training objectives, the memory bank and online class prototypes.

Every loss returns a :class:`LossOutput` holding the batch-mean loss and its
exact gradient with respect to the embeddings (and class weights when they
exist). Softmaxes use max-subtracted log-sum-exp throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from . import numkit


class EmptyMemoryError(RuntimeError):
    """No sample in the batch could be scored against the memory bank."""


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["cosine_ce", "vanilla_ce", "ocm", "oca"] = "ocm"
    temperature: float = 0.1
    classifier: Literal["learned", "frozen_orthogonal"] = "learned"
    # None resolves to memory_per_class * n_classes.
    memory_size: Optional[int] = None
    memory_per_class: int = 8
    ema_momentum: float = 0.999

    @model_validator(mode="after")
    def _check(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("ema_momentum must lie in [0, 1]")
        if self.memory_size is not None and self.memory_size < 1:
            raise ValueError("memory_size must be positive")
        if self.memory_per_class < 1:
            raise ValueError("memory_per_class must be positive")
        return self

    @property
    def uses_memory(self) -> bool:
        return self.kind in ("ocm", "oca")

    @property
    def effective_temperature(self) -> float:
        return 1.0 if self.kind == "vanilla_ce" else self.temperature

    def capacity(self, n_classes: int) -> int:
        return self.memory_size if self.memory_size is not None else self.memory_per_class * n_classes


class LossOutput(NamedTuple):
    loss: float
    grad_z: np.ndarray
    grad_W: Optional[np.ndarray] = None
    n_skipped: int = 0
    probs: Optional[np.ndarray] = None


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def logsumexp(logits: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    top = logits.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return (top + np.log(np.exp(logits - top).sum(axis=1, keepdims=True)))[:, 0]


def _check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    return labels


def _softmax_ce(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = len(labels)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    probs = np.exp(logp)
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    return float(loss), dlogits / n, probs


def cosine_ce_loss(z: np.ndarray, labels, W: np.ndarray, tau: float) -> LossOutput:
    """Cross-entropy over ``z . w_c / (||w_c|| tau)``; rows of z are unit-norm."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    labels = _check_labels(labels, W.shape[0])
    norms = np.sqrt(np.sum(W * W, axis=1, keepdims=True))
    w_bar = W / norms
    loss, dlogits, probs = _softmax_ce(z @ w_bar.T / tau, labels)
    grad_z = dlogits @ w_bar / tau
    grad_wbar = dlogits.T @ z / tau
    grad_W = (grad_wbar - w_bar * np.sum(grad_wbar * w_bar, axis=1, keepdims=True)) / norms
    return LossOutput(loss, grad_z, grad_W, 0, probs)


def vanilla_ce_loss(z: np.ndarray, labels, W: np.ndarray) -> LossOutput:
    """Plain softmax cross-entropy on raw inner products ``z . w_c``."""
    labels = _check_labels(labels, W.shape[0])
    loss, dlogits, probs = _softmax_ce(z @ W.T, labels)
    return LossOutput(loss, dlogits @ W, dlogits.T @ z, 0, probs)


# --- memory bank and prototypes --------------------------------------------


class MemoryBank:
    """Fixed-capacity FIFO queue of unit-norm embeddings and their labels."""

    def __init__(self, capacity: int, dim: int, dtype=None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.z = np.zeros((self.capacity, self.dim), dtype=dtype or numkit.get_dtype())
        self.labels = np.full(self.capacity, -1, dtype=np.int64)
        self.cursor = 0
        self.count = 0

    def __len__(self) -> int:
        return self.count

    @property
    def full(self) -> bool:
        return self.count == self.capacity

    def push(self, z: np.ndarray, labels, source: str = "global") -> None:
        """Append rows oldest-first, overwriting the oldest entries when full.

        Only embeddings of global crops from the momentum branch belong here;
        any other ``source`` is refused.
        """
        if source != "global":
            raise ValueError(f"memory bank accepts global-crop embeddings only, got {source!r}")
        z = np.asarray(z)
        labels = np.asarray(labels, dtype=np.int64)
        if z.ndim != 2 or z.shape[1] != self.dim or len(labels) != len(z):
            raise ValueError(f"expected (n, {self.dim}) embeddings with n labels")
        tol = 1e-6 if z.dtype == np.float64 else 1e-5
        norms = np.sqrt(np.sum(np.asarray(z, np.float64) ** 2, axis=1))
        if np.any(np.abs(norms - 1.0) > tol):
            raise ValueError("memory bank entries must be unit-norm")
        n = len(z)
        if n >= self.capacity:
            z, labels = z[n - self.capacity:], labels[n - self.capacity:]
            self.cursor = (self.cursor + n - self.capacity) % self.capacity
            n = self.capacity
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.z[idx] = z
        self.labels[idx] = labels
        self.cursor = int((self.cursor + n) % self.capacity)
        self.count = min(self.capacity, self.count + n)

    def contents(self):
        """Stored (z, labels), oldest first."""
        if self.count < self.capacity:
            return self.z[:self.count].copy(), self.labels[:self.count].copy()
        idx = (self.cursor + np.arange(self.capacity)) % self.capacity
        return self.z[idx], self.labels[idx]

    def state(self) -> dict:
        return {
            "z": self.z.copy(),
            "labels": self.labels.copy(),
            "cursor": np.array([self.cursor], dtype=np.int64),
            "count": np.array([self.count], dtype=np.int64),
        }

    @classmethod
    def from_state(cls, state: dict) -> "MemoryBank":
        bank = cls(len(state["z"]), state["z"].shape[1], state["z"].dtype)
        bank.z[...] = state["z"]
        bank.labels[...] = state["labels"]
        bank.cursor = int(state["cursor"][0])
        bank.count = int(state["count"][0])
        return bank


@dataclass
class Prototypes:
    means: np.ndarray  # C x d_b, zero rows for absent classes
    normalized: np.ndarray  # C x d_b
    present: np.ndarray  # C bool
    counts: np.ndarray  # C int


def compute_prototypes(bank: MemoryBank, n_classes: int) -> Prototypes:
    z, labels = bank.contents()
    counts = np.bincount(labels, minlength=n_classes)[:n_classes]
    sums = np.zeros((n_classes, bank.dim), dtype=np.float64)
    np.add.at(sums, labels, z.astype(np.float64))
    present = counts > 0
    means = np.where(present[:, None], sums / np.maximum(counts, 1)[:, None], 0.0)
    normalized = numkit.l2_normalize(means)
    return Prototypes(means.astype(z.dtype), normalized.astype(z.dtype), present, counts)


def ocm_loss(z: np.ndarray, labels, protos: Prototypes, tau: float) -> LossOutput:
    """Cosine softmax against normalised class means of the present classes.

    Samples whose class has no entry in memory are skipped and counted.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    labels = _check_labels(labels, len(protos.present))
    present = np.flatnonzero(protos.present)
    if present.size == 0:
        raise EmptyMemoryError("memory bank holds no class")
    remap = np.full(len(protos.present), -1, dtype=np.int64)
    remap[present] = np.arange(present.size)
    local = remap[labels]
    keep = np.flatnonzero(local >= 0)
    if keep.size == 0:
        raise EmptyMemoryError("no sample in the batch has its class in memory")
    u_bar = protos.normalized[present]
    loss, dlogits, probs = _softmax_ce(z[keep] @ u_bar.T / tau, local[keep])
    grad_z = np.zeros_like(z)
    grad_z[keep] = dlogits @ u_bar / tau
    return LossOutput(loss, grad_z, None, int(len(labels) - keep.size), probs)


def oca_loss(z: np.ndarray, labels, bank: MemoryBank, tau: float) -> LossOutput:
    """Online NCA: log-probability mass of same-class memory entries."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    labels = np.asarray(labels, dtype=np.int64)
    q, q_labels = bank.contents()
    if len(q) == 0:
        raise EmptyMemoryError("memory bank is empty")
    positive = q_labels[None, :] == labels[:, None]
    keep = np.flatnonzero(positive.any(axis=1))
    if keep.size == 0:
        raise EmptyMemoryError("no sample in the batch has its class in memory")
    sims = z[keep] @ q.T / tau
    pos = positive[keep]
    lse_all = logsumexp(sims)
    lse_pos = logsumexp(sims, pos)
    loss = float(np.mean(lse_all - lse_pos))
    p_all = np.exp(sims - lse_all[:, None])
    p_pos = np.where(pos, np.exp(sims - lse_pos[:, None]), 0.0)
    grad_z = np.zeros_like(z)
    grad_z[keep] = ((p_all - p_pos) @ q) / (tau * keep.size)
    return LossOutput(loss, grad_z, None, int(len(labels) - keep.size), p_all)
