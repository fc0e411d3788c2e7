"""Linear probes on frozen features and the log-odds transfer score."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import numkit
from .data import TEST, TRAIN, VAL
from .objectives import log_softmax


class ProbeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    trials: int = 30
    lr_range: Tuple[float, float] = (1e-2, 1e2)
    wd_range: Tuple[float, float] = (1e-10, 1e-6)
    epochs: int = 100
    batch_size: int = 1024
    momentum: float = 0.9
    l2_normalize_features: bool = True
    seeds: int = 5
    val_fraction: float = 0.2

    @model_validator(mode="after")
    def _check(self):
        if self.trials < 1 or self.seeds < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("trials, seeds, epochs and batch_size must be >= 1")
        for lo, hi in (self.lr_range, self.wd_range):
            if not 0 < lo <= hi:
                raise ValueError("search ranges must be positive with min <= max")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        return self


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    n_classes: int
    name: str = "features"
    config_hash: str = ""

    def part(self, *tags):
        idx = np.flatnonzero(np.isin(self.splits, tags))
        return self.features[idx], self.labels[idx]


def sgd_logistic(X: np.ndarray, y: np.ndarray, n_classes: int, lr: float, weight_decay: float, epochs: int,
                 batch_size: int, momentum: float, seed) -> Tuple[np.ndarray, np.ndarray, bool]:
    """Multinomial logistic regression by mini-batch SGD; returns (W, b, diverged)."""
    n, d = X.shape
    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    vW = np.zeros_like(W)
    vb = np.zeros_like(b)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    rng = np.random.default_rng(seed)
    full = batch_size >= n
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(epochs):
            # A single full batch needs no shuffling: the gradient is order-free.
            order = None if full else rng.permutation(n)
            for start in range(0, n, batch_size):
                if full:
                    xb, tb = X, onehot
                else:
                    idx = order[start:start + batch_size]
                    xb, tb = X[idx], onehot[idx]
                g = (np.exp(log_softmax(xb @ W + b)) - tb) / len(xb)
                vW *= momentum
                vW += xb.T @ g + weight_decay * W
                vb *= momentum
                vb += g.sum(axis=0)
                W -= lr * vW
                b -= lr * vb
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                return W, b, True
    return W, b, False


class LogisticProbe(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression trained by mini-batch SGD with momentum."""

    def __init__(self, lr=1.0, weight_decay=1e-8, epochs=100, batch_size=1024, momentum=0.9,
                 l2_normalize=True, random_state=0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.l2_normalize = l2_normalize
        self.random_state = random_state

    def _prep(self, X):
        X = np.asarray(X, dtype=np.float64)
        return numkit.l2_normalize(X) if self.l2_normalize else X

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        W, b, self.diverged_ = sgd_logistic(self._prep(X), y_idx, len(self.classes_), self.lr, self.weight_decay,
                                            self.epochs, self.batch_size, self.momentum, self.random_state)
        self.coef_ = W.T
        self.intercept_ = b
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = self._prep(check_array(X, dtype=np.float64))
        return X @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        with np.errstate(over="ignore", invalid="ignore"):
            return np.exp(log_softmax(self.decision_function(X)))

    def predict(self, X):
        scores = self.decision_function(X)
        if self.diverged_:
            scores = np.nan_to_num(scores, nan=-np.inf)
        return self.classes_[np.argmax(scores, axis=1)]


@dataclass
class ProbeResult:
    accuracy: float  # mean test accuracy over seeds
    lr: float  # chosen for the first seed
    weight_decay: float
    n_test: int
    per_seed: List[float] = field(default_factory=list)
    chosen: List[Tuple[float, float]] = field(default_factory=list)


def _stratified_val(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    val = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(len(idx) * fraction))
        k = min(max(k, 1), len(idx) - 1) if len(idx) > 1 else 0
        val[idx[:k]] = True
    return val


def linear_probe(fs: FeatureSet, cfg: Optional[ProbeConfig] = None, seed: int = 0) -> ProbeResult:
    """Random search over (lr, weight decay) on train/val, refit on train+val, test top-1."""
    cfg = cfg or ProbeConfig()
    X_pool, y_pool = fs.part(TRAIN, VAL)
    X_test, y_test = fs.part(TEST)
    X_pool = np.asarray(X_pool, dtype=np.float64)
    if cfg.l2_normalize_features:
        X_pool = numkit.l2_normalize(X_pool)
    if len(X_test) == 0:
        raise ValueError(f"{fs.name}: no test samples")
    missing = set(range(fs.n_classes)) - set(np.unique(fs.part(TRAIN)[1]).tolist())
    if missing:
        raise ValueError(f"{fs.name}: classes {sorted(missing)} have no training samples")
    fixed_val = np.isin(fs.splits[np.isin(fs.splits, (TRAIN, VAL))], (VAL,))
    accs, chosen = [], []
    for s in range(cfg.seeds):
        rng = np.random.default_rng([seed, s])
        is_val = fixed_val if fixed_val.any() else _stratified_val(y_pool, cfg.val_fraction, rng)
        Xtr, ytr, Xva, yva = X_pool[~is_val], y_pool[~is_val], X_pool[is_val], y_pool[is_val]
        lrs = np.exp(rng.uniform(*np.log(cfg.lr_range), cfg.trials))
        wds = np.exp(rng.uniform(*np.log(cfg.wd_range), cfg.trials))
        best, best_score = 0, -1.0
        for t in range(cfg.trials):
            W, b, diverged = sgd_logistic(Xtr, ytr, fs.n_classes, lrs[t], wds[t], cfg.epochs, cfg.batch_size,
                                          cfg.momentum, seed + s)
            score = -1.0 if diverged else float(np.mean(np.argmax(Xva @ W + b, axis=1) == yva))
            if score > best_score:
                best, best_score = t, score
        final = _probe(cfg, lrs[best], wds[best], seed + s).fit(fs.part(TRAIN, VAL)[0], y_pool)
        accs.append(float(np.mean(final.predict(X_test) == y_test)))
        chosen.append((float(lrs[best]), float(wds[best])))
    return ProbeResult(float(np.mean(accs)), chosen[0][0], chosen[0][1], len(y_test), accs, chosen)


def _probe(cfg: ProbeConfig, lr: float, wd: float, seed: int) -> LogisticProbe:
    return LogisticProbe(lr=lr, weight_decay=wd, epochs=cfg.epochs, batch_size=cfg.batch_size,
                         momentum=cfg.momentum, l2_normalize=cfg.l2_normalize_features, random_state=seed)


def log_odds(p: float, n_test: Optional[int] = None) -> float:
    """ln(p / (1 - p)); with ``n_test`` perfect or zero scores are clamped to 1/(2N) from the ends."""
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"accuracy {p} outside [0, 1]")
    if n_test is not None:
        lo = 1.0 / (2 * n_test)
        p = min(max(p, lo), 1.0 - lo)
    elif p in (0.0, 1.0):
        raise ValueError("log odds of 0 or 1 is infinite; pass n_test to clamp")
    return math.log(p / (1.0 - p))


def is_clamped(p: float, n_test: int) -> bool:
    lo = 1.0 / (2 * n_test)
    return p < lo or p > 1.0 - lo


def mean_log_odds(accuracies: Sequence[float], n_tests: Optional[Sequence[int]] = None) -> float:
    if len(accuracies) == 0:
        raise ValueError("need at least one accuracy")
    if n_tests is None:
        return float(np.mean([log_odds(p) for p in accuracies]))
    return float(np.mean([log_odds(p, n) for p, n in zip(accuracies, n_tests)]))
