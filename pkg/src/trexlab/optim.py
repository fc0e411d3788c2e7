"""SGD with momentum and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Dict, Iterable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator


class OptimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base_lr: float = 0.1
    batch_size: int = 256
    epochs: int = 100
    warmup_epochs: int = 10
    momentum: float = 0.9
    weight_decay: float = 1e-4

    @model_validator(mode="after")
    def _check(self):
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("batch_size must be positive; epochs and warmup non-negative")
        if self.base_lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("invalid learning rate, weight decay or momentum")
        return self

    @property
    def peak_lr(self) -> float:
        """Linear scaling rule: base_lr * batch_size / 256."""
        return self.base_lr * self.batch_size / 256


def lr_at(step: int, peak: float, warmup_steps: int, total_steps: int) -> float:
    """Linear ramp 0 -> peak over the warmup, then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    warmup_steps = min(warmup_steps, total_steps)
    if step < warmup_steps:
        return peak * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return peak if step <= warmup_steps else 0.0
    progress = min(1.0, (step - warmup_steps) / span)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str) -> bool:
    """Batch-norm affine parameters are exempt from weight decay."""
    return not name.endswith((".gamma", ".beta"))


class SGD:
    """v <- momentum * v + (g + wd * p);  p <- p - lr * v."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0, frozen: Iterable[str] = ()):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.frozen = set(frozen)
        self.buffers: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> None:
        for name, grad in grads.items():
            if name in self.frozen:
                continue
            p = params[name]
            if grad.shape != p.shape:
                raise ValueError(f"gradient shape {grad.shape} does not match parameter {name} {p.shape}")
            d = grad + self.weight_decay * p if self.weight_decay and decays(name) else grad
            buf = self.buffers.get(name)
            if buf is None:
                buf = self.buffers[name] = np.zeros_like(p)
            buf *= self.momentum
            buf += d
            p -= lr * buf
