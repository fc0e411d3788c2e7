"""Shared oracles for the unit and acceptance suites."""

from __future__ import annotations

import numpy as np

from trexlab import numkit
from trexlab.network import EncoderConfig, ModelConfig, Network, PredictorConfig, ProjectorConfig
from trexlab.objectives import (MemoryBank, compute_prototypes, cosine_ce_loss, oca_loss, ocm_loss,
                                vanilla_ce_loss)

LOSS_KINDS = ("cosine_ce", "vanilla_ce", "ocm", "oca")
FD_STEP = 1e-6
# Biases feeding a train-mode batch norm have an exact zero gradient; central
# differences return pure roundoff there, so the comparison gets an absolute floor.
ABS_FLOOR = 1e-8


def small_model(kind: str, predictor: bool, seed: int, n_classes: int = 3) -> Network:
    cfg = ModelConfig(
        encoder=EncoderConfig(pool_grid=2, hidden_widths=[4], output_dim=4),
        projector=ProjectorConfig(n_layers=1, hidden_dim=5, bottleneck_dim=3),
        predictor=PredictorConfig(enabled=predictor, hidden_dim=4),
    )
    classifier = "learned" if kind in ("cosine_ce", "vanilla_ce") else "absent"
    return Network(cfg, n_classes, classifier=classifier, normalize_output=kind != "vanilla_ce", seed=seed)


def gradcheck(kind: str, predictor: bool, seed: int, tau: float = 0.5) -> float:
    """Worst per-tensor relative error between analytic and central-difference gradients."""
    with numkit.precision("float64"):
        rng = np.random.default_rng(seed)
        c = 3
        net = small_model(kind, predictor, seed, c)
        crops = [rng.normal(size=(2, 2, 2, 3)), rng.normal(size=(2, 3, 3, 3))]
        labels = rng.integers(0, c, 4)
        bank = MemoryBank(8, net.embed_dim, np.float64)
        bank.push(numkit.l2_normalize(rng.normal(size=(8, net.embed_dim))), np.arange(8) % c)
        protos = compute_prototypes(bank, c)

        def evaluate():
            r = net.forward(crops, train=True, update_stats=False)
            e = r.embedding
            if kind == "cosine_ce":
                out = cosine_ce_loss(e, labels, net.params["classifier.weight"], tau)
            elif kind == "vanilla_ce":
                out = vanilla_ce_loss(e, labels, net.params["classifier.weight"])
            elif kind == "ocm":
                out = ocm_loss(e, labels, protos, tau)
            else:
                out = oca_loss(e, labels, bank, tau)
            return out, r

        out, r = evaluate()
        grads = net.backward(r.cache, out.grad_z)
        if out.grad_W is not None:
            grads["classifier.weight"] = out.grad_W
        worst = 0.0
        for name, p in net.params.items():
            num = np.zeros_like(p)
            for i in np.ndindex(p.shape):
                old = p[i]
                p[i] = old + FD_STEP
                up = evaluate()[0].loss
                p[i] = old - FD_STEP
                down = evaluate()[0].loss
                p[i] = old
                num[i] = (up - down) / (2 * FD_STEP)
            diff = np.linalg.norm(num - grads[name])
            scale = max(np.linalg.norm(num), np.linalg.norm(grads[name]))
            worst = max(worst, diff / max(scale, ABS_FLOOR) if diff > ABS_FLOOR else 0.0)
        return worst


def brute_force_ncm(z, labels, bank_z, bank_labels, n_classes, tau):
    """Nearest-class-mean softmax written with explicit loops."""
    total = 0.0
    count = 0
    means = {}
    for c in range(n_classes):
        members = [bank_z[i] for i in range(len(bank_z)) if bank_labels[i] == c]
        if members:
            m = np.sum(members, axis=0) / len(members)
            means[c] = m / np.linalg.norm(m)
    for i in range(len(z)):
        if labels[i] not in means:
            continue
        logits = {c: float(np.dot(z[i], u)) / tau for c, u in means.items()}
        top = max(logits.values())
        denom = sum(np.exp(v - top) for v in logits.values())
        total += -(logits[labels[i]] - top - np.log(denom))
        count += 1
    return total / count


def direct_nca(z, labels, bank_z, bank_labels, tau):
    total = 0.0
    count = 0
    for i in range(len(z)):
        sims = [float(np.dot(z[i], q)) / tau for q in bank_z]
        pos = [s for s, l in zip(sims, bank_labels) if l == labels[i]]
        if not pos:
            continue
        total += -np.log(sum(np.exp(s) for s in pos) / sum(np.exp(s) for s in sims))
        count += 1
    return total / count


class ReferenceQueue:
    """List-based FIFO used to check the ring buffer."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.items = []

    def push(self, z, labels):
        for row, lab in zip(z, labels):
            self.items.append((row.copy(), int(lab)))
        self.items = self.items[-self.capacity:]

    def contents(self):
        if not self.items:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return np.array([r for r, _ in self.items]), np.array([l for _, l in self.items])


def merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def synth(family=0, n_classes=4, per_class=(8, 0, 4), size=12, seed=0):
    return {"synthetic": {"family": family, "n_classes": n_classes, "per_class": list(per_class),
                          "image_size": size, "seed": seed}}


def tiny_doc(**overrides) -> dict:
    """A run config small enough to train in well under a second."""
    doc = {
        "data": {"train": synth(), "transfer": [synth(1)]},
        "augment": {"n_global": 1, "n_local": 2, "global_resolution": 8, "local_resolution": 4},
        "model": {"encoder": {"pool_grid": 2, "hidden_widths": [16], "output_dim": 8},
                  "projector": {"n_layers": 1, "hidden_dim": 16, "bottleneck_dim": 8},
                  "predictor": {"hidden_dim": 8}},
        "objective": {"kind": "ocm", "memory_per_class": 2, "ema_momentum": 0.9},
        "optimizer": {"batch_size": 8, "epochs": 3, "warmup_epochs": 1},
        "eval": {"short_side": 8, "probe": {"trials": 2, "seeds": 1, "epochs": 5}},
        "analysis": {"every": 2},
    }
    return merge(doc, overrides)


def tiny_config(**overrides):
    from trexlab.config import parse_config
    return parse_config(tiny_doc(**overrides))
