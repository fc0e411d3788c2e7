"""The supervised training loop: multi-crop batches, EMA branch, memory bank.

Every random draw is keyed on ``(seed, stream, epoch, sample, crop)``, so a
run is a pure function of its config and can be stopped and resumed at any
step without changing a single bit of the trajectory.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import analysis, numkit
from .augment import CropParams, crop_stream, render_crops, sample_crop_params
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .config import RunConfig, resolve
from .data import TRAIN, Dataset
from .network import EmaShadow, Network, NumericFault
from .objectives import (LossOutput, MemoryBank, compute_prototypes, cosine_ce_loss, oca_loss, ocm_loss,
                         vanilla_ce_loss)
from .optim import SGD, lr_at

TRAIN_STREAM, PRIMING_STREAM = 0, 1


class TrainingFault(RuntimeError):
    def __init__(self, step: int, layer: str, detail: str = ""):
        self.step = step
        self.layer = layer
        super().__init__(f"numeric fault at step {step} in {layer}{': ' + detail if detail else ''}")


@dataclass(frozen=True)
class MetricRecord:
    step: int
    epoch: int
    name: str
    value: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def classifier_mode(cfg: RunConfig) -> str:
    return "absent" if cfg.objective.uses_memory else cfg.objective.classifier


def build_network(cfg: RunConfig, n_classes: int) -> Network:
    return Network(cfg.model, n_classes, classifier=classifier_mode(cfg),
                   normalize_output=cfg.objective.kind != "vanilla_ce", seed=cfg.io.seed)


class Trainer:
    def __init__(self, config: RunConfig, dataset: Dataset):
        self.config = resolve(config, dataset.n_classes)
        numkit.set_precision(self.config.io.precision)
        self.dataset = dataset
        self.n_classes = dataset.n_classes
        self.train_idx = dataset.indices(TRAIN)
        if len(self.train_idx) == 0:
            raise ValueError("dataset has no training samples")
        opt = self.config.optimizer
        self.batch_size = opt.batch_size
        self.steps_per_epoch = max(1, len(self.train_idx) // opt.batch_size)
        self.total_steps = opt.epochs * self.steps_per_epoch
        self.warmup_steps = opt.warmup_epochs * self.steps_per_epoch
        self.seed = self.config.io.seed

        self.net = build_network(self.config, self.n_classes)
        self.opt = SGD(opt.momentum, opt.weight_decay, frozen=self.net.frozen)
        obj = self.config.objective
        self.ema: Optional[EmaShadow] = None
        self.bank: Optional[MemoryBank] = None
        if obj.uses_memory:
            self.ema = EmaShadow.from_network(self.net, obj.ema_momentum)
            self.bank = MemoryBank(obj.memory_size, self.net.embed_dim)
        self.step = 0
        self.primed = False
        self.records: List[MetricRecord] = []
        self._perm_epoch = -1
        self._perm = None

    # --- batches -----------------------------------------------------------

    def _epoch_order(self, epoch: int) -> np.ndarray:
        if epoch != self._perm_epoch:
            rng = np.random.default_rng([self.seed, TRAIN_STREAM, epoch])
            self._perm = self.train_idx[rng.permutation(len(self.train_idx))]
            self._perm_epoch = epoch
        return self._perm

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, pos = divmod(step, self.steps_per_epoch)
        order = self._epoch_order(epoch)
        return order[pos * self.batch_size:(pos + 1) * self.batch_size]

    def render(self, idx: np.ndarray, stream: int, epoch: int, n_global: int, n_local: int):
        """Crop groups for ``idx``: (global images, local images), crop-major order."""
        aug = self.config.augment
        _, h, w, _ = self.dataset.images.shape
        groups = []
        for first, count, scale, ops, res in ((0, n_global, aug.global_scale, aug.global_ops, aug.global_resolution),
                                             (aug.n_global, n_local, aug.local_scale, aug.local_ops,
                                              aug.local_resolution)):
            params: List[CropParams] = []
            src = []
            for k in range(first, first + count):
                for s in idx:
                    rng = crop_stream(self.seed, stream, epoch, int(s), k)
                    params.append(sample_crop_params(h, w, scale, ops, rng))
                    src.append(int(s))
            groups.append(render_crops(self.dataset.images, src, params, res, aug.mean, aug.std))
        return groups

    # --- memory ------------------------------------------------------------

    def prime(self) -> int:
        """Fill the bank with EMA embeddings of global crops before the first step."""
        if self.bank is None or self.primed:
            self.primed = True
            return 0
        n_g = self.config.augment.n_global
        n_batches = math.ceil(self.bank.capacity / (self.batch_size * n_g))
        order = np.random.default_rng([self.seed, PRIMING_STREAM]).permutation(self.train_idx)
        for j in range(n_batches):
            idx = order[(j * self.batch_size + np.arange(min(self.batch_size, len(order)))) % len(order)]
            globals_, _ = self.render(idx, PRIMING_STREAM, j, n_g, 0)
            z = self._ema_embed(globals_)
            self.bank.push(z, np.tile(self.dataset.labels[idx], n_g))
        self.primed = True
        return n_batches

    def _ema_embed(self, globals_: np.ndarray) -> np.ndarray:
        try:
            return self.ema.embed(self.net, [globals_])
        except NumericFault as err:
            raise TrainingFault(self.step, f"ema layer {err.layer} ({err.name})") from None

    # --- one step ------------------------------------------------------------

    def compute_loss(self, embedding: np.ndarray, labels: np.ndarray) -> LossOutput:
        obj = self.config.objective
        if obj.kind == "cosine_ce":
            return cosine_ce_loss(embedding, labels, self.net.params["classifier.weight"], obj.temperature)
        if obj.kind == "vanilla_ce":
            return vanilla_ce_loss(embedding, labels, self.net.params["classifier.weight"])
        if obj.kind == "ocm":
            return ocm_loss(embedding, labels, compute_prototypes(self.bank, self.n_classes), obj.temperature)
        return oca_loss(embedding, labels, self.bank, obj.temperature)

    def train_step(self) -> List[MetricRecord]:
        if not self.primed:
            self.prime()
        step = self.step
        epoch = step // self.steps_per_epoch
        aug = self.config.augment
        idx = self.batch_indices(step)
        labels = self.dataset.labels[idx]
        globals_, locals_ = self.render(idx, TRAIN_STREAM, epoch, aug.n_global, aug.n_local)
        all_labels = np.concatenate([np.tile(labels, aug.n_global), np.tile(labels, aug.n_local)])

        ema_z = self._ema_embed(globals_) if self.ema is not None else None
        try:
            out = self.net.forward([globals_, locals_], train=True)
        except NumericFault as err:
            raise TrainingFault(step, f"layer {err.layer} ({err.name})") from None
        loss = self.compute_loss(out.embedding, all_labels)
        if not np.isfinite(loss.loss):
            raise TrainingFault(step, "loss", f"value {loss.loss}")
        grads = self.net.backward(out.cache, loss.grad_z.astype(out.embedding.dtype))
        if loss.grad_W is not None and "classifier.weight" not in self.net.frozen:
            grads["classifier.weight"] = loss.grad_W.astype(self.net.params["classifier.weight"].dtype)

        hook = self.config.analysis.every > 0 and step % self.config.analysis.every == 0
        w_before = self.net.params["classifier.weight"].copy() if hook and "classifier.weight" in self.net.params \
            else None
        lr = lr_at(step, self.config.optimizer.peak_lr, self.warmup_steps, self.total_steps)
        self.opt.step(self.net.params, grads, lr)
        for k, v in self.net.params.items():
            if not np.all(np.isfinite(v)):
                raise TrainingFault(step, f"parameter {k}", "non-finite after update")

        u_before = None
        if self.ema is not None:
            self.ema.update(self.net)
            if hook:
                u_before = compute_prototypes(self.bank, self.n_classes)
            self.bank.push(ema_z, np.tile(labels, aug.n_global))

        recs = [
            MetricRecord(step, epoch, "loss", float(loss.loss)),
            MetricRecord(step, epoch, "lr", float(lr)),
        ]
        if loss.probs is not None and not self.config.objective.uses_memory:
            acc = float(np.mean(np.argmax(loss.probs, axis=1) == all_labels))
            recs.append(MetricRecord(step, epoch, "batch_acc", acc))
        if self.bank is not None:
            recs.append(MetricRecord(step, epoch, "skipped", float(loss.n_skipped)))
            recs.append(MetricRecord(step, epoch, "bank_fill", float(len(self.bank))))
        if hook:
            recs.extend(self._hook_records(step, epoch, loss, w_before, u_before))
        self.step += 1
        self.records.extend(recs)
        return recs

    def _hook_records(self, step, epoch, loss, w_before, u_before) -> List[MetricRecord]:
        cfg = self.config.analysis
        recs = []
        if loss.grad_W is not None:
            try:
                gs = analysis.gradient_stats(loss.grad_W, cfg.pair_budget, cfg.seed)
                recs += [MetricRecord(step, epoch, "grad_abs_cos_sim", gs.mean_abs_cos),
                         MetricRecord(step, epoch, "grad_std", gs.std),
                         MetricRecord(step, epoch, "grad_fro", gs.frobenius)]
            except ValueError:
                pass
        if w_before is not None:
            recs.append(MetricRecord(step, epoch, "delta_W",
                                     analysis.drift(w_before, self.net.params["classifier.weight"])))
        if u_before is not None:
            u_after = compute_prototypes(self.bank, self.n_classes)
            both = u_before.present & u_after.present
            if both.sum() > 0:
                recs.append(MetricRecord(step, epoch, "delta_U",
                                         analysis.drift(u_before.means[both], u_after.means[both])))
        return recs

    def run(self, until_step: Optional[int] = None,
            callback: Optional[Callable[["Trainer", List[MetricRecord]], None]] = None) -> List[MetricRecord]:
        """Train up to ``until_step`` (default: the end of the schedule)."""
        numkit.set_precision(self.config.io.precision)
        end = self.total_steps if until_step is None else min(until_step, self.total_steps)
        out = []
        while self.step < end:
            recs = self.train_step()
            out.extend(recs)
            if callback is not None:
                callback(self, recs)
        return out

    @property
    def finished(self) -> bool:
        return self.step >= self.total_steps

    # --- persistence ---------------------------------------------------------

    def state_tensors(self) -> Dict[str, np.ndarray]:
        t = {f"param/{k}": v for k, v in self.net.params.items()}
        t.update({f"buffer/{k}": v for k, v in self.net.buffers.items()})
        t.update({f"opt/{k}": v for k, v in self.opt.buffers.items()})
        if self.ema is not None:
            t.update({f"ema.param/{k}": v for k, v in self.ema.params.items()})
            t.update({f"ema.buffer/{k}": v for k, v in self.ema.buffers.items()})
        if self.bank is not None:
            t.update({f"bank/{k}": v for k, v in self.bank.state().items()})
        t["state/step"] = np.array([self.step], dtype=np.int64)
        t["state/primed"] = np.array([int(self.primed)], dtype=np.int64)
        return t

    def save(self, path) -> None:
        meta = {"run_config": self.config.to_dict(), "training_hash": self.config.training_hash(),
                "n_classes": self.n_classes, "step": self.step}
        write_checkpoint(path, meta, self.state_tensors())

    def load(self, path) -> None:
        meta, _, tensors = read_checkpoint(path)
        if meta.get("training_hash") != self.config.training_hash():
            raise CheckpointError(f"{path}: checkpoint was written by a different training config")
        self.load_state(tensors)

    def load_state(self, tensors: Dict[str, np.ndarray]) -> None:
        def take(prefix, target):
            for k in target:
                key = prefix + k
                if key not in tensors:
                    raise CheckpointError(f"missing tensor {key}")
                target[k] = tensors[key].astype(target[k].dtype, copy=True)

        take("param/", self.net.params)
        take("buffer/", self.net.buffers)
        self.opt.buffers = {k[4:]: v.copy() for k, v in tensors.items() if k.startswith("opt/")}
        if self.ema is not None:
            take("ema.param/", self.ema.params)
            take("ema.buffer/", self.ema.buffers)
        if self.bank is not None:
            state = {k[5:]: v for k, v in tensors.items() if k.startswith("bank/")}
            self.bank = MemoryBank.from_state(state)
        self.step = int(tensors["state/step"][0])
        self.primed = bool(tensors["state/primed"][0])


def train(config: RunConfig, dataset: Dataset, callback=None):
    """Run a full schedule; returns the trainer (holding the final state) and all metric records."""
    trainer = Trainer(config, dataset)
    records = trainer.run(callback=callback)
    return trainer, records


def write_metrics(records, path, append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_metrics(path) -> List[MetricRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(MetricRecord(**json.loads(line)))
    return out


def load_network(path):
    """Rebuild the online network stored in a checkpoint. Returns (net, config, meta)."""
    meta, _, tensors = read_checkpoint(path)
    if "run_config" not in meta:
        raise CheckpointError(f"{path}: not a training checkpoint")
    cfg = RunConfig.model_validate(meta["run_config"])
    numkit.set_precision(cfg.io.precision)
    net = build_network(cfg, int(meta["n_classes"]))
    for k in net.params:
        net.params[k] = tensors[f"param/{k}"].astype(net.params[k].dtype, copy=True)
    for k in net.buffers:
        net.buffers[k] = tensors[f"buffer/{k}"].astype(net.buffers[k].dtype, copy=True)
    return net, cfg, meta
