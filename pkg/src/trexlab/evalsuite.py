"""Frozen-encoder transfer evaluation: features, probes, log odds, reports."""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from . import numkit
from .augment import eval_transform_batch
from .config import EvalConfig
from .data import Dataset
from .network import Network
from .probe import FeatureSet, ProbeConfig, is_clamped, linear_probe, log_odds
from .training import load_network

__all__ = ["FeatureSet", "extract_features", "transfer_report", "TransferReport", "ReportRow"]


def _load(checkpoint):
    if isinstance(checkpoint, Network):
        return checkpoint, None
    net, cfg, _ = load_network(checkpoint)
    return net, cfg


def extract_features(checkpoint: Union[str, Network], dataset: Dataset, short_side: Optional[int] = None,
                     batch_size: int = 256, mean=None, std=None) -> FeatureSet:
    """Encoder outputs (eval mode, eval transform) for every sample of ``dataset``.

    Projector, predictor and classifier are not used.
    """
    net, cfg = _load(checkpoint)
    return _extract(net, cfg, dataset, short_side, batch_size, mean, std)


def _extract(net, cfg, dataset, short_side, batch_size, mean, std) -> FeatureSet:
    if short_side is None:
        short_side = cfg.eval.short_side if cfg is not None else dataset.images.shape[1]
    if cfg is not None:
        mean = cfg.augment.mean if mean is None else mean
        std = cfg.augment.std if std is None else std
    kw = {} if mean is None else {"mean": mean, "std": std}
    chunks = []
    for start in range(0, len(dataset), batch_size):
        images = eval_transform_batch(dataset.images[start:start + batch_size], short_side, **kw)
        chunks.append(net.features(images, batch_size))
    dim = net.config.encoder.output_dim
    feats = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, dim), numkit.get_dtype())
    h = hashlib.sha256()
    for k in sorted(net.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(net.params[k]).tobytes())
    h.update(str((short_side, kw.get("mean"), kw.get("std"))).encode())
    return FeatureSet(feats, dataset.labels.copy(), dataset.splits.copy(), dataset.n_classes, dataset.name,
                      h.hexdigest()[:16])


@dataclass
class ReportRow:
    dataset: str
    role: str  # "train" for the training task, "transfer" otherwise
    accuracy: float
    log_odds: float
    clamped: bool
    n_test: int
    lr: float
    weight_decay: float


@dataclass
class TransferReport:
    rows: List[ReportRow] = field(default_factory=list)

    @property
    def transfer_rows(self) -> List[ReportRow]:
        return [r for r in self.rows if r.role == "transfer"]

    @property
    def train_accuracy(self) -> Optional[float]:
        for r in self.rows:
            if r.role == "train":
                return r.accuracy
        return None

    @property
    def mean_log_odds(self) -> float:
        rows = self.transfer_rows
        if not rows:
            raise ValueError("report has no transfer datasets")
        return float(np.mean([r.log_odds for r in rows]))

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "train_accuracy": self.train_accuracy,
            "mean_log_odds": self.mean_log_odds,
            "any_clamped": any(r.clamped for r in self.rows),
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        names = list(ReportRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.rows:
                w.writerow([getattr(r, n) for n in names])
            w.writerow(["mean_transfer", "summary", "", self.mean_log_odds, "", "", "", ""])

    @classmethod
    def from_dict(cls, d: dict) -> "TransferReport":
        return cls([ReportRow(**r) for r in d["rows"]])


def probe_row(fs: FeatureSet, role: str, cfg: ProbeConfig, seed: int) -> ReportRow:
    res = linear_probe(fs, cfg, seed)
    return ReportRow(fs.name, role, res.accuracy, log_odds(res.accuracy, res.n_test),
                     is_clamped(res.accuracy, res.n_test), res.n_test, res.lr, res.weight_decay)


def transfer_report(checkpoint, datasets: Sequence[Dataset], cfg: Optional[EvalConfig] = None,
                    seed: int = 0, train_task: bool = True) -> TransferReport:
    """Probe every dataset; with ``train_task`` the first one is the training task.

    The mean log odds is taken over the transfer datasets only.
    """
    if not datasets:
        raise ValueError("need at least one dataset")
    if train_task and len(datasets) < 2:
        raise ValueError("need at least one transfer dataset besides the training task")
    net, run_cfg = _load(checkpoint)
    cfg = cfg or (run_cfg.eval if run_cfg is not None else EvalConfig())
    report = TransferReport()
    hashes = set()
    for i, ds in enumerate(datasets):
        fs = _extract(net, run_cfg, ds, cfg.short_side, cfg.batch_size, None, None)
        hashes.add(fs.config_hash)
        role = "train" if train_task and i == 0 else "transfer"
        report.rows.append(probe_row(fs, role, cfg.probe, seed))
    if len(hashes) > 1:
        warnings.warn("feature sets were extracted with different configurations")
    return report
