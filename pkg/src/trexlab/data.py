"""Datasets, the TRXD binary format, stratified splits and synthetic generators."""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VAL: "val", TEST: "test"}

TRXD_MAGIC = b"TRXD"
TRXD_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

N_SHAPES = N_HUES = N_FREQS = 4
N_TRIPLES = N_SHAPES * N_HUES * N_FREQS
# Fixed across generator seeds so every family offset owns a disjoint block.
_TRIPLE_ORDER_SEED = 7919


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W x 3, float32 in [0, 1]
    labels: np.ndarray  # N, int64
    splits: np.ndarray  # N, uint8 split tags
    n_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=np.uint8)
        n = len(self.images)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"images must be N x H x W x 3, got {self.images.shape}")
        if self.labels.shape != (n,) or self.splits.shape != (n,):
            raise ValueError("labels and splits must have one entry per image")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if n and self.splits.max() > TEST:
            raise ValueError("unknown split tag")

    def __len__(self) -> int:
        return len(self.labels)

    def indices(self, *tags: int) -> np.ndarray:
        return np.flatnonzero(np.isin(self.splits, tags))

    def subset(self, *tags: int) -> "Dataset":
        idx = self.indices(*tags)
        return Dataset(self.images[idx], self.labels[idx], self.splits[idx], self.n_classes, self.name)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.n_classes == other.n_classes
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.splits, other.splits)
        )


def save_trxd(dataset: Dataset, path) -> None:
    n, h, w, _ = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TRXD_MAGIC, TRXD_VERSION, n, dataset.n_classes, h, w))
        fh.write(dataset.images.astype("<f4").tobytes(order="C"))
        fh.write(dataset.labels.astype("<u4").tobytes())
        fh.write(dataset.splits.astype("u1").tobytes())


def load_trxd(path, name: str | None = None) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, n, c, h, w = _HEADER.unpack_from(raw, 0)
    if magic != TRXD_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != TRXD_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    n_pix = n * h * w * 3
    expected = _HEADER.size + 4 * n_pix + 4 * n + n
    if len(raw) < expected:
        raise DatasetFormatError(f"{path}: truncated ({len(raw)} of {expected} bytes)")
    if len(raw) > expected:
        raise DatasetFormatError(f"{path}: {len(raw) - expected} trailing bytes")
    off = _HEADER.size
    images = np.frombuffer(raw, dtype="<f4", count=n_pix, offset=off).reshape(n, h, w, 3)
    off += 4 * n_pix
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    splits = np.frombuffer(raw, dtype="u1", count=n, offset=off)
    if n and labels.max() >= c:
        raise DatasetFormatError(f"{path}: label {labels.max()} >= number of classes {c}")
    if n and splits.max() > TEST:
        raise DatasetFormatError(f"{path}: unknown split tag {splits.max()}")
    return Dataset(images.astype(np.float32), labels, splits.copy(), int(c), name or Path(path).stem)


def make_splits(dataset: Dataset, fractions: Sequence[float], seed: int) -> Dataset:
    """Stratified random re-split.

    Two fractions re-split the non-test pool into (train, val); three fractions
    re-split the whole dataset into (train, val, test).
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) not in (2, 3) or any(f < 0 for f in fractions):
        raise ValueError("fractions must be 2 or 3 non-negative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    pool = dataset.indices(TRAIN, VAL) if len(fractions) == 2 else np.arange(len(dataset))
    n_parts = sum(f > 0 for f in fractions)
    rng = np.random.default_rng(seed)
    splits = dataset.splits.copy()
    for c in range(dataset.n_classes):
        members = pool[dataset.labels[pool] == c]
        if len(members) == 0:
            continue
        if len(members) < n_parts:
            raise ValueError(f"class {c} has {len(members)} samples, fewer than {n_parts} splits")
        members = rng.permutation(members)
        counts = _apportion(len(members), fractions)
        start = 0
        for tag, count in enumerate(counts):
            splits[members[start:start + count]] = tag
            start += count
    return Dataset(dataset.images, dataset.labels, splits, dataset.n_classes, dataset.name)


def _apportion(n: int, fractions: Sequence[float]) -> list:
    counts = [int(np.floor(n * f)) for f in fractions]
    remainders = sorted(range(len(fractions)), key=lambda i: -(n * fractions[i] - counts[i]))
    for i in remainders[: n - sum(counts)]:
        counts[i] += 1
    # Every non-empty part keeps at least one sample.
    for i, f in enumerate(fractions):
        if f > 0 and counts[i] == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[i] += 1
    return counts


class SyntheticSpec(BaseModel):
    """Procedural dataset description.

    Each class is a (shape, hue band, stripe frequency) triple. Family ``k``
    owns triples ``[k * family_size, k * family_size + n_classes)`` of a fixed
    ordering of the 64 possible triples, so different families never share a
    class. ``per_class`` gives samples per class for (train, val, test).
    """

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    n_classes: int = 16
    per_class: Tuple[int, int, int] = (64, 0, 32)
    image_size: int = 32
    family: int = 0
    nuisance: float = 0.5
    family_size: int = 16
    name: str = ""

    @model_validator(mode="after")
    def _check(self):
        if self.n_classes < 1 or self.n_classes > self.family_size:
            raise ValueError("n_classes must be in [1, family_size]")
        if self.family < 0 or (self.family + 1) * self.family_size > N_TRIPLES:
            raise ValueError(f"family {self.family} exceeds the {N_TRIPLES} available class triples")
        if self.image_size < 4:
            raise ValueError("image_size must be >= 4")
        if any(c < 0 for c in self.per_class):
            raise ValueError("per_class counts must be non-negative")
        return self


def class_triples(family: int, n_classes: int, family_size: int = 16) -> list:
    order = np.random.default_rng(_TRIPLE_ORDER_SEED).permutation(N_TRIPLES)
    block = order[family * family_size: family * family_size + n_classes]
    return [(int(t) // 16, (int(t) // 4) % 4, int(t) % 4) for t in block]


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    triples = class_triples(spec.family, spec.n_classes, spec.family_size)
    labels, splits = [], []
    for tag, count in enumerate(spec.per_class):
        for c in range(spec.n_classes):
            labels.extend([c] * count)
            splits.extend([tag] * count)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng([spec.seed, spec.family, 0x5EED])
    images = _render(np.asarray([triples[c] for c in labels]).reshape(-1, 3), spec, rng)
    name = spec.name or f"synth-f{spec.family}"
    return Dataset(images, labels, np.asarray(splits, dtype=np.uint8), spec.n_classes, name)


def _render(triples: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n = len(triples)
    s = spec.image_size
    if n == 0:
        return np.zeros((0, s, s, 3), dtype=np.float32)
    shape, hue_band, freq = triples[:, 0], triples[:, 1], triples[:, 2]
    g = (np.arange(s) + 0.5) / s
    yy, xx = np.meshgrid(g, g, indexing="ij")

    jitter = 0.25 * spec.nuisance
    cy = 0.5 + rng.uniform(-jitter, jitter, n)
    cx = 0.5 + rng.uniform(-jitter, jitter, n)
    radius = rng.uniform(0.26, 0.36, n)
    dy = (yy[None] - cy[:, None, None]) / radius[:, None, None]
    dx = (xx[None] - cx[:, None, None]) / radius[:, None, None]
    r = np.sqrt(dx * dx + dy * dy)
    masks = np.stack([
        r <= 1.0,
        np.maximum(np.abs(dx), np.abs(dy)) <= 0.85,
        (dy <= 0.8) & (dy >= 1.6 * np.abs(dx) - 0.8),
        (r <= 1.0) & (r >= 0.55),
    ], axis=1)
    mask = masks[np.arange(n), shape].astype(np.float32)

    cycles = 1.0 + 1.5 * freq
    phase = rng.uniform(0, 2 * np.pi, n)
    stripes = 0.6 + 0.4 * np.sin(np.pi * cycles[:, None, None] * dy + phase[:, None, None])

    hue = (hue_band + 0.5) / N_HUES + rng.uniform(-0.08, 0.08, n)
    sat = rng.uniform(0.65, 0.95, n)
    fg = np.array([colorsys.hsv_to_rgb(h % 1.0, sv, 1.0) for h, sv in zip(hue, sat)])
    bg = rng.uniform(0.15, 0.6, (n, 1)) * np.ones((1, 3)) + rng.uniform(-0.08, 0.08, (n, 3))

    fg_img = fg[:, None, None, :] * stripes[..., None]
    img = mask[..., None] * fg_img + (1.0 - mask[..., None]) * bg[:, None, None, :]
    img = img + rng.normal(0.0, 0.08 * spec.nuisance, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)
