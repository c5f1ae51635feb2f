"""Datasets: CIFAR-10 binary batches, a synthetic stand-in, poison-base selection."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CIFAR_RECORD = 1 + 3 * 32 * 32
SPLITS = ("train", "validation", "test")


class InsufficientClassError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledSet:
    images: np.ndarray  # (N, H, W, C) in [0, 1]
    labels: np.ndarray  # (N,)
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or len(images) != len(labels):
            raise ValueError(f"images {images.shape} and labels {labels.shape} disagree")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("labels out of range")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def replace_images(self, images) -> "LabeledSet":
        return LabeledSet(images, self.labels, self.split, self.num_classes)

    def subset(self, idx) -> "LabeledSet":
        return LabeledSet(self.images[idx], self.labels[idx], self.split, self.num_classes)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# CIFAR-10 binary format


def parse_cifar_records(raw: bytes, source: str = "<bytes>"):
    if len(raw) % CIFAR_RECORD:
        raise ValueError(f"{source}: truncated record ({len(raw)} bytes is not a multiple of {CIFAR_RECORD})")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if len(labels) and labels.max() > 9:
        raise ValueError(f"{source}: label {int(labels.max())} > 9")
    # channel-planar (3, 32, 32) -> (32, 32, 3)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return images, labels


def load_cifar_binary(paths, split: str = "train") -> LabeledSet:
    images, labels = [], []
    for p in [paths] if isinstance(paths, (str, Path)) else paths:
        x, y = parse_cifar_records(Path(p).read_bytes(), str(p))
        images.append(x)
        labels.append(y)
    data = LabeledSet(np.concatenate(images), np.concatenate(labels), split, 10)
    if split == "train":
        m = float(data.images.mean())
        if not 0.4 <= m <= 0.55:
            log.warning("CIFAR pixel mean %.3f outside the usual [0.4, 0.55] range", m)
    return data


def to_cifar_records(data: LabeledSet) -> bytes:
    """Encode a 32x32x3 (or any HxWx3) set in the CIFAR record layout."""
    pix = np.clip(np.rint(np.asarray(data.images) * 255.0), 0, 255).astype(np.uint8)
    planar = pix.transpose(0, 3, 1, 2).reshape(len(pix), -1)
    rec = np.concatenate([data.labels.astype(np.uint8)[:, None], planar], axis=1)
    return rec.tobytes()


def write_cifar_binary(data: LabeledSet, path) -> None:
    Path(path).write_bytes(to_cifar_records(data))


def cifar_paths(root, split: str) -> list:
    root = Path(root)
    if split == "test":
        return [root / "test_batch.bin"]
    return [root / f"data_batch_{i}.bin" for i in range(1, 6)]


# --------------------------------------------------------------------------
# synthetic data


def _blobs(rng, shape, count, amp, width):
    h, w, c = shape
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros(shape)
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        color = rng.uniform(-1, 1, c)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        out += amp * bump[..., None] * color
    return out


def class_means(seed: int, classes: int, shape, contrast: float = 0.7, coverage: float = 0.35):
    """Per-class mean images built from Gaussian blobs.

    Each class pattern saturates at ``+-contrast/2`` on roughly ``coverage`` of
    the pixels.
    """
    rng = np.random.default_rng([int(seed), 0x5EED])
    base = 0.5 + _blobs(rng, shape, 3, 0.1, 2.0)
    patterns = []
    for c in range(classes):
        if classes == 2 and c == 1:
            patterns.append(-patterns[0])
            continue
        pat = _blobs(rng, shape, 4, 1.0, 1.2)
        pat /= np.abs(pat).max()
        thr = np.quantile(np.abs(pat), 1 - coverage)
        pat = np.where(np.abs(pat) >= thr, np.sign(pat), pat / thr) * contrast / 2
        patterns.append(pat)
    return [base + p for p in patterns]


def synth_dataset(seed: int, n_per_class: int, classes: int = 2, shape=(8, 8, 3),
                  split: str = "train", noise: float = 0.1, morph: float = 0.5,
                  nuisance: float = 1.0, contrast: float = 0.7, coverage: float = 0.35) -> LabeledSet:
    """Class-conditional Gaussian-blob images.

    A sample of class c is its class mean, moved a uniform fraction in
    ``[0, morph)`` toward another class mean, plus a couple of random blobs and
    i.i.d. Gaussian pixel noise.  All splits of one ``seed`` share class means.
    """
    shape = tuple(shape)
    means = class_means(seed, classes, shape, contrast, coverage)
    rng = np.random.default_rng([int(seed), SPLITS.index(split) + 1])
    images, labels = [], []
    for c in range(classes):
        for _ in range(n_per_class):
            other = c if classes == 1 else (c + 1 + rng.integers(classes - 1)) % classes
            t = rng.uniform(0, morph)
            x = means[c] + t * (means[other] - means[c])
            x = x + nuisance * _blobs(rng, shape, 2, 0.1, 1.5) + rng.normal(0, noise, shape)
            images.append(np.clip(x, 0, 1))
            labels.append(c)
    order = rng.permutation(len(labels))
    return LabeledSet(np.array(images, dtype=np.float32)[order], np.array(labels)[order], split, classes)


# --------------------------------------------------------------------------
# poison budgets


def budget_count(budget: float, n: int) -> int:
    """Round-half-up number of poisons for a fractional budget."""
    if budget < 0:
        raise ValueError("budget must be non-negative")
    return int(math.floor(budget * n + 0.5 + 1e-9))


def select_poison_bases(data: LabeledSet, poison_class: int | None, budget: float,
                        multiclass: bool = False) -> np.ndarray:
    """First ``n`` examples of the poison class, or an even split over all classes."""
    n = budget_count(budget, len(data))
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if not multiclass:
        members = data.class_indices(poison_class)
        if len(members) < n:
            raise InsufficientClassError(
                f"budget needs {n} poisons but class {poison_class} has {len(members)} examples")
        return members[:n]
    k = data.num_classes
    per = [n // k + (1 if c < n % k else 0) for c in range(k)]
    picked = []
    for c, m in enumerate(per):
        members = data.class_indices(c)
        if len(members) < m:
            raise InsufficientClassError(f"class {c} has {len(members)} examples, need {m}")
        picked.append(members[:m])
    return np.sort(np.concatenate(picked))


def subsample_poisons(poisons, m: int, seed: int):
    """Uniform seeded subset of ``m`` poisons, linked to its parent set."""
    if m < 0 or m > len(poisons):
        raise ValueError(f"cannot take {m} poisons from a set of {len(poisons)}")
    rng = np.random.default_rng([int(seed), 0x5B5])
    rows = np.sort(rng.choice(len(poisons), m, replace=False)) if m else np.zeros(0, dtype=np.int64)
    sub = poisons.subset(rows)
    sub.meta = {**poisons.meta, "parent_size": len(poisons), "parent_rows": [int(r) for r in rows],
                "subsample_seed": int(seed)}
    if "config_hash" in poisons.meta:
        sub.meta["parent_hash"] = poisons.meta["config_hash"]
    return sub
