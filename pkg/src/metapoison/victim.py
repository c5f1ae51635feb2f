"""Victim-side evaluation: train fresh models on the poisoned set and tally outcomes."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from math import sqrt
from pathlib import Path

import numpy as np

from . import models
from .crafting import derive_seed
from .losses import AttackSpec, cw_margin
from .models import ArchSpec, ModelState
from .perturbation import PoisonSet


@dataclass
class VictimConfig:
    arch: ArchSpec = field(default_factory=ArchSpec)
    epochs: int = 200
    lr: float = 0.1
    lr_schedule: bool = True  # divide by 10 at 50% and 75% of training
    batch_size: int = 125
    momentum: float = 0.0
    weight_decay: float = 0.0
    augment: bool = False
    seeds: tuple = (0, 1, 2, 3, 4, 5)
    mode: str = "from_scratch"
    checkpoint: str | None = None
    log_every: int = 1  # epochs between metric records

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if len(self.seeds) == 0:
            raise ValueError("at least one victim seed is required")
        if self.mode not in ("from_scratch", "fine_tune"):
            raise ValueError(f"unknown victim mode {self.mode!r}")
        if isinstance(self.arch, dict):
            self.arch = ArchSpec.from_dict(self.arch)
        self.seeds = tuple(int(s) for s in self.seeds)

    def lr_at(self, epoch: int) -> float:
        if not self.lr_schedule:
            return self.lr
        lr = self.lr
        if epoch >= self.epochs * 0.5:
            lr *= 0.1
        if epoch >= self.epochs * 0.75:
            lr *= 0.1
        return lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d) -> "VictimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown victim fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class VictimRow:
    seed: int
    target: int  # position in spec.target_images
    prediction: int
    success: bool
    misclassified: bool
    cw_trace: list
    val_accuracy: float


@dataclass
class VictimReport:
    rows: list
    y_adv: int | None
    y_true: list
    num_classes: int
    scheme: str = "collision"

    @property
    def attempts(self) -> int:
        return len(self.rows)

    def tally(self) -> dict:
        counts = {c: 0 for c in range(self.num_classes)}
        for r in self.rows:
            counts[r.prediction] += 1
        return counts

    def val_accuracies(self) -> np.ndarray:
        seen = {}
        for r in self.rows:
            seen.setdefault(r.seed, r.val_accuracy)
        return np.array([seen[s] for s in sorted(seen)])

    def summary(self) -> dict:
        acc = self.val_accuracies()
        return {
            "scheme": self.scheme,
            "attempts": self.attempts,
            "successes": int(sum(r.success for r in self.rows)),
            "success_rate": success_rate(self),
            "self_conceal_success": self_conceal_success(self),
            "tally": {str(k): v for k, v in self.tally().items()},
            "val_accuracy_mean": float(acc.mean()) if len(acc) else float("nan"),
            "val_accuracy_std": float(acc.std()) if len(acc) else float("nan"),
            "y_adv": self.y_adv,
            "y_true": self.y_true,
        }

    def write_json(self, path) -> None:
        doc = {"summary": self.summary(),
               "rows": [{k: v for k, v in asdict(r).items() if k != "cw_trace"} for r in self.rows]}
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "target", "epoch", "cw_loss"])
            for r in self.rows:
                for epoch, value in r.cw_trace:
                    w.writerow([r.seed, r.target, epoch, repr(value)])


def success_rate(report: VictimReport) -> float:
    """Fraction of attempts where the target is classified exactly as y_adv."""
    if report.attempts == 0:
        raise ValueError("empty report")
    return sum(r.success for r in report.rows) / report.attempts


def self_conceal_success(report: VictimReport) -> float:
    """Fraction of attempts where the target leaves its true class."""
    if report.attempts == 0:
        raise ValueError("empty report")
    return sum(r.misclassified for r in report.rows) / report.attempts


def merge_reports(reports: list) -> VictimReport:
    first = reports[0]
    rows, offset, y_true = [], 0, []
    for rep in reports:
        for r in rep.rows:
            rows.append(VictimRow(**{**asdict(r), "target": r.target + offset}))
        offset += len(rep.y_true)
        y_true += rep.y_true
    return VictimReport(rows, first.y_adv, y_true, first.num_classes, first.scheme)


def wilson_interval(successes: int, n: int, z: float = 1.96) -> tuple:
    if n == 0:
        return (0.0, 1.0)
    p = successes / n
    den = 1 + z * z / n
    center = (p + z * z / (2 * n)) / den
    half = z * sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return (max(0.0, center - half), min(1.0, center + half))


# --------------------------------------------------------------------------


def _target_margin(logits, spec: AttackSpec):
    """Per-target CW loss; positive means the attack is currently failing."""
    if spec.y_adv is not None:
        return cw_margin(logits, spec.y_adv)
    return -cw_margin(logits, spec.true_labels)


def _run_seed(args):
    seed, train, val, spec, vcfg, start = args
    if vcfg.mode == "fine_tune":
        state = start.clone()
        state.epoch = 0
    else:
        state = models.init(vcfg.arch, derive_seed(seed, 0x71C))
    trace = []
    targets = spec.target_images.astype(state.dtype)
    for epoch in range(vcfg.epochs):
        state = models.train_epoch(state, train, vcfg.lr_at(epoch), vcfg.batch_size,
                                   derive_seed(seed, 0x5F, epoch), vcfg.augment, vcfg.momentum,
                                   vcfg.weight_decay)
        if (epoch + 1) % vcfg.log_every == 0 or epoch + 1 == vcfg.epochs:
            trace.append((epoch + 1, _target_margin(state.logits(targets), spec)))
    logits = state.logits(targets)
    preds = np.argmax(logits, axis=1)
    acc = float(np.mean(state.predict(val.images) == val.labels)) if val is not None else float("nan")
    rows = []
    y_true = spec.true_labels
    for t, pred in enumerate(preds):
        rows.append(VictimRow(
            seed=int(seed), target=t, prediction=int(pred),
            success=bool(spec.y_adv is not None and pred == spec.y_adv),
            misclassified=bool(pred != y_true[t]),
            cw_trace=[(e, float(m[t])) for e, m in trace],
            val_accuracy=acc,
        ))
    return rows


def evaluate(poisons: PoisonSet | None, spec: AttackSpec, vcfg: VictimConfig, data,
             validation=None, checkpoint: ModelState | None = None, jobs: int = 1) -> VictimReport:
    """Train one victim per seed on ``data`` with poisons substituted in place."""
    if poisons is not None and len(poisons):
        if poisons.base_indices.max() >= len(data) or poisons.base_indices.min() < 0:
            raise IndexError("poison base index out of range")
        train = data.replace_images(poisons.apply_to(data.images))
    else:
        train = data
    if vcfg.mode == "fine_tune" and checkpoint is None:
        raise ValueError("fine-tune victims need a checkpoint")
    work = [(s, train, validation, spec, vcfg, checkpoint) for s in vcfg.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_seed, work))
    else:
        results = [_run_seed(w) for w in work]
    rows = [r for res in results for r in res]
    return VictimReport(rows, spec.y_adv, [int(y) for y in spec.true_labels],
                        data.num_classes, spec.scheme)


def binomial_two_proportion_z(s1: int, n1: int, s2: int, n2: int) -> float:
    """Pooled z statistic for p2 > p1."""
    p = (s1 + s2) / (n1 + n2)
    if p in (0.0, 1.0):
        return 0.0
    se = sqrt(p * (1 - p) * (1 / n1 + 1 / n2))
    return (s2 / n2 - s1 / n1) / se
