"""Desk-scale experiment presets and the attacker's target-selection rule."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import data as D
from . import models
from .crafting import CraftConfig, craft, derive_seed
from .losses import AttackSpec, cw_margin
from .models import ArchSpec
from .perturbation import PoisonSet, watermark
from .victim import VictimConfig

DESK_ARCH = ArchSpec(kind="mlp", widths=(32, 32), input_shape=(8, 8, 3), num_classes=2)

# Attacker-side reference models used to rank targets.  Their seeds are
# disjoint from the victim seed range used in evaluation.
REFERENCE_SEEDS = (1000, 1001, 1002, 1003, 1004)


def desk_craft_config(**overrides) -> CraftConfig:
    base = dict(steps=30, ensemble=6, epoch_range=10, unroll=2, inner_lr=0.1,
                outer_lr=12.75, lr_decay=0.1, lr_decay_every=20, batch_size=125)
    base.update(overrides)
    return CraftConfig(**base)


def desk_victim_config(**overrides) -> VictimConfig:
    base = dict(arch=DESK_ARCH, epochs=100, lr=0.1, lr_schedule=True, batch_size=125,
                seeds=tuple(range(20)))
    base.update(overrides)
    return VictimConfig(**base)


@dataclass
class DeskTask:
    train: D.LabeledSet
    validation: D.LabeledSet
    test: D.LabeledSet
    arch: ArchSpec = DESK_ARCH

    @classmethod
    def make(cls, seed: int = 0, n_per_class: int = 250) -> "DeskTask":
        return cls(D.synth_dataset(seed, n_per_class, split="train"),
                   D.synth_dataset(seed, 100, split="validation"),
                   D.synth_dataset(seed, 50, split="test"))


def reference_margins(train, images, y_true, arch, vcfg: VictimConfig,
                      seeds=REFERENCE_SEEDS) -> np.ndarray:
    """Mean CW margin toward ``y_true`` over clean reference models, one per image.

    Positive means the image is correctly classified; larger is more confident.
    """
    totals = np.zeros(len(images))
    for s in seeds:
        state = models.init(arch, derive_seed(s, 0x71C))
        for epoch in range(vcfg.epochs):
            state = models.train_epoch(state, train, vcfg.lr_at(epoch), vcfg.batch_size,
                                       derive_seed(s, 0x5F, epoch))
        totals += -cw_margin(state.logits(images), y_true)
    return totals / len(seeds)


def select_target(train, test, y_true: int, arch, vcfg: VictimConfig, band=(1.5, 3.5),
                  seeds=REFERENCE_SEEDS, count: int = 1) -> list:
    """First ``count`` test images of class ``y_true`` whose mean clean margin lies in ``band``.

    The attacker only uses its own reference models here, never the victims.
    Falls back to the candidates closest to the band centre if too few qualify.
    """
    cand = test.class_indices(y_true)
    margins = reference_margins(train, test.images[cand], y_true, arch, vcfg, seeds)
    inside = [int(i) for i, m in zip(cand, margins) if band[0] <= m <= band[1]]
    if len(inside) >= count:
        return inside[:count]
    centre = 0.5 * (band[0] + band[1])
    order = np.argsort(np.abs(margins - centre), kind="stable")
    return [int(cand[i]) for i in order[:count]]


def collision_spec(test, target: int, y_adv: int) -> AttackSpec:
    return AttackSpec(test.images[target], int(test.labels[target]), y_adv, y_adv,
                      "collision", target_indices=[target])


def self_conceal_spec(test, target: int) -> AttackSpec:
    y = int(test.labels[target])
    return AttackSpec(test.images[target], y, None, y, "self_conceal", target_indices=[target])


def initial_poisons(train, spec: AttackSpec, budget: float, cfg: CraftConfig) -> PoisonSet:
    idx = D.select_poison_bases(train, spec.poison_class, budget, spec.scheme == "multiclass")
    bases = train.images[idx]
    if cfg.watermark_opacity:
        bases = np.stack([watermark(b, spec.target_images[0], cfg.watermark_opacity) for b in bases])
    return PoisonSet.from_bases(idx, bases, cfg.grid_size, cfg.eps, cfg.eps_c)


def run_craft(task: DeskTask, spec: AttackSpec, cfg: CraftConfig, budget: float, **kw):
    ps = initial_poisons(task.train, spec, budget, cfg)
    return craft(cfg, spec, task.train, ps, task.arch, **kw)
