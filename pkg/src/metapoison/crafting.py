"""Poison crafting by unrolled meta-gradients over a staggered surrogate ensemble,
plus the feature-collision baseline."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import autograd as ag
from . import models
from .autograd import Graph
from .losses import AttackSpec, adv_loss
from .models import ArchSpec, ModelState
from .perturbation import PoisonSet, render_tensor

log = logging.getLogger(__name__)


def derive_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass
class CraftConfig:
    steps: int = 60  # outer (craft) steps C
    ensemble: int = 24  # M
    epoch_range: int = 24  # T
    unroll: int = 2  # K
    inner_lr: float = 0.1  # alpha
    outer_lr: float = 200.0  # beta, in 0-255 pixel units per Adam step
    lr_decay: float = 0.1
    lr_decay_every: int = 20
    batch_size: int = 125
    eps: float = 8.0
    eps_c: float = 0.04
    grid_size: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init_seed: int = 0
    shuffle_seed: int = 1
    craft_seed: int = 2
    reinit: bool = True
    watermark_opacity: float | None = None
    fine_tune: bool = False
    final_eval: bool = True

    def __post_init__(self):
        for name in ("steps", "ensemble", "epoch_range", "unroll"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def outer_lr_at(self, step: int) -> float:
        """Outer learning rate for 0-based craft step ``step``."""
        return self.outer_lr * self.lr_decay ** (step // self.lr_decay_every)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "CraftConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown craft fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CraftTrace:
    steps: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    adv_losses: list = field(default_factory=list)
    member_losses: list = field(default_factory=list)
    member_epochs: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    final_adv_loss: float = float("nan")  # ensemble loss after the last update

    def __len__(self):
        return len(self.steps)

    def append(self, step, lr, losses, epochs, wall):
        self.steps.append(step)
        self.lrs.append(lr)
        self.member_losses.append([float(v) for v in losses])
        self.adv_losses.append(float(np.mean(losses)))
        self.member_epochs.append(list(epochs))
        self.wall_times.append(wall)

    def loss_curve(self) -> list:
        """Mean adversarial loss after 0, 1, ..., C updates."""
        return self.adv_losses + [self.final_adv_loss]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            m = len(self.member_epochs[0]) if self.member_epochs else 0
            w.writerow(["step", "lr", "mean_adv_loss"] + [f"epoch_m{i}" for i in range(m)])
            for row in zip(self.steps, self.lrs, self.adv_losses, self.member_epochs):
                w.writerow([row[0], repr(row[1]), repr(row[2])] + row[3])
            if self.steps and not np.isnan(self.final_adv_loss):
                w.writerow([self.steps[-1] + 1, "", repr(self.final_adv_loss)] + [""] * m)


class Adam:
    """Adam over a list of arrays; moments persist for the lifetime of the object."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: list, grads: list, lr: float) -> list:
        if self.m is None:
            self.m = [np.zeros_like(g, dtype=np.float64) for g in grads]
            self.v = [np.zeros_like(g, dtype=np.float64) for g in grads]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            out.append((p - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype))
        return out


# --------------------------------------------------------------------------
# ensemble


@dataclass
class Member:
    state: ModelState
    reinits: int = 0
    index: int = 0


def stagger_epochs(ensemble: int, epoch_range: int) -> list:
    return [(m * epoch_range) // ensemble for m in range(ensemble)]


def _train_clean(state, data, cfg, member, n_epochs):
    for _ in range(n_epochs):
        seed = derive_seed(cfg.shuffle_seed, member.index, member.reinits, state.epoch)
        state = models.train_epoch(state, data, cfg.inner_lr, cfg.batch_size, seed)
    return state


def stagger_ensemble(cfg: CraftConfig, arch: ArchSpec, clean_data, dtype=np.float32) -> list:
    """Model m pre-trained on clean data for floor(m T / M) epochs."""
    if len(clean_data) == 0:
        raise ValueError("empty training set")
    members = []
    for m, epochs in enumerate(stagger_epochs(cfg.ensemble, cfg.epoch_range)):
        member = Member(models.init(arch, derive_seed(cfg.init_seed, m, 0), dtype), 0, m)
        member.state = _train_clean(member.state, clean_data, cfg, member, epochs)
        members.append(member)
    return members


def _advance(member: Member, data, cfg: CraftConfig) -> None:
    member.state = _train_clean(member.state, data, cfg, member, 1)
    if cfg.reinit and member.state.epoch >= cfg.epoch_range + 1:
        member.reinits += 1
        member.state = models.init(member.state.arch,
                                   derive_seed(cfg.init_seed, member.index, member.reinits),
                                   member.state.dtype)


# --------------------------------------------------------------------------
# meta-gradients


def unrolled_adv_loss(arch, params: dict, graph: Graph, images, labels, spec: AttackSpec,
                      eval_images, eval_labels, unroll: int, lr: float):
    """Adversarial loss after ``unroll`` differentiable SGD steps on one batch.

    ``params`` are leaves of ``graph``; ``images`` may contain recorded rows.
    """
    names = list(params)
    theta = dict(params)
    for _ in range(unroll):
        logits, _ = models.forward(arch, theta, images)
        loss = ag.softmax_cross_entropy(logits, labels)
        grads = ag.backward(graph, loss, [theta[k] for k in names], create_graph=True)
        theta = {k: ag.sgd_update_node(graph, theta[k], g, lr) for k, g in zip(names, grads)}
    logits, _ = models.forward(arch, theta, ag.const(eval_images.astype(images.dtype)))
    return adv_loss(spec, logits, eval_labels)


def member_meta_gradient(state: ModelState, data, poisons: PoisonSet, spec: AttackSpec,
                         cfg: CraftConfig, shuffle_seed: int, eval_rng=None):
    """Sum of partial meta-gradients over one shuffled epoch of minibatches.

    Each minibatch that holds poisons is unrolled separately from the member's
    current weights; the partial gradients for the poisons in it are written
    into the full-size arrays once all batches are done.
    """
    dtype = state.dtype
    row_of = {int(i): r for r, i in enumerate(poisons.base_indices)}
    grad_g = np.zeros(poisons.g.shape, dtype=np.float64)
    grad_d = np.zeros(poisons.delta.shape, dtype=np.float64)
    losses = []
    for idx in models.batch_order(len(data), cfg.batch_size, shuffle_seed):
        prow = np.array([row_of[int(i)] for i in idx if int(i) in row_of], dtype=np.int64)
        if len(prow) == 0:
            continue
        clean = np.array([i for i in idx if int(i) not in row_of], dtype=np.int64)
        graph = Graph()
        g_leaf = graph.leaf(poisons.g[prow].astype(dtype))
        d_leaf = graph.leaf(poisons.delta[prow].astype(dtype))
        rendered = render_tensor(poisons.bases[prow], g_leaf, d_leaf)
        images = ag.concat([ag.const(data.images[clean].astype(dtype)), rendered], axis=0)
        labels = np.concatenate([data.labels[clean], data.labels[poisons.base_indices[prow]]])
        params = models.lift(state.params, graph)
        eval_images, eval_labels = spec.eval_batch(eval_rng)
        loss = unrolled_adv_loss(state.arch, params, graph, images, labels, spec, eval_images,
                                 eval_labels, cfg.unroll, cfg.inner_lr)
        gg, gd = ag.backward(graph, loss, [g_leaf, d_leaf])
        grad_g[prow] += gg.data
        grad_d[prow] += gd.data
        losses.append(float(loss.data))
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return mean_loss, grad_g, grad_d


def craft(cfg: CraftConfig, spec: AttackSpec, data, poison_init: PoisonSet,
          arch: ArchSpec | None = None, ensemble: list | None = None,
          pretrained: ModelState | None = None, callback: Callable | None = None,
          check_feasible: bool = True):
    """Run the outer loop; returns the crafted :class:`PoisonSet` and a :class:`CraftTrace`."""
    arch = arch or ArchSpec()
    if len(poison_init) == 0:
        raise ValueError("no poisons to craft")
    if poison_init.base_indices.max() >= len(data):
        raise IndexError("poison base index out of range")
    if spec.poison_class is not None and spec.scheme != "multiclass":
        if np.any(data.labels[poison_init.base_indices] != spec.poison_class):
            raise ValueError("poison bases do not belong to the poison class")
    dtype = np.float32 if ensemble is None else ensemble[0].state.dtype
    if cfg.fine_tune:
        if pretrained is None:
            raise ValueError("fine-tune crafting needs a pretrained checkpoint")
        ensemble = [Member(pretrained.clone(), 0, 0)]
    elif ensemble is None:
        ensemble = stagger_ensemble(cfg, arch, data, dtype)
    poisons = poison_init.project()
    adam = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    trace = CraftTrace()
    eval_rng = np.random.default_rng([cfg.craft_seed, 0xE7A1])
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        lr = cfg.outer_lr_at(step)
        total_g = np.zeros(poisons.g.shape, dtype=np.float64)
        total_d = np.zeros(poisons.delta.shape, dtype=np.float64)
        losses, epochs = [], []
        for member in ensemble:
            epochs.append(member.state.epoch)
            seed = derive_seed(cfg.craft_seed, step, member.index)
            loss, gg, gd = member_meta_gradient(member.state, data, poisons, spec, cfg, seed, eval_rng)
            total_g += gg
            total_d += gd
            losses.append(loss)
            if not cfg.fine_tune:
                _advance(member, data, cfg)
        m = len(ensemble)
        # lr is in 0-255 pixel units per step
        g_new, d_new = adam.step([poisons.g, poisons.delta], [total_g / m, total_d / m], lr / 255.0)
        poisons = poisons.with_params(g_new, d_new).project()
        if check_feasible:
            bad = poisons.violations()
            if any(bad.values()):
                raise AssertionError(f"infeasible poisons after step {step}: {bad}")
        trace.append(step, lr, losses, epochs, time.perf_counter() - t0)
        log.info("craft step %d lr %.4g adv loss %.4f", step, lr, trace.adv_losses[-1])
        if callback is not None:
            callback(step, poisons, trace)
    if cfg.steps and cfg.final_eval:
        # one more pass without an update, so the curve has a point after the last step
        losses = []
        for member in ensemble:
            seed = derive_seed(cfg.craft_seed, cfg.steps, member.index)
            losses.append(member_meta_gradient(member.state, data, poisons, spec, cfg, seed, eval_rng)[0])
        trace.final_adv_loss = float(np.mean(losses))
    return poisons, trace


# --------------------------------------------------------------------------
# feature collision baseline


def craft_feature_collision(pretrained: ModelState, base: np.ndarray, target: np.ndarray,
                            iters: int = 200, step: float = 0.01, beta_fc: float = 0.1,
                            eps: float = 8.0) -> np.ndarray:
    """Projected gradient descent on ``|phi(x) - phi(target)|^2 + beta_fc |x - base|^2``.

    ``base`` may be a single image or a stack; every image is kept inside the
    additive ``eps`` ball around its base and the pixel range.
    """
    single = base.ndim == 3
    bases = np.asarray(base[None] if single else base, dtype=pretrained.dtype)
    _, phi_t = pretrained.forward(np.asarray(target, dtype=pretrained.dtype)[None])
    phi_t = phi_t.data
    e = eps / 255.0
    x = bases.copy()
    for _ in range(iters):
        graph = Graph()
        xl = graph.leaf(x)
        _, phi = pretrained.forward(xl)
        diff = ag.sub(phi, ag.const(phi_t))
        prox = ag.sub(xl, ag.const(bases))
        obj = ag.add(ag.sum_(ag.mul(diff, diff)), ag.scale(ag.sum_(ag.mul(prox, prox)), beta_fc))
        (grad,) = ag.backward(graph, obj, [xl])
        x = x - step * grad.data
        x = np.clip(np.clip(x, bases - e, bases + e), 0.0, 1.0).astype(bases.dtype)
    return x[0] if single else x


def feature_distance(model: ModelState, images: np.ndarray, target: np.ndarray) -> np.ndarray:
    _, phi = model.forward(np.asarray(images, dtype=model.dtype))
    _, phi_t = model.forward(np.asarray(target, dtype=model.dtype)[None])
    return np.linalg.norm(phi.data - phi_t.data, axis=1)


def fc_poison_set(pretrained: ModelState, data, base_indices, target, eps: float = 8.0,
                  grid_size: int = 8, **kw) -> PoisonSet:
    """Feature-collision poisons packaged as an additive-only :class:`PoisonSet`."""
    bases = data.images[base_indices]
    x = craft_feature_collision(pretrained, bases, target, eps=eps, **kw)
    ps = PoisonSet.from_bases(base_indices, bases, grid_size, eps, 0.0)
    ps = ps.with_params(ps.g, (x - bases).astype(np.float32))
    ps.meta["method"] = "feature_collision"
    return ps
