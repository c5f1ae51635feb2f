"""Training loss and adversarial (outer) losses for each attack scheme."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

SCHEMES = ("collision", "self_conceal", "multiclass", "multi_target",
           "indiscriminate_class", "indiscriminate_all")

# -log(1e-6): cap of the self-concealment loss, i.e. p(y_true) clamped to 1 - 1e-6
_SELF_CONCEAL_CAP = float(-np.log(1e-6))


@dataclass
class AttackSpec:
    """What the attacker wants.  ``target_images`` is (T, H, W, C)."""

    target_images: np.ndarray
    y_true: object
    y_adv: int | None
    poison_class: int | None
    scheme: str = "collision"
    holdout: object = None  # LabeledSet-like with .images/.labels
    kappa: float | None = None
    holdout_batch: int = 64
    target_indices: list = field(default_factory=list)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        self.target_images = np.asarray(self.target_images)
        if self.target_images.ndim == 3:
            self.target_images = self.target_images[None]
        if self.scheme == "collision" and self.y_adv != self.poison_class:
            raise ValueError("collision scheme requires y_adv == poison_class")
        if self.scheme == "self_conceal":
            if self.poison_class != self.true_label:
                raise ValueError("self_conceal scheme requires poison_class == y_true")
        if self.scheme in ("collision", "multiclass", "multi_target", "indiscriminate_class"):
            if self.y_adv is None:
                raise ValueError(f"{self.scheme} scheme requires y_adv")
        if self.scheme.startswith("indiscriminate"):
            if self.holdout is None or len(self.holdout.labels) == 0:
                raise ValueError("indiscriminate schemes need a non-empty holdout set")

    @property
    def true_label(self) -> int:
        y = np.atleast_1d(self.y_true)
        return int(y[0])

    @property
    def true_labels(self) -> np.ndarray:
        y = np.atleast_1d(np.asarray(self.y_true, dtype=np.int64))
        if len(y) == 1 and len(self.target_images) > 1:
            y = np.repeat(y, len(self.target_images))
        return y

    def eval_batch(self, rng: np.random.Generator | None = None):
        """Images and labels the adversarial loss is evaluated on."""
        if self.scheme.startswith("indiscriminate"):
            images, labels = self.holdout.images, self.holdout.labels
            if self.scheme == "indiscriminate_class":
                keep = labels == self.true_label
                images, labels = images[keep], labels[keep]
            if rng is not None and len(labels) > self.holdout_batch:
                pick = np.sort(rng.choice(len(labels), self.holdout_batch, replace=False))
                images, labels = images[pick], labels[pick]
            return images, labels
        return self.target_images, self.true_labels


def train_loss(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy."""
    return ag.softmax_cross_entropy(logits, labels)


def cw_loss(logits: Tensor, y_adv, kappa: float | None = None) -> Tensor:
    """Carlini-Wagner margin ``max_{j != y_adv} z_j - z_{y_adv}`` per row.

    Negative exactly when ``y_adv`` is the strict argmax.  A 1-D input gives a
    scalar.  With ``kappa`` the margin is clamped below at ``-kappa``.
    """
    squeeze = logits.ndim == 1
    z = ag.reshape(logits, (1, -1)) if squeeze else logits
    b, k = z.shape
    y = np.broadcast_to(np.asarray(y_adv, dtype=np.intp), (b,))
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"y_adv must lie in [0, {k})")
    rows = np.arange(b)[:, None] * k
    others = np.array([[j for j in range(k) if j != yi] for yi in y])
    best_other = ag.max_(ag.gather(z, rows + others), axis=1)
    margin = ag.sub(best_other, ag.gather(z, np.arange(b) * k + y))
    if kappa is not None:
        margin = ag.clamp(margin, lo=-float(kappa))
    return ag.reshape(margin, ()) if squeeze else margin


def cw_margin(logits: np.ndarray, y_adv) -> np.ndarray:
    """Numpy version of :func:`cw_loss` for evaluation code."""
    z = np.atleast_2d(logits)
    y = np.broadcast_to(np.asarray(y_adv), (len(z),))
    masked = z.copy()
    masked[np.arange(len(z)), y] = -np.inf
    return masked.max(axis=1) - z[np.arange(len(z)), y]


def self_conceal_loss(logits: Tensor, y_true) -> Tensor:
    """Mean of ``-log(1 - p(y_true))`` with ``p`` clamped to at most 1 - 1e-6."""
    z = ag.reshape(logits, (1, -1)) if logits.ndim == 1 else logits
    b, k = z.shape
    y = np.broadcast_to(np.asarray(y_true, dtype=np.intp), (b,))
    others = np.array([[j for j in range(k) if j != yi] for yi in y]) + np.arange(b)[:, None] * k
    # -log(1 - p_y) = logsumexp(z) - logsumexp(z without y)
    val = ag.sub(ag.logsumexp(z, axis=1), ag.logsumexp(ag.gather(z, others), axis=1))
    return ag.mean(ag.clamp(val, hi=_SELF_CONCEAL_CAP))


def adv_loss(spec: AttackSpec, logits: Tensor, labels=None) -> Tensor:
    """Scalar adversarial loss of ``logits`` computed on ``spec.eval_batch()``."""
    scheme = spec.scheme
    if labels is None:
        labels = spec.true_labels
    if scheme in ("collision", "multiclass"):
        if logits.shape[0] != 1:
            raise ValueError(f"{scheme} expects a single target")
        return ag.reshape(cw_loss(logits, spec.y_adv, spec.kappa), ())
    if scheme == "self_conceal":
        return self_conceal_loss(logits, labels)
    if scheme in ("multi_target", "indiscriminate_class"):
        return ag.mean(cw_loss(logits, spec.y_adv, spec.kappa))
    if scheme == "indiscriminate_all":
        return ag.neg(ag.softmax_cross_entropy(logits, labels))
    raise ValueError(f"unknown scheme {scheme!r}")
