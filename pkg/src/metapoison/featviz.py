"""2-D projections of hidden-layer features for poison / target / class clouds.

The x axis runs along the line joining the two class centroids, the origin at
their midpoint.  The y axis is the adversarial-class weight vector of the
classification layer with its x-component removed.  For layers other than the
penultimate one there is no such weight vector, so the leading principal
direction of the pooled class features orthogonal to x is used instead.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import models
from .models import ModelState


class DegenerateAxisError(ValueError):
    pass


@dataclass
class Axes:
    mid: np.ndarray
    u: np.ndarray
    w_perp: np.ndarray
    degenerate: bool = False  # y axis vanished; all y are 0

    def project(self, phi: np.ndarray) -> np.ndarray:
        c = np.asarray(phi, dtype=np.float64) - self.mid
        return np.stack([c @ self.u, c @ self.w_perp], axis=1)


def make_axes(mu_t: np.ndarray, mu_p: np.ndarray, w: np.ndarray, tol: float = 1e-10) -> Axes:
    mu_t = np.asarray(mu_t, dtype=np.float64)
    mu_p = np.asarray(mu_p, dtype=np.float64)
    diff = mu_t - mu_p
    norm = np.linalg.norm(diff)
    if norm <= tol:
        raise DegenerateAxisError("class centroids coincide; the x axis is undefined")
    u = diff / norm
    w = np.asarray(w, dtype=np.float64)
    perp = w - (w @ u) * u
    pn = np.linalg.norm(perp)
    if pn <= tol * max(1.0, np.linalg.norm(w)):
        return Axes(0.5 * (mu_t + mu_p), u, np.zeros_like(u), True)
    return Axes(0.5 * (mu_t + mu_p), u, perp / pn)


def layer_features(model: ModelState, images: np.ndarray, layer: int | None = None) -> np.ndarray:
    """Flattened activations of hidden block ``layer`` (default: penultimate)."""
    x = ag.const(np.asarray(images, dtype=model.dtype))
    acts = models.features(model.arch, model.params, x)
    a = acts[-1 if layer is None else layer].data
    return np.asarray(a, dtype=np.float64).reshape(len(images), -1)


def _principal_perp(feats: np.ndarray, u: np.ndarray) -> np.ndarray:
    c = feats - feats.mean(axis=0)
    c = c - np.outer(c @ u, u)
    _, _, vt = np.linalg.svd(c, full_matrices=False)
    return vt[0]


def project_features(model: ModelState, sets: dict, y_adv: int | None, layer: int | None = None,
                     epoch: int | None = None, weight: np.ndarray | None = None) -> tuple:
    """Project every group in ``sets`` to 2-D.

    ``sets`` maps group names to image stacks and must contain ``target_class``
    and ``poison_class``.  ``weight`` overrides the classification-layer
    vector used for the y axis at the penultimate layer.  Returns ``(rows, axes)`` where rows are
    ``(group, epoch, layer, x, y)``.
    """
    for key in ("target_class", "poison_class"):
        if key not in sets:
            raise KeyError(f"sets must include {key!r}")
    feats = {k: layer_features(model, v, layer) for k, v in sets.items()}
    mu_t = feats["target_class"].mean(axis=0)
    mu_p = feats["poison_class"].mean(axis=0)
    n_layers = len(model.arch.widths)
    penult = layer is None or layer in (-1, n_layers - 1)
    if penult and weight is not None:
        w = np.asarray(weight, dtype=np.float64)
    elif penult:
        if y_adv is None:
            raise ValueError("y_adv or weight is required at the penultimate layer")
        w = np.asarray(model.params["head.w"], dtype=np.float64)[:, y_adv]
    else:
        diff = mu_t - mu_p
        nrm = np.linalg.norm(diff)
        if nrm == 0:
            raise DegenerateAxisError("class centroids coincide; the x axis is undefined")
        w = _principal_perp(np.concatenate([feats["target_class"], feats["poison_class"]]), diff / nrm)
    axes = make_axes(mu_t, mu_p, w)
    tag = n_layers - 1 if layer is None else layer
    ep = model.epoch if epoch is None else epoch
    rows = []
    for name in sets:
        for x, y in axes.project(feats[name]):
            rows.append((name, ep, tag, float(x), float(y)))
    return rows, axes


def write_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "epoch", "layer", "x", "y"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(r[3]), repr(r[4])])
