"""Clean-label perturbation model: a smooth color remap plus a bounded additive map.

A poison is rendered as ``clip(f_g(x) + delta, 0, 1)`` where ``f_g`` shifts every
pixel color by a trilinearly interpolated displacement from a (G, G, G, 3)
lattice ``g`` over the RGB cube.  Both parts live in l-infinity balls: ``delta``
within ``eps / 255`` and each lattice displacement within ``eps_c``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Graph, Tensor

DEFAULT_EPS = 8.0
DEFAULT_EPS_C = 0.04
DEFAULT_GRID = 8


@dataclass
class PerturbationParams:
    g: np.ndarray
    delta: np.ndarray
    eps: float = DEFAULT_EPS
    eps_c: float = DEFAULT_EPS_C

    @classmethod
    def zeros(cls, image_shape, grid_size=DEFAULT_GRID, eps=DEFAULT_EPS, eps_c=DEFAULT_EPS_C,
              dtype=np.float32):
        if grid_size < 2:
            raise ValueError("grid size must be at least 2 per axis")
        return cls(np.zeros((grid_size,) * 3 + (3,), dtype=dtype),
                   np.zeros(image_shape, dtype=dtype), eps, eps_c)

    @property
    def grid_size(self) -> int:
        return self.g.shape[0]


def _check_grid(g_shape):
    if len(g_shape) != 4 or g_shape[3] != 3 or not (g_shape[0] == g_shape[1] == g_shape[2]):
        raise ValueError(f"color grid must have shape (G, G, G, 3), got {g_shape}")
    if g_shape[0] < 2:
        raise ValueError("grid size must be at least 2 per axis")


def apply(base: np.ndarray, p: PerturbationParams, graph: Graph | None = None):
    """Render one poison.  With a graph, ``g`` and ``delta`` become leaves and the
    result is a recorded tensor; otherwise a numpy array is returned."""
    _check_grid(p.g.shape)
    if base.shape[-1] != 3:
        raise ValueError("color remapping needs 3-channel images")
    if graph is None:
        return render(base[None], p.g[None], p.delta[None])[0]
    g = graph.leaf(p.g)
    d = graph.leaf(p.delta)
    out = render_tensor(base[None], ag.reshape(g, (1,) + p.g.shape), ag.reshape(d, (1,) + p.delta.shape))
    return ag.reshape(out, base.shape), g, d


def color_shift_tensor(bases: np.ndarray, grids: Tensor) -> Tensor:
    """Interpolated color displacement for each pixel of each base image.

    ``bases`` is (n, H, W, 3) and ``grids`` (n, G, G, G, 3); image i uses grid i.
    """
    n = bases.shape[0]
    gsize = grids.shape[1]
    corners, weights = ag.trilinear_weights(bases, gsize)  # (n, H, W, 8)
    offset = (np.arange(n) * gsize ** 3).reshape((n,) + (1,) * (corners.ndim - 1))
    idx = (corners + offset)[..., None] * 3 + np.arange(3)  # (n, H, W, 8, 3)
    vals = ag.gather(grids, idx)
    w = ag.const(np.broadcast_to(weights[..., None], idx.shape).astype(grids.dtype), grids)
    return ag.sum_(ag.mul(vals, w), axis=-2)


def render_tensor(bases: np.ndarray, grids: Tensor, deltas: Tensor) -> Tensor:
    bases = np.asarray(bases, dtype=deltas.dtype)
    shifted = ag.add(ag.add(ag.const(bases), color_shift_tensor(bases, grids)), deltas)
    return ag.clamp(shifted, 0.0, 1.0)


def render(bases: np.ndarray, grids: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    if len(bases) == 0:
        return np.zeros_like(bases)
    out = render_tensor(bases, ag.const(grids), ag.const(deltas))
    return np.array(out.data)


def project(p: PerturbationParams) -> PerturbationParams:
    """Clip ``delta`` to the additive ball and each lattice node to the color ball.

    Interpolated displacements are convex combinations of lattice nodes, so the
    node bound also bounds every pixel's color shift.
    """
    g, d = project_arrays(p.g, p.delta, p.eps, p.eps_c)
    return PerturbationParams(g, d, p.eps, p.eps_c)


def project_arrays(g, delta, eps, eps_c):
    e = eps / 255.0
    return np.clip(g, -eps_c, eps_c).astype(g.dtype), np.clip(delta, -e, e).astype(delta.dtype)


def watermark(base: np.ndarray, target: np.ndarray, opacity: float) -> np.ndarray:
    """Blend ``target`` into ``base`` at the given opacity."""
    if base.shape != target.shape:
        raise ValueError(f"watermark: shape mismatch {base.shape} vs {target.shape}")
    if not 0.0 <= opacity <= 1.0:
        raise ValueError("opacity must be in [0, 1]")
    return (opacity * target + (1.0 - opacity) * base).astype(base.dtype)


def feasibility_violations(bases, grids, deltas, rendered, eps, eps_c, tol=1e-6) -> dict:
    """Count violations of the additive bound, per-pixel color bound and pixel range."""
    e = eps / 255.0
    counts = {"delta": int(np.sum(np.abs(deltas) > e + tol)), "color": 0, "range": 0}
    if len(bases):
        shift = np.array(color_shift_tensor(np.asarray(bases, dtype=grids.dtype), ag.const(grids)).data)
        counts["color"] = int(np.sum(np.abs(shift) > eps_c + tol))
        counts["range"] = int(np.sum((rendered < -tol) | (rendered > 1 + tol)))
    return counts


@dataclass
class PoisonSet:
    """A batch of poisons: parameters stacked along the first axis."""

    base_indices: np.ndarray
    bases: np.ndarray  # images the perturbation is applied to (after any watermark)
    g: np.ndarray
    delta: np.ndarray
    eps: float = DEFAULT_EPS
    eps_c: float = DEFAULT_EPS_C
    rendered: np.ndarray = field(default=None, repr=False)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.base_indices = np.asarray(self.base_indices, dtype=np.int64)
        if len(self.base_indices):
            _check_grid(self.g.shape[1:])
        if self.rendered is None:
            self.refresh()

    def __len__(self):
        return len(self.base_indices)

    @property
    def grid_size(self) -> int:
        return self.g.shape[1]

    @classmethod
    def from_bases(cls, base_indices, bases, grid_size=DEFAULT_GRID, eps=DEFAULT_EPS,
                   eps_c=DEFAULT_EPS_C, dtype=np.float32) -> "PoisonSet":
        bases = np.asarray(bases, dtype=dtype)
        n = len(base_indices)
        g = np.zeros((n,) + (grid_size,) * 3 + (3,), dtype=dtype)
        return cls(np.asarray(base_indices), bases, g, np.zeros_like(bases), eps, eps_c)

    def params(self, i: int) -> PerturbationParams:
        return PerturbationParams(self.g[i], self.delta[i], self.eps, self.eps_c)

    def refresh(self):
        self.rendered = render(self.bases, self.g, self.delta)

    def with_params(self, g, delta) -> "PoisonSet":
        return PoisonSet(self.base_indices, self.bases, g, delta, self.eps, self.eps_c,
                         meta=dict(self.meta))

    def project(self) -> "PoisonSet":
        g, d = project_arrays(self.g, self.delta, self.eps, self.eps_c)
        return self.with_params(g, d)

    def subset(self, rows) -> "PoisonSet":
        rows = np.asarray(rows, dtype=np.int64)
        return PoisonSet(self.base_indices[rows], self.bases[rows], self.g[rows], self.delta[rows],
                         self.eps, self.eps_c, self.rendered[rows], dict(self.meta))

    def violations(self, tol=1e-6) -> dict:
        return feasibility_violations(self.bases, self.g, self.delta, self.rendered, self.eps,
                                      self.eps_c, tol)

    def apply_to(self, images: np.ndarray) -> np.ndarray:
        """Copy of ``images`` with poisons substituted at their base indices."""
        out = np.array(images, copy=True)
        if len(self):
            if self.base_indices.max() >= len(images) or self.base_indices.min() < 0:
                raise IndexError("poison base index out of range")
            out[self.base_indices] = self.rendered.astype(out.dtype)
        return out


_TENSORS = ("bases", "g", "delta", "rendered")


def save_poison_set(ps: PoisonSet, directory, config_hash: str = "", extra: dict | None = None):
    """Manifest JSON plus raw little-endian float32 tensors."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "base_indices": [int(i) for i in ps.base_indices],
        "eps": float(ps.eps),
        "eps_c": float(ps.eps_c),
        "grid_size": int(ps.g.shape[1]) if ps.g.ndim == 5 else DEFAULT_GRID,
        "image_shape": list(ps.bases.shape[1:]),
        "config_hash": config_hash,
        "tensors": {name: f"{name}.f32" for name in _TENSORS},
        "meta": ps.meta,
    }
    if extra:
        manifest.update(extra)
    for name in _TENSORS:
        arr = np.ascontiguousarray(getattr(ps, name), dtype="<f4")
        (directory / f"{name}.f32").write_bytes(arr.tobytes())
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, directory / "manifest.json")
    return manifest


def load_poison_set(directory) -> tuple:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    n = len(manifest["base_indices"])
    img = tuple(manifest["image_shape"])
    gs = manifest["grid_size"]
    shapes = {"bases": (n,) + img, "g": (n, gs, gs, gs, 3), "delta": (n,) + img, "rendered": (n,) + img}
    arrays = {}
    for name in _TENSORS:
        raw = (directory / manifest["tensors"][name]).read_bytes()
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shapes[name]).astype(np.float32)
    ps = PoisonSet(np.array(manifest["base_indices"], dtype=np.int64), arrays["bases"], arrays["g"],
                   arrays["delta"], manifest["eps"], manifest["eps_c"], arrays["rendered"],
                   manifest.get("meta", {}))
    return ps, manifest
