"""Small classifiers (MLP and ConvNet) with seeded init and epoch-level training."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Graph, Tensor


@dataclass(frozen=True)
class ArchSpec:
    kind: str = "mlp"
    widths: tuple = (32, 32)
    input_shape: tuple = (8, 8, 3)
    num_classes: int = 2
    # constant subtracted from pixels before the first layer
    input_center: float = 0.5

    def __post_init__(self):
        if self.kind not in ("mlp", "convnet"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (H, W, C) with positive dims, got {self.input_shape}")
        if not self.widths or min(self.widths) < 1:
            raise ValueError("widths must be non-empty and positive")
        if self.kind == "convnet":
            h, w, _ = self.input_shape
            n_pool = len(self.widths) - 1
            if h % (2 ** n_pool) or w % (2 ** n_pool):
                raise ValueError("convnet input size must be divisible by 2 per conv block")
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def param_shapes(self) -> dict:
        """Canonical (ordered) parameter names and shapes."""
        shapes = {}
        h, w, c = self.input_shape
        if self.kind == "mlp":
            fan_in = h * w * c
            for i, width in enumerate(self.widths):
                shapes[f"fc{i}.w"] = (fan_in, width)
                shapes[f"fc{i}.b"] = (width,)
                fan_in = width
        else:
            # conv blocks (3x3, relu, 2x2 pool), global average pool, dense penultimate
            cin = c
            for i, ch in enumerate(self.widths[:-1]):
                shapes[f"conv{i}.w"] = (3, 3, cin, ch)
                shapes[f"conv{i}.b"] = (ch,)
                cin = ch
            shapes["dense.w"] = (cin, self.widths[-1])
            shapes["dense.b"] = (self.widths[-1],)
        shapes["head.w"] = (self.widths[-1], self.num_classes)
        shapes["head.b"] = (self.num_classes,)
        return shapes

    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchSpec":
        return cls(**{**d, "widths": tuple(d.get("widths", (32, 32))),
                      "input_shape": tuple(d.get("input_shape", (8, 8, 3)))})


@dataclass
class ModelState:
    arch: ArchSpec
    params: dict
    epoch: int = 0
    init_seed: int = 0
    # SGD momentum buffers, only populated by momentum training
    velocity: dict = field(default_factory=dict, repr=False)

    def clone(self) -> "ModelState":
        return ModelState(self.arch, {k: v.copy() for k, v in self.params.items()}, self.epoch,
                          self.init_seed, {k: v.copy() for k, v in self.velocity.items()})

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def astype(self, dtype) -> "ModelState":
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()},
                       velocity={})

    def forward(self, batch, graph: Graph | None = None):
        """Logits and penultimate features; parameters become leaves of
        ``graph`` when one is given."""
        params = lift(self.params, graph)
        x = batch if isinstance(batch, Tensor) else ag.const(np.asarray(batch, dtype=self.dtype))
        return forward(self.arch, params, x)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def predict(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        return np.argmax(self.logits(images, batch_size), axis=1)

    def logits(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        out = []
        for i in range(0, len(images), batch_size):
            z, _ = self.forward(images[i:i + batch_size])
            out.append(z.data)
        return np.concatenate(out) if out else np.zeros((0, self.arch.num_classes))


def lift(params: Mapping[str, np.ndarray], graph: Graph | None) -> dict:
    if graph is None:
        return {k: ag.const(v) for k, v in params.items()}
    return {k: graph.leaf(v) for k, v in params.items()}


def init(arch: ArchSpec, seed: int, dtype=np.float32) -> ModelState:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng([int(seed), 0x1A17])
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelState(arch, params, 0, int(seed))


def forward(arch: ArchSpec, params: Mapping[str, Tensor], x: Tensor):
    """Returns (logits (B, num_classes), penultimate (B, feature_dim))."""
    feats = features(arch, params, x)
    return _head(params, feats[-1]), feats[-1]


def features(arch: ArchSpec, params: Mapping[str, Tensor], x: Tensor) -> list:
    """Activations after every hidden block; the last entry is the penultimate layer."""
    if x.ndim != 4 or tuple(x.shape[1:]) != arch.input_shape:
        raise ag.ShapeError("forward", x.shape, arch.input_shape)
    h = ag.sub(x, arch.input_center) if arch.input_center else x
    acts = []
    if arch.kind == "mlp":
        h = ag.reshape(h, (x.shape[0], -1))
        for i in range(len(arch.widths)):
            h = ag.relu(ag.add(ag.matmul(h, params[f"fc{i}.w"]), params[f"fc{i}.b"]))
            acts.append(h)
    else:
        for i in range(len(arch.widths) - 1):
            h = ag.relu(ag.conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], padding=1))
            h = ag.maxpool2x2(h)
            acts.append(h)
        h = ag.mean(h, axis=(1, 2))
        h = ag.relu(ag.add(ag.matmul(h, params["dense.w"]), params["dense.b"]))
        acts.append(h)
    return acts


def _head(params, feat):
    return ag.add(ag.matmul(feat, params["head.w"]), params["head.b"])


# --------------------------------------------------------------------------
# training


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop after zero padding plus random horizontal flip."""
    n, h, w, c = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ys = rng.integers(0, 2 * pad + 1, size=n)
    xs = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, ys[i]:ys[i] + h, xs[i]:xs[i] + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


def sgd_step(state: ModelState, images: np.ndarray, labels: np.ndarray, lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0) -> float:
    """One in-place minibatch SGD step; returns the batch loss."""
    g = Graph()
    params = lift(state.params, g)
    logits, _ = forward(state.arch, params, ag.const(images.astype(state.dtype, copy=False)))
    loss = ag.softmax_cross_entropy(logits, labels)
    names = list(params)
    grads = ag.backward(g, loss, [params[k] for k in names])
    for name, grad in zip(names, grads):
        p = state.params[name]
        d = grad.data
        if weight_decay:
            d = d + weight_decay * p
        if momentum:
            v = state.velocity.get(name)
            v = d.copy() if v is None else momentum * v + d
            state.velocity[name] = v
            d = v
        state.params[name] = (p - lr * d).astype(p.dtype)
    return float(loss.data)


def batch_order(n: int, batch_size: int, shuffle_seed: int) -> list:
    perm = np.random.default_rng([int(shuffle_seed), 0xBA7C]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train_epoch(state: ModelState, data, lr: float, batch_size: int, shuffle_seed: int,
                augment: bool = False, momentum: float = 0.0, weight_decay: float = 0.0,
                return_loss: bool = False):
    """One pass of minibatch SGD over ``data``; returns a new state."""
    n = len(data.labels)
    if n == 0:
        raise ValueError("empty training set")
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    if lr < 0:
        raise ValueError("lr must be non-negative")
    new = state.clone()
    aug_rng = np.random.default_rng([int(shuffle_seed), 0xA06]) if augment else None
    losses = []
    for idx in batch_order(n, batch_size, shuffle_seed):
        x = data.images[idx]
        if augment:
            x = augment_batch(x, aug_rng)
        losses.append(sgd_step(new, x, data.labels[idx], lr, momentum, weight_decay))
    new.epoch = state.epoch + 1
    if return_loss:
        return new, float(np.mean(losses))
    return new


# --------------------------------------------------------------------------
# checkpoints

_MAGIC = b"MPCK"


def save_checkpoint(state: ModelState, path) -> None:
    """Header (length-prefixed UTF-8 JSON) followed by little-endian float32
    tensors in canonical name order."""
    header = json.dumps({
        "arch": state.arch.to_dict(),
        "epoch": state.epoch,
        "init_seed": state.init_seed,
        "tensors": [[k, list(s)] for k, s in state.arch.param_shapes().items()],
    }, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for name in state.arch.param_shapes():
        buf.write(np.ascontiguousarray(state.params[name], dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    arch = ArchSpec.from_dict(header["arch"])
    offset = 8 + hlen
    params = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        params[name] = arr.reshape(shape).astype(np.float32)
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes")
    return ModelState(arch, params, header["epoch"], header["init_seed"])
