"""Tape-based reverse-mode automatic differentiation on numpy arrays.

Every differentiable operation appends a node to an explicit :class:`Graph`.
Vector-Jacobian products are themselves written with the same operations, so
``backward(..., create_graph=True)`` records the backward pass on the tape and
the resulting gradients can be differentiated again.  That is what lets an SGD
step be a graph node whose output still depends on the training inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Tensor",
    "ShapeError",
    "GraphError",
    "DetachedGradientError",
    "backward",
    "sgd_update_node",
    "record",
    "const",
]


class ShapeError(ValueError):
    """Operand shapes are invalid for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class GraphError(RuntimeError):
    pass


class DetachedGradientError(GraphError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple  # Tensors (constants have node_id None)
    out: "Tensor | None"
    vjp: Callable | None
    ctx: dict = field(default_factory=dict)

    @property
    def input_ids(self) -> tuple:
        return tuple(t.node_id for t in self.inputs)


class Graph:
    """Append-only tape.  Node ids are list positions, so inputs always precede
    their consumers."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.roots: list[int] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, data, dtype=None) -> "Tensor":
        arr = np.array(data, dtype=dtype if dtype is not None else _default_dtype(data))
        arr.setflags(write=False)
        t = Tensor(arr, self, len(self.nodes))
        self.nodes.append(Node("leaf", (), t, None))
        self.roots.append(t.node_id)
        return t

    def _append(self, op, out_data, inputs, vjp, ctx) -> "Tensor":
        out_data.setflags(write=False)
        t = Tensor(out_data, self, len(self.nodes))
        self.nodes.append(Node(op, tuple(inputs), t, vjp, ctx))
        return t


def _default_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype.kind == "f":
        return data.dtype
    return np.float32


class Tensor:
    """An array value, optionally bound to a node on a :class:`Graph`."""

    __array_priority__ = 100
    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data, graph: Graph | None = None, node_id: int | None = None):
        if isinstance(data, np.generic):
            data = np.asarray(data)  # numpy scalars from full reductions keep their precision
        elif not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def recorded(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.recorded else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _raise_item(shape):
    raise ShapeError("item", shape)


def const(value, like: Tensor | None = None) -> Tensor:
    """Wrap a value as an unrecorded constant."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    if isinstance(value, np.ndarray):
        arr = value if dtype is None or value.dtype == dtype else value.astype(dtype)
    else:
        arr = np.asarray(value, dtype=dtype if dtype is not None else np.float32)
    return Tensor(arr)


def _as_tensors(*xs):
    like = next((x for x in xs if isinstance(x, Tensor)), None)
    return [x if isinstance(x, Tensor) else const(x, like) for x in xs]


def _graph_of(inputs) -> Graph | None:
    g = None
    for t in inputs:
        if t.graph is not None and t.node_id is not None:
            if g is None:
                g = t.graph
            elif t.graph is not g:
                raise GraphError("operands belong to different graphs")
    return g


def _make(op: str, out_data: np.ndarray, inputs, vjp, **ctx) -> Tensor:
    g = _graph_of(inputs)
    if g is None:
        return Tensor(out_data)
    return g._append(op, np.asarray(out_data), inputs, vjp, ctx)


# --------------------------------------------------------------------------
# broadcasting helpers


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to ``shape`` (inverse of numpy broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    out = x.data.sum(axis=axes, keepdims=True)
    if lead:
        out = out.reshape(shape)
    return _make("sum_to", out, [x], _vjp_sum_to, shape=shape)


def _vjp_sum_to(g, inputs, out, ctx, needs):
    (x,) = inputs
    return (broadcast_to(g, x.shape),)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None
    return _make("broadcast_to", out, [x], _vjp_broadcast_to)


def _vjp_broadcast_to(g, inputs, out, ctx, needs):
    (x,) = inputs
    return (sum_to(g, x.shape),)


def _bshape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensors(a, b)
    _bshape("add", a, b)
    return _make("add", a.data + b.data, [a, b], _vjp_add)


def _vjp_add(g, inputs, out, ctx, needs):
    a, b = inputs
    return (sum_to(g, a.shape) if needs[0] else None, sum_to(g, b.shape) if needs[1] else None)


def sub(a, b) -> Tensor:
    a, b = _as_tensors(a, b)
    _bshape("sub", a, b)
    return _make("sub", a.data - b.data, [a, b], _vjp_sub)


def _vjp_sub(g, inputs, out, ctx, needs):
    a, b = inputs
    return (
        sum_to(g, a.shape) if needs[0] else None,
        sum_to(neg(g), b.shape) if needs[1] else None,
    )


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, [a], lambda g, i, o, c, n: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = _as_tensors(a, b)
    _bshape("mul", a, b)
    return _make("mul", a.data * b.data, [a, b], _vjp_mul)


def _vjp_mul(g, inputs, out, ctx, needs):
    a, b = inputs
    return (
        sum_to(mul(g, b), a.shape) if needs[0] else None,
        sum_to(mul(g, a), b.shape) if needs[1] else None,
    )


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a Python scalar."""
    return _make("scale", a.data * a.dtype.type(s), [a], lambda g, i, o, c, n: (scale(g, c["s"]),), s=s)


def div(a, b) -> Tensor:
    a, b = _as_tensors(a, b)
    _bshape("div", a, b)
    return _make("div", a.data / b.data, [a, b], _vjp_div)


def _vjp_div(g, inputs, out, ctx, needs):
    a, b = inputs
    ga = sum_to(div(g, b), a.shape) if needs[0] else None
    gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if needs[1] else None
    return ga, gb


def exp(a: Tensor) -> Tensor:
    return _make("exp", np.exp(a.data), [a], lambda g, i, o, c, n: (mul(g, o),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    return _make("log", np.log(a.data), [a], lambda g, i, o, c, n: (div(g, i[0]),))


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(a.dtype)
    return _make("relu", a.data * mask, [a], _vjp_masked, mask=mask)


def _vjp_masked(g, inputs, out, ctx, needs):
    return (mul(g, const(ctx["mask"], g)),)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi].  The gradient passes wherever the input lies in the
    closed interval."""
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return _make("clamp", np.clip(a.data, lo, hi), [a], _vjp_masked, mask=mask.astype(a.dtype))


# --------------------------------------------------------------------------
# shape and linear-algebra ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensors(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make("matmul", a.data @ b.data, [a, b], _vjp_matmul)


def _vjp_matmul(g, inputs, out, ctx, needs):
    a, b = inputs
    return (
        matmul(g, transpose(b)) if needs[0] else None,
        matmul(transpose(a), g) if needs[1] else None,
    )


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    if out.shape == a.shape:
        return a
    return _make("reshape", out, [a], lambda g, i, o, c, n: (reshape(g, i[0].shape),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return _make(
        "transpose", np.ascontiguousarray(a.data.transpose(axes)), [a],
        lambda g, i, o, c, n: (transpose(g, c["inv"]),), inv=inv,
    )


def _keep_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else axis
    axes = {ax % len(shape) for ax in axes}
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _make("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), [a], _vjp_sum,
                 axis=axis)


def _vjp_sum(g, inputs, out, ctx, needs):
    (x,) = inputs
    return (broadcast_to(reshape(g, _keep_shape(x.shape, ctx["axis"])), x.shape),)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def max_(a: Tensor, axis: int = -1) -> Tensor:
    """Maximum along ``axis``.  Ties route the gradient to the lowest index."""
    idx = np.argmax(a.data, axis=axis)
    mask = np.zeros(a.shape, dtype=a.dtype)
    np.put_along_axis(mask, np.expand_dims(idx, axis), 1, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    return _make("max", out, [a], _vjp_max, axis=axis, mask=mask)


def _vjp_max(g, inputs, out, ctx, needs):
    (x,) = inputs
    gk = reshape(g, _keep_shape(x.shape, ctx["axis"]))
    return (mul(broadcast_to(gk, x.shape), const(ctx["mask"], g)),)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    out = (m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))).squeeze(axis)
    return _make("logsumexp", out, [a], _vjp_lse, axis=axis)


def _vjp_lse(g, inputs, out, ctx, needs):
    (x,) = inputs
    keep = _keep_shape(x.shape, ctx["axis"])
    p = exp(sub(x, reshape(out, keep)))
    return (mul(reshape(g, keep), p),)


def gather(a: Tensor, index) -> Tensor:
    """``a.reshape(-1)[index]``; the result has ``index``'s shape."""
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= a.size):
        raise ShapeError("gather", a.shape, index.shape)
    return _make("gather", a.data.reshape(-1)[index], [a], _vjp_gather, index=index)


def _vjp_gather(g, inputs, out, ctx, needs):
    (x,) = inputs
    return (scatter_add(g, ctx["index"], x.shape),)


def scatter_add(src: Tensor, index, shape) -> Tensor:
    """Zeros of ``shape`` with ``src`` summed into flat positions ``index``."""
    index = np.asarray(index, dtype=np.intp)
    if index.shape != src.shape:
        raise ShapeError("scatter_add", src.shape, index.shape)
    size = int(np.prod(shape))
    flat = np.bincount(index.reshape(-1), weights=src.data.reshape(-1).astype(np.float64),
                       minlength=size)
    out = flat.astype(src.dtype).reshape(shape)
    return _make("scatter_add", out, [src], lambda g, i, o, c, n: (gather(g, c["index"]),),
                 index=index)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = _as_tensors(*tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    flat = np.arange(out.size).reshape(out.shape)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    pieces = [np.take(flat, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])]
    return _make("concat", out, tensors, _vjp_concat, pieces=pieces)


def _vjp_concat(g, inputs, out, ctx, needs):
    return tuple(gather(g, p) if need else None for p, need in zip(ctx["pieces"], needs))


# --------------------------------------------------------------------------
# composite layers


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the two spatial axes of an NHWC tensor."""
    if pad == 0:
        return x
    n, h, w, c = x.shape
    pos = np.arange((h + 2 * pad) * (w + 2 * pad) * c * n).reshape(n, h + 2 * pad, w + 2 * pad, c)
    pos = pos[:, pad:pad + h, pad:pad + w, :]
    return scatter_add(x, pos, (n, h + 2 * pad, w + 2 * pad, c))


_IM2COL_CACHE: dict = {}


def _im2col_index(shape, kh, kw, stride):
    key = (shape, kh, kw, stride)
    if key not in _IM2COL_CACHE:
        n, h, w, c = shape
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        flat = np.arange(n * h * w * c).reshape(n, h, w, c)
        rows = []
        for i in range(kh):
            for j in range(kw):
                rows.append(flat[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :])
        # (n, oh, ow, kh*kw, c) -> (n*oh*ow, kh*kw*c)
        idx = np.stack(rows, axis=3).reshape(n * oh * ow, kh * kw * c)
        _IM2COL_CACHE[key] = (idx, oh, ow)
    return _IM2COL_CACHE[key]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """NHWC convolution with kernel ``w`` of shape (kh, kw, c_in, c_out)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv2d", x.shape, w.shape)
    kh, kw, cin, cout = w.shape
    xp = pad2d(x, padding)
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ShapeError("conv2d", x.shape, w.shape)
    idx, oh, ow = _im2col_index(xp.shape, kh, kw, stride)
    cols = gather(xp, idx)
    out = matmul(cols, reshape(w, (kh * kw * cin, cout)))
    if b is not None:
        out = add(out, b)
    return reshape(out, (x.shape[0], oh, ow, cout))


def maxpool2x2(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError("maxpool2x2", x.shape)
    t = reshape(x, (n, h // 2, 2, w // 2, 2, c))
    t = transpose(t, (0, 1, 3, 5, 2, 4))
    t = reshape(t, (n, h // 2, w // 2, c, 4))
    return max_(t, axis=-1)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    b, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    picked = gather(logits, np.arange(b) * k + labels)
    return mean(sub(logsumexp(logits, axis=1), picked))


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    keep = _keep_shape(logits.shape, axis)
    return sub(logits, reshape(logsumexp(logits, axis=axis), keep))


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(logits, axis))


def trilinear_sample(grid: Tensor, coords: np.ndarray) -> Tensor:
    """Trilinearly interpolate a (G, G, G, D) lattice spanning [0, 1]^3.

    ``coords`` has shape (..., 3) and is treated as a constant; the result has
    shape (..., D) and is linear in ``grid``.
    """
    if grid.ndim != 4 or grid.shape[0] != grid.shape[1] or grid.shape[1] != grid.shape[2]:
        raise ShapeError("trilinear_sample", grid.shape)
    gsize = grid.shape[0]
    if gsize < 2:
        raise ShapeError("trilinear_sample", grid.shape)
    corners, weights = trilinear_weights(np.asarray(coords), gsize)
    d = grid.shape[3]
    idx = corners[..., None] * d + np.arange(d)  # (..., 8, D)
    vals = gather(grid, idx)
    w = const(np.broadcast_to(weights[..., None], idx.shape).astype(grid.dtype), grid)
    return sum_(mul(vals, w), axis=-2)


def trilinear_weights(coords: np.ndarray, gsize: int):
    """Flat corner indices and interpolation weights, each of shape (..., 8)."""
    u = np.clip(coords, 0.0, 1.0) * (gsize - 1)
    lo = np.minimum(np.floor(u).astype(np.intp), gsize - 2)
    frac = u - lo
    corners, weights = [], []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                off = np.array([dx, dy, dz])
                c = lo + off
                corners.append((c[..., 0] * gsize + c[..., 1]) * gsize + c[..., 2])
                wt = np.where(off == 1, frac, 1.0 - frac)
                weights.append(wt.prod(axis=-1))
    return np.stack(corners, axis=-1), np.stack(weights, axis=-1)


# --------------------------------------------------------------------------
# differentiation


def backward(graph: Graph, loss: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list:
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    Nodes are visited in strictly decreasing id order, so contributions from
    multiple consumers are always summed in the same order.  Without
    ``create_graph`` the tape is left untouched; with it, the backward pass is
    appended to the tape and the returned gradients are graph nodes.
    """
    if loss.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    if loss.graph is not graph or loss.node_id is None:
        raise GraphError("loss is not recorded on this graph")
    grads: dict[int, Tensor] = {loss.node_id: const(np.ones(loss.shape, dtype=loss.dtype))}
    for nid in range(loss.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = graph.nodes[nid]
        if node.vjp is None:
            continue
        needs = tuple(t.node_id is not None for t in node.inputs)
        if not any(needs):
            continue
        if create_graph:
            ins, out = node.inputs, node.out
        else:
            ins = tuple(Tensor(t.data) for t in node.inputs)
            out = Tensor(node.out.data)
        in_grads = node.vjp(g, ins, out, node.ctx, needs)
        for t, need, gi in zip(node.inputs, needs, in_grads):
            if not need or gi is None:
                continue
            prev = grads.get(t.node_id)
            grads[t.node_id] = gi if prev is None else add(prev, gi)
    result = []
    for w in wrt:
        g = grads.get(w.node_id) if w.node_id is not None and w.graph is graph else None
        if g is None:
            g = Tensor(np.zeros(w.shape, dtype=w.dtype))
        elif not create_graph:
            g = Tensor(np.array(g.data))
        result.append(g)
    return result


def sgd_update_node(graph: Graph, params: Tensor, grads: Tensor, lr: float) -> Tensor:
    """Record ``params - lr * grads`` as a differentiable graph node."""
    if params.shape != grads.shape:
        raise ShapeError("sgd_update", params.shape, grads.shape)
    if grads.graph is not graph or grads.node_id is None:
        raise DetachedGradientError(
            "gradients are not graph nodes; use backward(..., create_graph=True)"
        )
    return sub(params, scale(grads, lr))


_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "scalar-mul": scale,
    "mul": mul,
    "elementwise-mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "maxpool2x2": maxpool2x2,
    "mean": mean,
    "sum": sum_,
    "max": max_,
    "logsumexp": logsumexp,
    "softmax-cross-entropy": softmax_cross_entropy,
    "log": log,
    "clamp": clamp,
    "gather": gather,
    "scatter-add": scatter_add,
    "concat": lambda *ts, axis=0: concat(ts, axis),
    "reshape": reshape,
    "transpose": transpose,
    "trilinear-grid-sample": trilinear_sample,
}


def record(op_kind: str, *inputs: Any, **params: Any) -> Tensor:
    """Dispatch an operation by name."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **params)
