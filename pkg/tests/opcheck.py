"""Central finite-difference checks of every differentiable op (64-bit)."""

import numpy as np

from metapoison import autograd as ag
from metapoison.autograd import Graph

H = 1e-4


def away_from(rng, shape, points=(0.0,), gap=0.05, scale=1.0):
    """Random values at least ``gap`` away from each kink in ``points``."""
    x = rng.normal(0, scale, shape)
    for p in points:
        close = np.abs(x - p) < gap
        x[close] = p + np.sign(x[close] - p + 1e-12) * gap * (1 + rng.uniform(size=close.sum()))
    return x


def distinct(rng, shape, gap=0.01):
    """Random values whose sorted neighbours differ by more than ``gap``."""
    n = int(np.prod(shape))
    vals = np.cumsum(rng.uniform(gap * 2, 1.0, n))
    return rng.permutation(vals - vals.mean()).reshape(shape)


def fd_check(fn, inputs, rng, h=H):
    """Max relative error between backward and central differences.

    ``fn`` maps a list of tensors to a tensor; the scalar checked is
    ``sum(fn(...) * R)`` for a fixed random ``R``.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    probe = fn([ag.const(x) for x in inputs])
    r = rng.normal(size=probe.shape)

    def scalar(vals):
        return float(np.sum(fn([ag.const(v) for v in vals]).data * r))

    g = Graph()
    leaves = [g.leaf(x) for x in inputs]
    out = fn(leaves)
    loss = ag.sum_(ag.mul(out, ag.const(r)))
    grads = ag.backward(g, loss, leaves)
    worst = 0.0
    for k, x in enumerate(inputs):
        num = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            xp = [v.copy() for v in inputs]
            xm = [v.copy() for v in inputs]
            xp[k][i] += h
            xm[k][i] -= h
            num[i] = (scalar(xp) - scalar(xm)) / (2 * h)
        a = grads[k].data
        denom = max(np.linalg.norm(num), np.linalg.norm(a), 1e-8)
        worst = max(worst, np.linalg.norm(a - num) / denom)
    return worst


def _idx(rng, n_src, shape):
    return rng.integers(0, n_src, shape)


def op_cases():
    """(name, builder) pairs; builder(rng) -> (fn, inputs)."""

    def binary(op, b_shape=None, positive_b=False):
        def build(rng):
            shape = tuple(rng.integers(1, 4, 2))
            b = rng.uniform(0.5, 2.0, b_shape or shape) if positive_b else rng.normal(size=b_shape or shape)
            return (lambda t: op(t[0], t[1])), [rng.normal(size=shape), b]
        return build

    def unary(op, gen):
        def build(rng):
            shape = tuple(rng.integers(1, 4, 2))
            return (lambda t: op(t[0])), [gen(rng, shape)]
        return build

    def matmul(rng):
        m, k, n = rng.integers(1, 5, 3)
        return (lambda t: ag.matmul(t[0], t[1])), [rng.normal(size=(m, k)), rng.normal(size=(k, n))]

    def bcast(rng):
        m, n = rng.integers(1, 4, 2)
        return (lambda t: ag.add(t[0], t[1])), [rng.normal(size=(m, n)), rng.normal(size=(n,))]

    def conv(rng):
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        cin, cout = rng.integers(1, 3, 2)
        x = rng.normal(size=(1, 4, 4, cin))
        w = rng.normal(size=(3, 3, cin, cout))
        b = rng.normal(size=(cout,))
        return (lambda t: ag.conv2d(t[0], t[1], t[2], stride=stride, padding=pad)), [x, w, b]

    def pool(rng):
        return (lambda t: ag.maxpool2x2(t[0])), [distinct(rng, (1, 4, 4, 2))]

    def sce(rng):
        b, k = rng.integers(1, 4), rng.integers(2, 5)
        labels = rng.integers(0, k, b)
        return (lambda t: ag.softmax_cross_entropy(t[0], labels)), [rng.normal(size=(b, k)) * 2]

    def gather(rng):
        x = rng.normal(size=(3, 4))
        idx = _idx(rng, 12, (5,))
        return (lambda t: ag.gather(t[0], idx)), [x]

    def scatter(rng):
        src = rng.normal(size=(6,))
        idx = _idx(rng, 4, (6,))
        return (lambda t: ag.scatter_add(t[0], idx, (2, 2))), [src]

    def concat(rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(int(rng.integers(1, 3)), 3))
        return (lambda t: ag.concat([t[0], t[1]], axis=0)), [a, b]

    def reshape(rng):
        return (lambda t: ag.reshape(t[0], (3, 4))), [rng.normal(size=(2, 6))]

    def transpose(rng):
        return (lambda t: ag.transpose(t[0], (2, 0, 1))), [rng.normal(size=(2, 3, 2))]

    def reduce(op, **kw):
        def build(rng):
            return (lambda t: op(t[0], **kw)), [rng.normal(size=(3, 4))]
        return build

    def mx(rng):
        return (lambda t: ag.max_(t[0], axis=1)), [distinct(rng, (3, 4))]

    def clamp(rng):
        x = away_from(rng, (3, 4), points=(-0.5, 0.5), gap=0.05)
        return (lambda t: ag.clamp(t[0], -0.5, 0.5)), [x]

    def pad(rng):
        return (lambda t: ag.pad2d(t[0], 1)), [rng.normal(size=(1, 2, 3, 2))]

    def tri(rng):
        gsize = int(rng.integers(2, 5))
        coords = rng.uniform(0, 1, (5, 3))
        return (lambda t: ag.trilinear_sample(t[0], coords)), [rng.normal(size=(gsize,) * 3 + (3,))]

    def sgd(rng):
        # theta_1 = theta_0 - lr * d/dtheta (sum(x * theta^2)); differentiate through the update
        def fn(t):
            theta, x = t
            g = theta.graph or Graph()
            if theta.graph is None:
                theta_l = g.leaf(theta.data)
                x_l = g.leaf(x.data)
            else:
                theta_l, x_l = theta, x
            inner = ag.sum_(ag.mul(x_l, ag.mul(theta_l, theta_l)))
            (gr,) = ag.backward(g, inner, [theta_l], create_graph=True)
            return ag.mul(ag.sgd_update_node(g, theta_l, gr, 0.3), x_l)
        return fn, [rng.normal(size=(3,)), rng.normal(size=(3,))]

    return [
        ("add", binary(ag.add)),
        ("add-broadcast", bcast),
        ("sub", binary(ag.sub)),
        ("mul", binary(ag.mul)),
        ("scalar-mul", unary(lambda a: ag.scale(a, -1.7), lambda r, s: r.normal(size=s))),
        ("div", binary(ag.div, positive_b=True)),
        ("exp", unary(ag.exp, lambda r, s: r.normal(size=s))),
        ("log", unary(ag.log, lambda r, s: r.uniform(0.3, 3.0, s))),
        ("relu", unary(ag.relu, lambda r, s: away_from(r, s))),
        ("clamp", clamp),
        ("matmul", matmul),
        ("reshape", reshape),
        ("transpose", transpose),
        ("sum", reduce(ag.sum_, axis=1)),
        ("mean", reduce(ag.mean, axis=0)),
        ("max", mx),
        ("logsumexp", reduce(ag.logsumexp, axis=1)),
        ("gather", gather),
        ("scatter-add", scatter),
        ("concat", concat),
        ("pad2d", pad),
        ("conv2d", conv),
        ("maxpool2x2", pool),
        ("softmax-cross-entropy", sce),
        ("trilinear-grid-sample", tri),
        ("sgd-update", sgd),
    ]


def run_op(name, builder, instances, seed=0):
    rng = np.random.default_rng([seed, abs(hash(name)) % (2 ** 31)])
    worst = 0.0
    for _ in range(instances):
        fn, inputs = builder(rng)
        worst = max(worst, fd_check(fn, inputs, rng))
    return worst
