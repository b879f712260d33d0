"""Central finite-difference gradient checking.

Everything runs in float64: the checker promotes inputs, evaluates the
function under test twice per element (x ± h), and compares against the
engine's reverse-mode gradients.  Inputs for each primitive are drawn
well away from non-differentiable points (relu at 0, window-max ties,
min/max ties), since a finite-difference probe straddling a kink says
nothing about the subgradient convention.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor

H_STEP = 1e-3
PRIMITIVE_TOL = 1e-4
LOSS_TOL = 1e-3


def finite_difference(build, arrays, h: float = H_STEP):
    """FD gradient of scalar build(*arrays) w.r.t. every array element."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = g.ravel()
        for idx in range(base.size):
            for sign in (+1.0, -1.0):
                probe = [a.copy() for a in arrays]
                probe[k].ravel()[idx] += sign * h
                val = build(*[Tensor(a) for a in probe])
                flat[idx] += sign * float(val.data) / (2.0 * h)
        grads.append(g)
    return grads


def gradcheck(build, arrays, h: float = H_STEP) -> float:
    """Max relative error between reverse-mode and FD gradients.

    build: callable taking Tensors, returning a scalar Tensor.
    arrays: float64 numpy arrays (the differentiated inputs).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    ag.backward(loss)
    fd = finite_difference(build, arrays, h)
    worst = 0.0
    for t, g_fd in zip(tensors, fd):
        g_an = t.grad if t.grad is not None else np.zeros_like(g_fd)
        scale = max(np.abs(g_an).max(initial=0.0), np.abs(g_fd).max(initial=0.0), 1.0)
        worst = max(worst, float(np.abs(g_an - g_fd).max(initial=0.0)) / scale)
    return worst


def _proj(rng, shape):
    # fixed random projection makes any-output errors visible in a scalar
    return np.asarray(rng.normal(size=shape), dtype=np.float64)


def _spread(rng, shape, gap: float = 5e-3):
    """Values with pairwise gaps > gap (safe for max/tie conventions)."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) + rng.uniform(0.2, 0.8, n)) * (3.0 * gap)
    return vals.reshape(shape)


def _away_from_zero(rng, shape, margin: float = 2e-2):
    x = rng.uniform(-1.0, 1.0, shape)
    x += np.sign(x) * margin
    return x


def primitive_checks(rng):
    """Yield (name, build, arrays) triples covering every engine primitive."""
    # elementwise & broadcasting
    a34 = rng.normal(size=(3, 4))
    b4 = rng.normal(size=(4,))
    p34 = _proj(rng, (3, 4))
    yield "add", lambda a, b: ag.tsum(ag.add(a, b) * p34), [a34, b4]
    yield "subtract_scalar", lambda a: ag.tsum(ag.sub(a, 0.7) * p34), [a34]
    yield "multiply", lambda a, b: ag.tsum(ag.mul(a, b) * p34), [a34, b4]
    den = np.sign(rng.normal(size=(3, 4))) * rng.uniform(0.5, 1.5, (3, 4))
    yield "divide", lambda a, b: ag.tsum(ag.div(a, b) * p34), [a34, den]
    yield "negate", lambda a: ag.tsum(ag.neg(a) * p34), [a34]
    yield "elementwise_square", lambda a: ag.tsum(ag.square(a) * p34), [a34]
    yield "sqrt", lambda a: ag.tsum(ag.sqrt(a) * p34), [rng.uniform(0.1, 2.0, (3, 4))]
    yield "relu", lambda a: ag.tsum(ag.relu(a) * p34), [_away_from_zero(rng, (3, 4))]
    yield "sigmoid", lambda a: ag.tsum(ag.sigmoid(a) * p34), [3.0 * rng.normal(size=(3, 4))]
    ga, gb = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    gb = np.where(np.abs(ga - gb) < 5e-3, gb + 0.1, gb)
    yield "maximum", lambda a, b: ag.tsum(ag.maximum(a, b) * p34), [ga, gb]
    yield "minimum", lambda a, b: ag.tsum(ag.minimum(a, b) * p34), [ga, gb]

    # reductions & shape
    p3, p4, p43b = _proj(rng, (3,)), _proj(rng, (4,)), _proj(rng, (4, 3))
    yield "sum", lambda a: ag.tsum(ag.tsum(a, axis=1) * p3), [a34]
    yield "mean", lambda a: ag.tsum(ag.tmean(a, axis=0) * p4), [a34]
    yield "reshape", lambda a: ag.tsum(ag.reshape(a, (4, 3)) * p43b), [a34]
    yield "transpose", lambda a: ag.tsum(ag.transpose(a, (1, 0)) * p43b), [a34]
    rows = rng.integers(0, 3, size=5)
    cols = rng.integers(0, 4, size=5)
    p5 = _proj(rng, (5,))
    yield "gather", lambda a: ag.tsum(a[(rows, cols)] * p5), [a34]

    # linear algebra / network blocks
    m1 = rng.normal(size=(3, 5))
    m2 = rng.normal(size=(5, 2))
    p32 = _proj(rng, (3, 2))
    yield "matmul", lambda a, b: ag.tsum(ag.matmul(a, b) * p32), [m1, m2]
    yield "softmax_over_channels", (
        lambda a: ag.tsum(ag.softmax_channels(a) * p34)
    ), [2.0 * rng.normal(size=(3, 4))]
    ln_in = rng.normal(size=(3, 4))
    ln_in *= (0.5 + rng.uniform(0.5, 1.5, (3, 1))) / np.linalg.norm(ln_in, axis=1, keepdims=True)
    yield "l2_normalize_over_channels", (
        lambda a: ag.tsum(ag.l2norm_channels(a) * p34)
    ), [ln_in]

    for k, dil in ((3, 1), (2, 1), (2, 2), (3, 2), (1, 1)):
        img = rng.normal(size=(5, 6, 2))
        ker = rng.normal(size=(3, k, k, 2)) / (k * k)
        bias = rng.normal(size=(3,))
        pc = _proj(rng, (5, 6, 3))
        yield (
            f"conv2d_k{k}_d{dil}",
            (lambda pcc, dd: lambda x, w, b: ag.tsum(ag.conv2d(x, w, b, dilation=dd) * pcc))(pc, dil),
            [img, ker, bias],
        )

    # loss building blocks
    for n, stride in ((2, 1), (3, 2)):
        hm = rng.uniform(0.1, 1.0, (6, 7))
        ho = (6 - n) // stride + 1
        wo = (7 - n) // stride + 1
        pb = _proj(rng, (ho, wo))
        yield (
            f"box_sum_n{n}_s{stride}",
            (lambda pbb, nn, ss: lambda x: ag.tsum(ag.box_sum(x, nn, ss) * pbb))(pb, n, stride),
            [hm],
        )
        sm = _spread(rng, (6, 7))
        yield (
            f"max_over_window_n{n}_s{stride}",
            (lambda pbb, nn, ss: lambda x: ag.tsum(ag.window_max(x, nn, ss) * pbb))(pb, n, stride),
            [sm],
        )

    coords = np.stack([
        rng.integers(0, 6, 8) + rng.uniform(0.2, 0.8, 8),
        rng.integers(0, 4, 8) + rng.uniform(0.2, 0.8, 8),
    ], axis=1)
    p8 = _proj(rng, (8,))
    yield "bilinear_sample", (
        lambda m: ag.tsum(ag.bilinear_sample(m, coords) * p8)
    ), [rng.normal(size=(5, 7))]
    p43 = _proj(rng, (4, 3))
    yield "downsample_bilinear", (
        lambda m: ag.tsum(ag.downsample_bilinear(m, (4, 3)) * p43)
    ), [rng.normal(size=(7, 5))]


def run_primitive_suite(trials: int = 20, seed: int = 0, tol: float = PRIMITIVE_TOL):
    """Gradient-check every primitive `trials` times.

    Returns a list of (name, max_rel_err, passed) sorted by name.
    """
    worst = {}
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        for name, build, arrays in primitive_checks(rng):
            err = gradcheck(build, arrays)
            worst[name] = max(worst.get(name, 0.0), err)
    return [(name, err, err <= tol) for name, err in sorted(worst.items())]
