"""Reverse-mode automatic differentiation on dense numpy arrays.

The engine records, for every produced tensor, its parent tensors and a
closure that maps the output adjoint to parent adjoints.  The list of
operations in execution order (the "tape") is never materialized up
front; `backward` recovers it as the topological order of the recorded
graph, then replays adjoints in reverse.  Calling `backward` twice
without clearing `.grad` accumulates gradients; that is deliberate and
relied on by the training loop (per-pair backward within a batch).

Precision: tensors carry float32 by default (training/inference) and
float64 when constructed from 64-bit data (gradient checking).  Binary
ops follow numpy promotion, so mixing a float64 leaf in promotes the
graph downstream of it.

Tie-breaking conventions, fixed for determinism:
  - relu gradient at exactly 0 is 0;
  - window_max routes gradient to the first maximal element in
    row-major order within each window;
  - maximum(a, b) routes to `a` on ties, minimum(a, b) likewise.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "backward", "apply_primitive", "PRIMITIVE_KINDS",
    "add", "sub", "mul", "div", "neg", "square", "sqrt", "relu",
    "sigmoid", "maximum", "minimum", "tsum", "tmean", "matmul",
    "reshape", "transpose", "conv2d", "softmax_channels",
    "l2norm_channels", "box_sum", "window_max", "bilinear_sample",
    "downsample_bilinear",
]


def _as_array(value, like=None):
    a = np.asarray(value)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64 if (like is not None and like.dtype == np.float64) else np.float32)
    return a


class Tensor:
    """Dense array + optional gradient slot + backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def item(self) -> float:
        return float(self.data.reshape(()))


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    t = Tensor.__new__(Tensor)
    t.data = _as_array(value, like=like.data)
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._backward = None
    return t


def _make(data, parents, bw) -> Tensor:
    """Build an op output; prune the graph when no parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(p for p in parents if p.requires_grad) if needs else ()
    out._backward = bw if needs else None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape` (reversing numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires_grad leaf reachable from `loss`.

    `loss` must be scalar (size 1) and attached to a recorded graph.
    The tape is the topological order of that graph; adjoints are
    replayed in reverse.  Grads accumulate across repeated calls.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached: no requires_grad leaf feeds it")

    # iterative post-order DFS; parents visited in recorded order
    tape = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            tape.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in visited:
                stack.append((p, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(tape):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------
# elementwise / broadcasting ops
# ---------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    out_data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bw)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out_data / b.data, b.shape))

    return _make(out_data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(g * (2.0 * a.data))

    return _make(a.data * a.data, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bw(g):
        a._accumulate(g / (2.0 * out_data))

    return _make(out_data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0 (strict inequality)
    mask = a.data > 0

    def bw(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    # clip keeps exp in range; analytic grad s(1-s) is ~0 there anyway
    out_data = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60.0, 60.0)))

    def bw(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw)


def maximum(a, b) -> Tensor:
    """Elementwise max; gradient routed to `a` on exact ties."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    take_a = a.data >= b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.shape))

    return _make(np.where(take_a, a.data, b.data), (a, b), bw)


def minimum(a, b) -> Tensor:
    """Elementwise min; gradient routed to `a` on exact ties."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    take_a = a.data <= b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.shape))

    return _make(np.where(take_a, a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------------
# reductions / shape
# ---------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.shape))

    return _make(np.asarray(out_data), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out_data.size, 1)

    def bw(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.shape) / count)

    return _make(np.asarray(out_data), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    def bw(g):
        inv = None if axes is None else np.argsort(axes)
        a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw)


def _getitem(a: Tensor, index) -> Tensor:
    """Basic slicing or constant integer-array gather.

    Supported index forms: slices/ints (basic), a 1-D integer array
    (row gather), or a tuple of equal-length integer arrays (pointwise
    gather).  Index arrays are data, never differentiated through.
    """
    out_data = a.data[index]

    advanced = isinstance(index, np.ndarray) or (
        isinstance(index, tuple) and any(isinstance(i, np.ndarray) for i in index)
    )

    def bw(g):
        acc = np.zeros_like(a.data)
        if advanced:
            np.add.at(acc, index, g)
        else:
            acc[index] += g
        a._accumulate(acc)

    return _make(np.ascontiguousarray(out_data), (a,), bw)


def matmul(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), bw)


# ---------------------------------------------------------------------
# structured primitives (network + losses)
# ---------------------------------------------------------------------

def _same_pad(k: int, dilation: int):
    # total padding d*(k-1); odd totals put the extra pixel on top/left
    total = dilation * (k - 1)
    before = (total + 1) // 2
    return before, total - before


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """Dilated same-padding cross-correlation.

    x: H×W×Cin, kernel: Cout×kh×kw×Cin, bias: Cout → H×W×Cout.
    """
    if x.data.ndim != 3:
        raise ValueError(f"conv2d input must be H×W×Cin, got shape {x.shape}")
    if kernel.data.ndim != 4:
        raise ValueError(f"conv2d kernel must be Cout×kh×kw×Cin, got shape {kernel.shape}")
    H, W, Cin = x.shape
    Cout, kh, kw, kcin = kernel.shape
    if kcin != Cin:
        raise ValueError(f"kernel expects {kcin} input channels, image has {Cin}")
    if dilation < 1 or kh < 1 or kw < 1:
        raise ValueError("kernel size and dilation must be >= 1")

    pt, pb = _same_pad(kh, dilation)
    pl, pr = _same_pad(kw, dilation)
    xp = np.pad(x.data, ((pt, pb), (pl, pr), (0, 0)))

    wmat = kernel.data  # (Cout, kh, kw, Cin)
    out = np.tile(bias.data.astype(x.dtype), (H, W, 1)).astype(np.result_type(x.dtype, kernel.dtype))
    flat = out.reshape(H * W, Cout)
    for i in range(kh):
        for j in range(kw):
            patch = xp[i * dilation:i * dilation + H, j * dilation:j * dilation + W, :]
            flat += patch.reshape(H * W, Cin) @ wmat[:, i, j, :].T
    out = flat.reshape(H, W, Cout)

    def bw(g):
        gmat = g.reshape(H * W, Cout)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 1)))
        if kernel.requires_grad:
            dk = np.empty_like(kernel.data)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[i * dilation:i * dilation + H, j * dilation:j * dilation + W, :]
                    dk[:, i, j, :] = gmat.T @ patch.reshape(H * W, Cin)
            kernel._accumulate(dk)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[i * dilation:i * dilation + H, j * dilation:j * dilation + W, :] += (
                        gmat @ wmat[:, i, j, :]
                    ).reshape(H, W, Cin)
            x._accumulate(dxp[pt:pt + H, pl:pl + W, :])

    return _make(out, (x, kernel, bias), bw)


def softmax_channels(x: Tensor) -> Tensor:
    """Numerically stable softmax along the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        x._accumulate(out_data * (g - dot))

    return _make(out_data, (x,), bw)


def l2norm_channels(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Unit-normalize along the last axis: x / sqrt(sum(x**2) + eps).

    The guard inside the square root maps the zero vector to the zero
    vector instead of NaN.
    """
    s = (x.data * x.data).sum(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(s + eps)
    out_data = x.data * inv

    def bw(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        x._accumulate(inv * (g - out_data * dot))

    return _make(out_data, (x,), bw)


def box_sum(x: Tensor, n: int, stride: int = 1) -> Tensor:
    """Sum over every n×n window of a 2-D map, windows fully inside,
    top-left corners on the stride lattice.  Output (H', W') with
    H' = (H-n)//stride + 1."""
    if x.data.ndim != 2:
        raise ValueError("box_sum expects a 2-D map")
    H, W = x.shape
    if n > min(H, W):
        raise ValueError(f"window {n} exceeds map size {H}x{W}")
    # integral image in float64 keeps the differencing exact for f32 maps
    ii = np.zeros((H + 1, W + 1), dtype=np.float64)
    np.cumsum(x.data, axis=0, out=ii[1:, 1:])
    np.cumsum(ii[1:, 1:], axis=1, out=ii[1:, 1:])
    r = np.arange(0, H - n + 1, stride)
    c = np.arange(0, W - n + 1, stride)
    out_data = (
        ii[np.ix_(r + n, c + n)] - ii[np.ix_(r, c + n)]
        - ii[np.ix_(r + n, c)] + ii[np.ix_(r, c)]
    ).astype(x.dtype)

    def bw(g):
        acc = np.zeros_like(x.data)
        Ho, Wo = out_data.shape
        re = (Ho - 1) * stride + 1
        ce = (Wo - 1) * stride + 1
        for di in range(n):
            for dj in range(n):
                acc[di:di + re:stride, dj:dj + ce:stride] += g
        x._accumulate(acc)

    return _make(out_data, (x,), bw)


def window_max(x: Tensor, n: int, stride: int = 1) -> Tensor:
    """Max over every n×n window (same lattice as box_sum); the gradient
    goes to the first maximal element in row-major window order."""
    if x.data.ndim != 2:
        raise ValueError("window_max expects a 2-D map")
    H, W = x.shape
    if n > min(H, W):
        raise ValueError(f"window {n} exceeds map size {H}x{W}")
    view = np.lib.stride_tricks.sliding_window_view(x.data, (n, n))[::stride, ::stride]
    Ho, Wo = view.shape[:2]
    flat = view.reshape(Ho, Wo, n * n)
    arg = flat.argmax(axis=-1)  # first max in row-major order
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0].copy()

    ho, wo = np.meshgrid(np.arange(Ho), np.arange(Wo), indexing="ij")
    rows = ho * stride + arg // n
    cols = wo * stride + arg % n

    def bw(g):
        acc = np.zeros_like(x.data)
        np.add.at(acc, (rows, cols), g)
        x._accumulate(acc)

    return _make(out_data, (x,), bw)


def bilinear_sample(m: Tensor, coords: np.ndarray) -> Tensor:
    """Sample a H×W or H×W×C map at float (x, y) positions.

    coords: (M, 2) constant array, column 0 = x, column 1 = y.
    Out-of-bounds positions are clamped; callers track validity
    separately (see synth.inbounds_mask).  Linear in the map values.
    """
    coords = np.asarray(coords, dtype=np.float64)
    H, W = m.shape[:2]
    x = np.clip(coords[:, 0], 0.0, W - 1.0)
    y = np.clip(coords[:, 1], 0.0, H - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x0 = np.minimum(x0, W - 2) if W > 1 else x0
    y0 = np.minimum(y0, H - 2) if H > 1 else y0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0).astype(m.dtype)
    fy = (y - y0).astype(m.dtype)
    if m.data.ndim == 3:
        fx = fx[:, None]
        fy = fy[:, None]
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    out_data = (
        w00 * m.data[y0, x0] + w01 * m.data[y0, x1]
        + w10 * m.data[y1, x0] + w11 * m.data[y1, x1]
    )

    def bw(g):
        acc = np.zeros_like(m.data)
        np.add.at(acc, (y0, x0), g * w00)
        np.add.at(acc, (y0, x1), g * w01)
        np.add.at(acc, (y1, x0), g * w10)
        np.add.at(acc, (y1, x1), g * w11)
        m._accumulate(acc)

    return _make(out_data, (m,), bw)


def downsample_bilinear(x: Tensor, out_hw) -> Tensor:
    """Resize a H×W or H×W×C map to (h, w) by bilinear interpolation
    with half-pixel-aligned sample centers."""
    h, w = out_hw
    H, W = x.shape[:2]
    sy = (np.arange(h) + 0.5) * (H / h) - 0.5
    sx = (np.arange(w) + 0.5) * (W / w) - 0.5
    gy, gx = np.meshgrid(sy, sx, indexing="ij")
    coords = np.stack([gx.ravel(), gy.ravel()], axis=1)
    sampled = bilinear_sample(x, coords)
    out_shape = (h, w) if x.data.ndim == 2 else (h, w, x.shape[2])
    return reshape(sampled, out_shape)


# ---------------------------------------------------------------------
# primitive dispatcher
# ---------------------------------------------------------------------

def _subtract_scalar(x: Tensor, value: float) -> Tensor:
    return sub(x, float(value))


def _max_over_window(x: Tensor, window: int, stride: int = 1) -> Tensor:
    return window_max(x, window, stride)


def _downsample(x: Tensor, size) -> Tensor:
    return downsample_bilinear(x, size)


PRIMITIVE_KINDS = {
    "relu": relu,
    "elementwise_square": square,
    "softmax_over_channels": softmax_channels,
    "l2_normalize_over_channels": l2norm_channels,
    "downsample_bilinear": _downsample,
    "add": add,
    "multiply": mul,
    "subtract_scalar": _subtract_scalar,
    "sum": tsum,
    "mean": tmean,
    "max_over_window": _max_over_window,
}


def apply_primitive(kind: str, *operands, **params) -> Tensor:
    """Dispatch by primitive name; unknown kinds are rejected."""
    try:
        fn = PRIMITIVE_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    return fn(*operands, **params)
