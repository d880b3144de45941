"""Reverse-mode differentiable arrays on top of numpy.

A :class:`Tensor` wraps an ``ndarray`` and, when gradients are tracked,
remembers the operation that produced it. Calling :func:`backward` on a
scalar walks the graph in reverse topological order and accumulates
``grad`` on every tensor that requires it.

Only the kernels needed by the unfolded estimator are provided: dense and
batched matmul, 2-D convolution, 2x2 max pooling, 2x bilinear upsampling,
softmax and a handful of elementwise/reduction ops.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Kernel configuration (padding, stride, pooling size) is invalid."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    """Trainable leaf; floating arrays keep their own precision."""
    dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else None
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True) if g.shape == t.shape else np.broadcast_to(g, t.shape).copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# backward driver


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tracked tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate buffers are reset
    so that repeated calls on the same graph add exactly one more
    contribution each.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad")
    order = _topo_order(loss)
    for node in order:
        if not node.is_leaf:
            node.grad = None
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), bw, "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), bw, "relu")


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    z = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)

    def bw(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), bw, "sigmoid")


def square(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, 2.0 * g * a.data)

    return _make(a.data * a.data, (a,), bw, "square")


# ---------------------------------------------------------------------------
# shape ops and reductions


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape

    def bw(g):
        _accum(a, g.reshape(src))

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=ax)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, src))

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([src[i] for i in axes]))
    inv = 1.0 / count

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g * inv, src))

    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw, "mean")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes of a B x C x H x W map, kept as 1x1."""
    return mean(x, axis=(2, 3), keepdims=True)


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    return mean(square(sub(a, b)))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading axes with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# convolution, pooling, resampling


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv2d: (size {n} + 2*{padding} - kernel {k}) is not a multiple of stride {stride}"
        )
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (B, Cin, H, W) with ``w`` (Cout, Cin, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} do not conform")
    cout, cin, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel size {kh}x{kw} must be odd")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    bsz, _, h, wd = x.shape
    ho = _out_size(h, kh, stride, padding)
    wo = _out_size(wd, kw, stride, padding)
    w2 = w.data.reshape(cout, -1)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0

    # cols: (B, Cin*kh*kw, Ho*Wo), ordered like w.reshape(Cout, -1)
    if pointwise:
        cols = x.data.reshape(bsz, cin, h * wd)
    else:
        if padding:
            xp = np.zeros((bsz, cin, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
            xp[:, :, padding : padding + h, padding : padding + wd] = x.data
        else:
            xp = x.data
        if stride == 1:
            # windows of output size, one per kernel offset: (B, Cin, kh, kw, Ho, Wo)
            cols = sliding_window_view(xp, (ho, wo), axis=(2, 3)).reshape(bsz, cin * kh * kw, ho * wo)
        else:
            cols = np.empty((bsz, cin, kh, kw, ho, wo), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            cols = cols.reshape(bsz, cin * kh * kw, ho * wo)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]

    def bw(g):
        g = g.reshape(bsz, cout, ho * wo)
        if w.requires_grad:
            _accum(w, (g @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = w2.T @ g
            if pointwise:
                _accum(x, dcols.reshape(x.shape))
                return
            dcols = dcols.reshape(bsz, cin, kh, kw, ho, wo)
            dxp = np.zeros((bsz, cin, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + wd]
            _accum(x, dxp)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out.reshape(bsz, cout, ho, wo), parents, bw, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first element in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2: expected B x C x H x W, got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"maxpool2: spatial size {h}x{w} must be even")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        mask = np.arange(4) == idx[..., None]
        dx = (mask * g[..., None]).reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        _accum(x, dx.reshape(b, c, h, w))

    return _make(out, (x,), bw, "maxpool2")


_UPSAMPLE_CACHE: dict[tuple[int, str], np.ndarray] = {}


def upsample_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """(2n x n) linear interpolation matrix, half-pixel centres, edges clamped."""
    key = (n, np.dtype(dtype).str)
    m = _UPSAMPLE_CACHE.get(key)
    if m is None:
        m = np.zeros((2 * n, n), dtype=dtype)
        for o in range(2 * n):
            src = max((o + 0.5) / 2.0 - 0.5, 0.0)
            i0 = min(int(math.floor(src)), n - 1)
            i1 = min(i0 + 1, n - 1)
            frac = src - i0
            m[o, i0] += 1.0 - frac
            m[o, i1] += frac
        _UPSAMPLE_CACHE[key] = m
    return m


def bilinear_upsample2(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling (align_corners=False convention)."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample2: expected B x C x H x W, got {x.shape}")
    _, _, h, w = x.shape
    uh = upsample_matrix(h, x.dtype)
    uw = upsample_matrix(w, x.dtype)
    out = uh @ x.data @ uw.T

    def bw(g):
        _accum(x, uh.T @ g @ uw)

    return _make(out, (x,), bw, "upsample2")


# ---------------------------------------------------------------------------
# optimisation


def adam_step(params, grads, state: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` (list of ndarrays)."""
    t = state.get("step", 0) + 1
    state["step"] = t
    ms = state.setdefault("m", [np.zeros_like(p) for p in params])
    vs = state.setdefault("v", [np.zeros_like(p) for p in params])
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, ms, vs):
        if g is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.lr,
            self.betas[0],
            self.betas[1],
            self.eps,
        )


# ---------------------------------------------------------------------------
# finite-difference checking


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5, index=None, kink_tol: float | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``t.data``.

    ``index`` restricts the probe to a subset of flat positions; other
    entries are returned as NaN. With ``kink_tol`` set, probes whose two
    one-sided slopes disagree by more than that fraction straddle a
    non-differentiable point (a relu or max switching) and are also NaN.
    """
    flat = t.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if index is None else index
    with no_grad():
        f0 = float(fn().data) if kink_tol is not None else 0.0
        for i in positions:
            old = flat[i]
            flat[i] = old + h
            fp = float(fn().data)
            flat[i] = old - h
            fm = float(fn().data)
            flat[i] = old
            if kink_tol is not None:
                right, left = (fp - f0) / h, (f0 - fm) / h
                scale = max(abs(right), abs(left), 1e-8)
                if abs(right - left) > kink_tol * scale:
                    continue
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(t.shape)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor), ignoring NaN probes."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


@dataclass
class GradcheckStats:
    max_rel_error: float
    probed: int
    skipped: int
    floor: float


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5, sample: int | None = None, rng=None,
              rel_floor: float = 0.0, kink_tol: float | None = None, stats: bool = False):
    """Largest relative error between analytic and central-difference grads.

    ``sample`` limits each tensor to that many randomly chosen entries.
    The denominator floor is ``max(1e-6, rel_floor * max |numeric grad|)``
    so entries far below the gradient's scale, where difference quotients
    carry only roundoff, are compared in absolute terms. ``kink_tol`` is
    passed to :func:`numerical_grad`. With ``stats`` a
    :class:`GradcheckStats` is returned instead of the bare error.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    rng = rng or np.random.default_rng(0)
    pairs = []
    for t in tensors:
        idx = None
        if sample is not None and t.size > sample:
            idx = rng.choice(t.size, size=sample, replace=False)
        num = numerical_grad(fn, t, h, idx, kink_tol)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        pairs.append((ana, num, t.size if idx is None else len(idx)))
    finite = [np.nanmax(np.abs(n)) for _, n, _ in pairs if not np.all(np.isnan(n))]
    floor = max(1e-6, rel_floor * max(finite, default=0.0))
    worst = max((max_rel_error(a, n, floor) for a, n, _ in pairs), default=0.0)
    if not stats:
        return worst
    probed = sum(k for *_, k in pairs)
    kept = sum(int(np.sum(~np.isnan(n))) for _, n, _ in pairs)
    return GradcheckStats(worst, probed, probed - kept, floor)
