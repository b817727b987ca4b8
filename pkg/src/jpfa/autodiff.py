"""Small dense-tensor engine with reverse-mode differentiation.

Everything is float64 numpy underneath. A :class:`Tensor` built from other
tensors that require gradients records a closure mapping the upstream
gradient to gradients for its parents; :func:`backward` walks those nodes in
reverse creation order, so each node is visited once.

Broadcasting is deliberately absent except for the bias add inside
:func:`conv2d` and :func:`dense`; binary ops insist on equal shapes.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_node_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_node_ids)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> int:
        return backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; all of these route through the named primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_node_ids)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss: Tensor) -> int:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Returns the number of graph nodes visited.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return 0

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen.add(node._id)
        nodes.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    nodes.sort(key=lambda n: n._id, reverse=True)

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    visited = 0
    for node in nodes:
        g = grads.pop(node._id, None)
        visited += 1
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg
    return visited


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def subtract(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "subtract")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "subtract")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make(x.data + float(c), (x,), lambda g: (g,), "add_scalar")


def negate(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "negate")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    factor = np.where(mask, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def atanh(x: Tensor) -> Tensor:
    """Inverse tanh; inputs must lie strictly inside (-1, 1)."""
    if np.any(np.abs(x.data) >= 1.0):
        raise ValueError("atanh needs inputs strictly inside (-1, 1)")
    return _make(np.arctanh(x.data), (x,), lambda g: (g / (1.0 - x.data * x.data),), "atanh")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def absolute(x: Tensor) -> Tensor:
    # sign(0) == 0 gives subgradient 0 at the kink
    sgn = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sgn,), "abs")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def sqrt(x: Tensor) -> Tensor:
    """Square root; the gradient at exactly 0 is taken as 0."""
    y = np.sqrt(x.data)
    safe = np.where(y > 0, y, 1.0)

    def back(g):
        return (np.where(y > 0, 0.5 * g / safe, 0.0),)

    return _make(y, (x,), back, "sqrt")


ELEMENTWISE = {
    "relu": relu,
    "tanh": tanh,
    "atanh": atanh,
    "sigmoid": sigmoid,
    "abs": absolute,
    "negate": negate,
    "square": square,
    "scale": scale,
    "add": add,
    "subtract": subtract,
}


def elementwise(x: Tensor, fn: str, other=None) -> Tensor:
    """Dispatch by name: unary ops take no ``other``; ``scale`` takes a float,
    ``add``/``subtract`` take a second tensor of the same shape."""
    try:
        op = ELEMENTWISE[fn]
    except KeyError:
        raise ValueError(f"unknown elementwise op {fn!r}") from None
    if fn in ("scale", "add", "subtract"):
        if other is None:
            raise ValueError(f"{fn} needs a second operand")
        return op(x, other)
    return op(x)


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None or axes == "all":
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce(x: Tensor, mode: str = "sum", axes=None) -> Tensor:
    if mode not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {mode!r}")
    ax = _normalize_axes(axes, x.data.ndim)
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    out = x.data.sum(axis=ax)
    if mode == "mean":
        out = out / count
    factor = 1.0 / count if mode == "mean" else 1.0
    in_shape = x.shape

    def back(g):
        g = np.expand_dims(g, ax) if ax else g
        return (np.broadcast_to(g * factor, in_shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (x,), back, mode)


def sum(x: Tensor, axes=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return reduce(x, "sum", axes)


def mean(x: Tensor, axes=None) -> Tensor:
    return reduce(x, "mean", axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(in_shape),), "reshape")


def take_rows(x: Tensor, index) -> Tensor:
    """Select rows ``x[index]`` along the first axis."""
    index = np.asarray(index, dtype=np.intp)
    in_shape = x.shape

    def back(g):
        out = np.zeros(in_shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), back, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def pairwise_sq_dists(x: Tensor, y: Tensor) -> Tensor:
    """``out[i, j] = ||x_i - y_j||^2`` for row sets ``x`` (n, d), ``y`` (m, d)."""
    if x.data.ndim != 2 or y.data.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"pairwise_sq_dists: incompatible shapes {x.shape} and {y.shape}")
    xd, yd = x.data, y.data
    diff = xd[:, None, :] - yd[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def back(g):
        gd = 2.0 * g[:, :, None] * diff
        return gd.sum(axis=1), -gd.sum(axis=0)

    return _make(out, (x, y), back, "pairwise_sq_dists")


# ---------------------------------------------------------------------------
# layers


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` (N, D), ``weight`` (D, K), ``bias`` (K,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data

    def back(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _make(out, (x, weight, bias), back, "dense")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation, NCHW input and OIHW kernel, optional per-channel bias."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride {stride} / padding {padding}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels, kernel {kernel.shape} expects {ci}")
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if hp < kh or wp < kw or ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kernel.shape} too large for input {x.shape}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # rows ordered (c, kh, kw), columns (n, ho, wo): the copy runs along contiguous image rows
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    wmat = kernel.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def back(g):
        go = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (go @ cols.T).reshape(kernel.shape)
        if x.requires_grad:
            # transposed convolution: dilate g by the stride, pad by k-1, correlate with the flipped kernel
            he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            gd = np.zeros((n, o, he + 2 * (kh - 1), we + 2 * (kw - 1)), dtype=DTYPE)
            gd[:, :, kh - 1:kh - 1 + he:stride, kw - 1:kw - 1 + we:stride] = g
            gwin = sliding_window_view(gd, (kh, kw), axis=(2, 3))
            gcols = gwin.transpose(1, 4, 5, 0, 2, 3).reshape(o * kh * kw, -1)
            wflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            full = (wflip @ gcols).reshape(c, n, he + kh - 1, we + kw - 1).transpose(1, 0, 2, 3)
            gxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
            gxp[:, :, :he + kh - 1, :we + kw - 1] = full
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        if bias is not None and bias.requires_grad:
            gb = go.sum(axis=1)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(np.ascontiguousarray(out), parents, back, "conv2d")


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Per-window max; ties route the gradient to the first index in row-major window order."""
    stride = window if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-d input, got {x.shape}")
    if window < 1 or stride < 1:
        raise ValueError("maxpool2d: window and stride must be positive")
    n, c, h, w = x.shape
    if h < window or w < window:
        raise ShapeError(f"maxpool2d: window {window} larger than spatial extent {(h, w)}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros((n, c, h, w), dtype=DTYPE)
        he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(window):
            for j in range(window):
                sel = arg == i * window + j
                gx[:, :, i:i + he:stride, j:j + we:stride] += np.where(sel, g, 0.0)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), back, "maxpool2d")


def upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour spatial upsampling."""
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def back(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), back, "upsample2d")


# ---------------------------------------------------------------------------
# checking


def gradient_check(builder: Callable[[Tensor], Tensor], point, eps: float = 1e-4,
                   indices: Iterable[tuple[int, ...]] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``builder`` maps a leaf tensor to a scalar loss. The error per component is
    ``|analytic - numeric| / max(1, |analytic|)``. Non-finite values anywhere
    yield ``inf`` rather than an exception. ``indices`` restricts the
    comparison to a subset of components (useful for large parameters).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(point, dtype=DTYPE)
    leaf = Tensor(base.copy(), requires_grad=True)
    with np.errstate(all="ignore"):
        loss = builder(leaf)
        if not np.all(np.isfinite(loss.data)):
            return float("inf")
        backward(loss)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    if not np.all(np.isfinite(analytic)):
        return float("inf")

    def evaluate(arr: np.ndarray) -> float:
        with no_grad(), np.errstate(all="ignore"):
            return float(builder(Tensor(arr)).data.reshape(-1)[0])

    if indices is None:
        indices = np.ndindex(base.shape)
    worst = 0.0
    for idx in indices:
        plus = base.copy()
        minus = base.copy()
        plus[idx] += eps
        minus[idx] -= eps
        fp, fm = evaluate(plus), evaluate(minus)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            return float("inf")
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic[idx]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
