"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every op that has at least one input
with ``requires_grad`` records its inputs and a backward closure on the
output; :func:`backward` orders the recorded graph (a :class:`Tape`) and
replays it in reverse, accumulating into leaf ``grad`` slots.

Ops with no differentiable input record nothing, so frozen evaluation costs
no graph bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class DimensionError(ValueError):
    """Shapes are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from its inputs."""


class CheckError(RuntimeError):
    """Gradient check could not be carried out."""


CHECK_FINITE = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result, recording ``backward_fn`` if any parent needs grads.

    ``backward_fn`` maps the upstream gradient to one gradient (or None) per
    parent, in order.
    """
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError("op produced non-finite values")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


@dataclass
class Tape:
    """Recorded ops reachable from one output, in recording (topological) order."""

    ops: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
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
        return cls(order)

    def backward(self, root: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            grad = np.ones_like(root.data)
        pending: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.dtype)}
        for node in reversed(self.ops):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

    Leaf gradients accumulate: two calls without zeroing double them.
    """
    if not root.requires_grad:
        raise CheckError("backward() on a tensor that does not require grad")
    Tape.from_output(root).backward(root, grad)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, s: float) -> Tensor:
    return make_op(x.data * s, (x,), lambda g: (g * s,))


def scale_offset(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = 1) -> Tensor:
    """``x * gamma + beta`` with 1-D gamma/beta broadcast along ``axis``."""
    axis = axis % x.ndim
    if gamma.ndim != 1 or beta.ndim != 1 or gamma.shape[0] != x.shape[axis] \
            or beta.shape[0] != x.shape[axis]:
        raise DimensionError(
            f"scale/offset of length {gamma.shape}/{beta.shape} on axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    gv, bv = gamma.data.reshape(view), beta.data.reshape(view)
    others = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        return g * gv, (g * x.data).sum(axis=others), g.sum(axis=others)

    return make_op(x.data * gv + bv, (x, gamma, beta), bw)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def maximum(x: Tensor, floor: Tensor) -> Tensor:
    """Elementwise ``max(x, floor)``; ties send the gradient to ``x``."""
    x, floor = as_tensor(x), as_tensor(floor)
    _broadcast_shape(x, floor)
    take_x = x.data >= floor.data
    return make_op(np.where(take_x, x.data, floor.data), (x, floor),
                   lambda g: (_unbroadcast(g * take_x, x.shape),
                              _unbroadcast(g * ~take_x, floor.shape)))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_op(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return make_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt_eps(x: Tensor, eps: float) -> Tensor:
    """``sqrt(x + eps)``."""
    y = np.sqrt(x.data + eps)
    return make_op(y, (x,), lambda g: (g * 0.5 / y,))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    soft = np.exp(y)
    return make_op(y, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------------------
# reductions and shape


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op(np.asarray(y), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    if n == 0:
        raise DimensionError("mean over zero elements")
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reduce_moments(x: Tensor, axes=None) -> tuple[Tensor, Tensor]:
    """Population mean and variance (divide by n) over ``axes``, keepdims."""
    axes_t = tuple(range(x.ndim)) if axes is None else tuple(a % x.ndim for a in np.atleast_1d(axes))
    n = int(np.prod([x.shape[a] for a in axes_t])) if axes_t else 1
    if n == 0 or x.data.size == 0:
        raise DimensionError("moments over zero elements")
    mu = x.data.mean(axis=axes_t, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes_t, keepdims=True)
    m = make_op(mu, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))
    v = make_op(var, (x,), lambda g: (g * centered * (2.0 / n),))
    return m, v


def reshape(x: Tensor, shape) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return make_op(y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return make_op(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),))


def upsample_nearest_w(x: Tensor, factor: int, axis: int = -1) -> Tensor:
    """Repeat each position ``factor`` times along ``axis``."""
    if factor < 1:
        raise DimensionError("upsample factor must be >= 1")
    axis = axis % x.ndim
    y = np.repeat(x.data, factor, axis=axis)

    def bw(g):
        shp = list(x.shape)
        shp.insert(axis + 1, factor)
        return (g.reshape(shp).sum(axis=axis + 1),)

    return make_op(y, (x,), bw)


def concat_w(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        y = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return make_op(y, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_w(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise DimensionError(f"slice [{start}:{stop}] outside extent {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_op(x.data[index].copy(), (x,), bw)


def take_rows(table: Tensor, rows: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D table; unused rows get exactly zero gradient."""
    idx = np.asarray(rows, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_op(table.data[idx], (table,), bw)


# ---------------------------------------------------------------------------
# linear algebra and spatial ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul of {a.shape} and {b.shape}")
    return make_op(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, k: Tensor, stride=1, pad=0) -> Tensor:
    """Zero-padded 2-D cross-correlation of NxCxHxW input with OxCxkhxkw kernel."""
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d of {x.shape} with kernel {k.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    # channel-major patches: cols[c, i, j, n, y, x] = xpad[n, c, y*sh + i, x*sw + j]
    xp = np.pad(x.data.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw]
    cols = cols.reshape(c * kh * kw, n * oh * ow)
    kmat = k.data.reshape(o, c * kh * kw)
    y = (kmat @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3)

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * oh * ow)
        gk = (gm @ cols.T).reshape(k.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ gm).reshape(c, kh, kw, n, oh, ow)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw] += gcols[:, i, j]
            gx = gxp[:, :, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3)
        return gx, gk

    return make_op(np.ascontiguousarray(y), (x, k), bw)


def maxpool2d(x: Tensor, kh: int, kw: int, sh: int | None = None, sw: int | None = None) -> Tensor:
    """Max over kh x kw windows; gradient goes to the first (row-major) maximum."""
    sh = kh if sh is None else sh
    sw = kw if sw is None else sw
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects NxCxHxW, got {x.shape}")
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1 if h >= kh else 0
    ow = (w - kw) // sw + 1 if w >= kw else 0
    if oh <= 0 or ow <= 0:
        raise DimensionError(f"pool window {kh}x{kw} does not fit {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw][:, :, :oh, :ow].reshape(n, c, oh, ow, kh * kw)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                hit = arg == i * kw + j
                if hit.any():
                    gx[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += g * hit
        return (gx,)

    return make_op(np.ascontiguousarray(y), (x,), bw)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    skipped: list[tuple[int, int]]
    worst: tuple[int, int] | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], h: float = 1e-5,
               tolerance: float = 1e-5, floor: float = 1e-6,
               max_coords: int | None = None, rng: np.random.Generator | None = None,
               kink_ratio: float = 0.1, kink_abs: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` with central differences.

    ``x`` is one tensor or a list of tensors; ``f`` is called with no
    arguments and must read them. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``. A coordinate whose one-sided
    differences disagree by more than ``kink_ratio`` of their magnitude (and
    by more than ``kink_abs``) sits on a kink and is reported in ``skipped``
    instead of scored. With
    ``max_coords`` only a random subset of coordinates per tensor is probed.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    def call() -> Tensor:
        try:
            return f()
        except NonFiniteError as exc:
            raise CheckError(f"function value is not finite ({exc})") from None

    out = call()
    if out.data.size != 1:
        raise CheckError("grad_check needs a scalar-valued function")
    f0 = float(out.data.reshape(-1)[0])
    if not np.isfinite(f0):
        raise CheckError("function value is not finite")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    def value() -> float:
        v = float(call().data.reshape(-1)[0])
        if not np.isfinite(v):
            raise CheckError("function value is not finite")
        return v

    worst_err, worst, checked, skipped = 0.0, None, 0, []
    for ti, t in enumerate(xs):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + h
            fp = value()
            flat[ci] = orig - h
            fm = value()
            flat[ci] = orig
            left, right = (f0 - fm) / h, (fp - f0) / h
            if abs(left - right) > max(kink_ratio * max(abs(left), abs(right)), kink_abs):
                skipped.append((ti, int(ci)))
                continue
            num = (fp - fm) / (2 * h)
            a = float(analytic[ti].reshape(-1)[ci])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            checked += 1
            if err > worst_err:
                worst_err, worst = err, (ti, int(ci))
    for t in xs:
        t.grad = None
    return GradCheckReport(worst_err, tolerance, checked, skipped, worst)
