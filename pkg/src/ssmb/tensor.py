"""Small numpy-backed tensor with reverse-mode differentiation.

Every tensor created by an operation gets a monotonically increasing sequence
number. ``backward`` sorts the reachable graph by that number, so gradients are
propagated in exact reverse order of the forward computation.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "AxisError",
    "precision",
    "get_default_dtype",
    "no_grad",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "maximum",
    "relu",
    "sqrt",
    "exp",
    "log",
    "neg",
    "matmul",
    "conv2d",
    "max_pool2d",
    "reduce",
    "sum",
    "mean",
    "amax",
    "softmax",
    "log_softmax",
    "reshape",
    "transpose",
    "concat",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class AxisError(ValueError):
    """A reduction or concatenation axis does not exist."""


_state = {"dtype": np.dtype(np.float32), "grad": True}
_counter = itertools.count()


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


@contextmanager
def precision(dtype):
    """Temporarily change the element type used for new tensors."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = _state["dtype"]
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._seq = next(_counter)

    # -- introspection -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item()) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of trailing-dimension broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise --------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by exact zero")

    def grad_fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _make(ad / bd, (a, b), grad_fn, "div")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    take_a = a.data >= b.data

    def grad_fn(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _make(np.where(take_a, a.data, b.data), (a, b), grad_fn, "maximum")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    b = _as_tensor(b)
    return _as_tensor(a, like=b), b


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "max-with": maximum}
_UNARY = {"relu": relu, "sqrt": sqrt, "exp": exp, "log": log, "negate": neg}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if kind in _BINARY:
        if b is None:
            raise TypeError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# -- linear algebra -----------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over an N×C×H×W batch with zero padding."""
    x = _as_tensor(x)
    w = _as_tensor(w, like=x)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs N×C×H×W input and O×C×kh×kw kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"kernel expects {cw} channels, input has {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("kernel extents must be odd")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("kernel larger than padded input")
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = _as_tensor(b, like=x)
        if b.shape != (o,):
            raise ShapeError(f"bias shape {b.shape} does not match {o} output channels")
        parents = (x, w, b)

    # im2col with channel-major rows (c, i, j) and columns (n, y, x)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))).transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo)
    if b is not None:
        out += b.data[:, None, None, None]
    out = out.transpose(1, 0, 2, 3)
    need_x, need_w = x.requires_grad, w.requires_grad

    def grad_fn(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (gm @ cols.T).reshape(w.shape) if need_w else None
        gx = None
        if need_x:
            gcols = (wmat.T @ gm).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + wd].transpose(1, 0, 2, 3)
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    return _make(np.ascontiguousarray(out), parents, grad_fn, "conv2d")


# -- reductions ---------------------------------------------------------
def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise AxisError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise AxisError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(kind: str, x, axes=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axes`` (all axes when None)."""
    x = _as_tensor(x)
    ax = _norm_axes(axes, x.ndim)
    kept_shape = tuple(1 if i in ax else n for i, n in enumerate(x.shape))
    xshape = x.shape

    if kind == "sum":
        out = x.data.sum(axis=ax, keepdims=True)

        def grad_fn(g):
            return (np.broadcast_to(g.reshape(kept_shape), xshape).copy(),)

    elif kind == "mean":
        count = int(np.prod([xshape[i] for i in ax])) if ax else 1
        out = x.data.mean(axis=ax, keepdims=True)

        def grad_fn(g):
            return (np.broadcast_to(g.reshape(kept_shape) / count, xshape).copy(),)

    elif kind == "max":
        if x.size == 0:
            raise ShapeError("max of empty tensor")
        rest = tuple(i for i in range(x.ndim) if i not in ax)
        moved_shape = tuple(xshape[i] for i in rest + ax)
        flat = np.ascontiguousarray(np.transpose(x.data, rest + ax)).reshape(moved_shape[: len(rest)] + (-1,))
        first = np.argmax(flat, axis=-1)[..., None]  # first attaining index
        out = np.take_along_axis(flat, first, axis=-1).reshape(kept_shape)

        def grad_fn(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, first, g.reshape(first.shape), axis=-1)
            return (np.transpose(gflat.reshape(moved_shape), np.argsort(rest + ax)),)

    else:
        raise ValueError(f"unknown reduction {kind!r}")

    if not keepdims:
        out = out.reshape(tuple(n for i, n in enumerate(xshape) if i not in ax))
    return _make(np.asarray(out), (x,), grad_fn, kind)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    return reduce("sum", x, axis, keepdims)


def mean(x, axis=None, keepdims=False) -> Tensor:
    return reduce("mean", x, axis, keepdims)


def amax(x, axis=None, keepdims=False) -> Tensor:
    return reduce("max", x, axis, keepdims)


def max_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping k×k max pooling, built from reshape + max reduction."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"spatial size {h}×{w} not divisible by pool {k}")
    return reduce("max", reshape(x, (n, c, h // k, k, w // k, k)), (3, 5))


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if np.isnan(x.data).any():
        raise DomainError("softmax input contains NaN")
    (axis,) = _norm_axes(axis, x.ndim)
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), grad_fn, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    (axis,) = _norm_axes(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def grad_fn(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), grad_fn, "log_softmax")


# -- structural ---------------------------------------------------------
def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    xshape = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (x,), lambda g: (g.reshape(xshape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of no tensors")
    (ax,) = _norm_axes(axis, ts[0].ndim)
    try:
        out = np.concatenate([t.data for t in ts], axis=ax)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def index(x, key) -> Tensor:
    """``x[key]`` for basic slices or integer-array indexing."""
    x = _as_tensor(x)
    if isinstance(key, Tensor):
        key = key.data
    out = x.data[key]
    xshape, xdtype = x.shape, x.dtype

    def grad_fn(g):
        gx = np.zeros(xshape, dtype=xdtype)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(np.array(out), (x,), grad_fn, "index")


# -- backward -----------------------------------------------------------
def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for t in sorted(nodes.values(), key=lambda t: t._seq, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.dtype)
            grads[id(p)] = pg if id(p) not in grads else grads[id(p)] + pg
