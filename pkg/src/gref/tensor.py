"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small numeric core: every primitive records its parents and a
closure that pushes the output gradient back to them.  ``backward`` walks the
recorded graph in reverse topological order.  Arrays are numpy; the default
dtype is float32, switchable to float64 for gradient checks.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from gref.errors import InvalidArgumentError, ShapeError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

#: number of times cross_entropy had to clamp a zero probability
CE_FLOOR = 1e-12
ce_floor_hits = 0


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise InvalidArgumentError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


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
    """Disable graph recording (inference and frozen reference models)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._prev = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(np.asarray(g), self.data.shape)
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # -- introspection --------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(np.asarray(self.data).item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise InvalidArgumentError(f"backward() needs a scalar root, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._prev, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg), parent.data.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operators ------------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and np.issubdtype(x.dtype, np.floating):
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce operands; plain Python numbers take the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, (Tensor, np.ndarray)):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, (Tensor, np.ndarray)):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return Tensor._make(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return Tensor._make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _np_sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    return Tensor._make(out, (a,), lambda g: (g * _np_sigmoid(-x),))


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False, accumulate64: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    if accumulate64:
        out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64)
    else:
        out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._make(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False, accumulate64: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims, accumulate64) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(a.data[index], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(np.broadcast_to(a.data, shape), (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dims")
    # a weight matrix shared across leading dims is applied as one 2-D GEMM
    shared = b.ndim == 2 and a.ndim > 2

    def backward(g):
        ga = gb = None
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g2
        else:
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    if shared:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data
    return Tensor._make(out, (a, b), backward)


# ---------------------------------------------------------------------------
# indexing primitives
# ---------------------------------------------------------------------------

def embedding(table, idx) -> Tensor:
    """Row lookup ``table[idx]`` for an integer index array of any shape."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(table.data[idx], (table,), backward)


def gather_rows(x, idx) -> Tensor:
    """Batched row gather: x (B, N, d), idx (B, L) -> (B, L, d)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    b = np.arange(x.shape[0])[:, None]

    def backward(g):
        full = np.zeros_like(x.data, dtype=g.dtype)
        np.add.at(full, (np.broadcast_to(b, idx.shape), idx), g)
        return (full,)

    return Tensor._make(x.data[b, idx], (x,), backward)


def take_along(x, idx, axis: int = -1) -> Tensor:
    """``np.take_along_axis`` with gradient."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    axis = axis % x.ndim

    def backward(g):
        full = np.zeros_like(x.data, dtype=g.dtype)
        # duplicates along the axis must accumulate
        grids = list(np.indices(idx.shape, sparse=True))
        grids[axis] = idx
        np.add.at(full, tuple(grids), g)
        return (full,)

    return Tensor._make(np.take_along_axis(x.data, idx, axis), (x,), backward)


def masked_fill(x, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return Tensor._make(out, (x,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype, copy=False),))


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(g):
        gxhat = g * gamma.data
        gx = inv / d * (d * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, g * xhat, g

    return Tensor._make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(probabilities, target_index) -> Tensor:
    """-log p[target] along the last axis, clamping p at CE_FLOOR.

    ``target_index`` may be an int or an integer array matching the leading
    dimensions of ``probabilities``.
    """
    global ce_floor_hits
    p = as_tensor(probabilities)
    idx = np.asarray(target_index, dtype=np.int64)
    n = p.shape[-1]
    if np.any(idx < 0) or np.any(idx >= n):
        raise InvalidArgumentError(f"target index out of range [0, {n})")
    picked = take_along(p, idx[..., None], axis=-1)
    hits = picked.data < CE_FLOOR
    if np.any(hits):
        ce_floor_hits += int(hits.sum())
        picked = masked_fill(picked, hits, CE_FLOOR)
    out = neg(log(picked))
    return reshape(out, out.shape[:-1])


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(function: Callable[[], Tensor], point: Iterable[Tensor],
                      epsilon: float = 1e-6, reference: Callable[[], float] | None = None,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Largest per-tensor relative error between analytic and central-difference gradients.

    For each tensor in ``point`` the error is ||a - n|| / max(||a||, ||n||)
    over the checked coordinates (0 when both vanish).  ``function`` is
    evaluated with no arguments and must read the tensors in ``point``; their
    ``data`` is perturbed in place one coordinate at a time.  ``reference``
    optionally evaluates the same function by another route (for instance a
    float64 copy) and is then used for the difference quotient.  With
    ``max_coords`` only that many coordinates per tensor are checked, drawn
    without replacement from a generator seeded by ``seed``.
    """
    if not epsilon > 0:
        raise InvalidArgumentError("epsilon must be positive")
    params = list(point)
    for p in params:
        p.grad = None
    loss = function()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    evaluate = reference if reference is not None else (lambda: float(function().data))
    rng = np.random.default_rng(seed)

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = a.reshape(-1).astype(np.float64)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            num = np.empty(coords.size)
            for j, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = evaluate()
                flat[i] = orig - epsilon
                fm = evaluate()
                flat[i] = orig
                num[j] = (fp - fm) / (2.0 * epsilon)
            got = aflat[coords]
            scale = max(np.linalg.norm(got), np.linalg.norm(num))
            if scale > 0:
                worst = max(worst, float(np.linalg.norm(got - num) / scale))
    return worst
