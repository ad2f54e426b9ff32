"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op records its parents and a backward rule that maps the upstream
gradient to one gradient per parent. ``Tensor.backward`` walks the graph in
reverse topological order and accumulates into the ``grad`` of leaves that
require gradients. The engine is dtype-agnostic: float32 for training,
float64 for finite-difference checks.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this tensor.

        ``grad`` defaults to ones, so a scalar loss needs no argument.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not _needs_grad(p):
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar --------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _GRAD_ENABLED and any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    # Python scalars follow the tensor's dtype.
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data + b.data

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data - b.data

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data * b.data

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data >= lo
    out = np.where(keep, a.data, np.asarray(lo, dtype=a.dtype))
    return _result(out, (a,), lambda g: (g * keep,))


def clamp_max(a: Tensor, hi: float) -> Tensor:
    keep = a.data <= hi
    out = np.where(keep, a.data, np.asarray(hi, dtype=a.dtype))
    return _result(out, (a,), lambda g: (g * keep,))


# -- activations -------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0, x).astype(a.dtype, copy=False)

    def backward(g):
        return (g * _sigmoid(x),)

    return _result(out, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward)


# -- linear algebra and reductions ----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects (n,k)@(k,m), got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(out, (a, b), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    if n == 0:
        raise ShapeError("mean over an empty tensor")
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(out, tensors, backward)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), backward)


def gather(a: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Select slices of ``a`` along ``axis``; repeated indices accumulate in backward."""
    index = np.asarray(index)
    if index.size and (index.min() < -a.shape[axis] or index.max() >= a.shape[axis]):
        raise ShapeError(f"gather index out of range for axis of size {a.shape[axis]}")
    out = np.take(a.data, index, axis=axis)

    def backward(g):
        return (_scatter(g, index, a.shape, axis),)

    return _result(out, (a,), backward)


def take_along(a: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    """``np.take_along_axis`` with gradient."""
    index = np.asarray(index)
    out = np.take_along_axis(a.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        if _unique_along(index, axis):
            np.put_along_axis(full, index, g, axis=axis)
        else:
            _add_along(full, index, g, axis)
        return (full,)

    return _result(out, (a,), backward)


def _unique_along(index: np.ndarray, axis: int) -> bool:
    s = np.sort(index, axis=axis)
    return not np.any(np.diff(s, axis=axis) == 0)


def _add_along(full, index, g, axis):
    moved_idx = np.moveaxis(index, axis, -1)
    moved_g = np.moveaxis(g, axis, -1)
    moved_full = np.moveaxis(full, axis, -1)
    lead = np.indices(moved_idx.shape[:-1])
    for j in range(moved_idx.shape[-1]):
        np.add.at(moved_full, (*lead, moved_idx[..., j]), moved_g[..., j])


def _scatter(g: np.ndarray, index: np.ndarray, shape, axis: int) -> np.ndarray:
    full = np.zeros(shape, dtype=g.dtype)
    moved = np.moveaxis(full, axis, 0)
    gm = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
    np.add.at(moved, index, gm)
    return full


def scatter_add(src: Tensor, index: np.ndarray, size: int) -> Tensor:
    """Sum rows of ``src`` into ``size`` buckets given by ``index`` (first axis)."""
    index = np.asarray(index)
    if index.shape != src.shape[:1]:
        raise ShapeError(f"scatter_add: index shape {index.shape} vs src rows {src.shape[:1]}")
    out = np.zeros((size,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, index, src.data)
    return _result(out, (src,), lambda g: (g[index],))


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = _coerce(a, b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def backward(g):
        return unbroadcast(g * mask, a.shape), unbroadcast(g * ~mask, b.shape)

    return _result(out, (a, b), backward)


def sparse_apply(matrix: sp.csr_matrix, a: Tensor) -> Tensor:
    """Multiply a fixed sparse matrix into a dense (n, c) tensor.

    This is the gather half of interpolation: each output row is a weighted
    sum of input rows. The backward is a transposed product (scatter-add).
    """
    if a.ndim != 2 or matrix.shape[1] != a.shape[0]:
        raise ShapeError(f"sparse_apply: matrix {matrix.shape} vs tensor {a.shape}")
    out = np.asarray(matrix @ a.data)
    mt = matrix.T.tocsr()
    return _result(out, (a,), lambda g: (np.asarray(mt @ g),))


def trilinear_sample(values: Tensor, indices: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted gather of voxel rows: out[s] = sum_k weights[s,k] * values[indices[s,k]].

    Corners with zero weight may carry any in-range index.
    """
    n_samples, k = indices.shape
    rows = np.repeat(np.arange(n_samples), k)
    matrix = sp.csr_matrix(
        (weights.ravel().astype(values.dtype, copy=False), (rows, indices.ravel())),
        shape=(n_samples, values.shape[0]),
    )
    return sparse_apply(matrix, values)


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return total ** 0.5
