"""Reverse-mode automatic differentiation on float64 numpy arrays.

A `Tensor` wraps an ndarray and remembers how it was produced; calling
`backward()` on a scalar result walks the tape in reverse topological order
and accumulates vector-Jacobian products into every reachable leaf. The op
set is the minimum needed by this package: elementwise arithmetic, matmul
(with batch broadcasting), shape ops, reductions, softmax/logsumexp, and
gather/scatter for token selection. Domain-specific primitives (the point
splatter) register their hand-derived VJPs through the same mechanism.

Gradient conventions, chosen to agree with central finite differences away
from the non-smooth sets:
  * ``abs`` has subgradient 0 at exact zero,
  * ``clip`` passes gradient only strictly inside the interval,
  * ``max`` reductions split the gradient evenly across tied maxima.

All data is float64 and all reductions run in a fixed order, so results are
bit-reproducible across runs and independent of thread counts.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        vjp: Callable[[Array], tuple[Array, ...]] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad: Array | None = None
        self._parents = parents if self.requires_grad else ()
        self._vjp = vjp if self.requires_grad else None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def leaf(data) -> "Tensor":
        return Tensor(data, requires_grad=True)

    @staticmethod
    def const(data) -> "Tensor":
        return Tensor(data, requires_grad=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    # -- backward pass --------------------------------------------------------

    def backward(self, seed: Array | None = None) -> None:
        """Accumulate gradients of `self` into every reachable leaf.

        `seed` is the cotangent of `self`; it defaults to 1 and is only
        optional for scalar outputs.
        """
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that requires no gradient")
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ValueError(f"seed shape {seed.shape} != output shape {self.data.shape}")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, Array] = {id(self): seed}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- numpy-style methods ----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis):
        return tmax(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def abs(self):
        return absolute(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ops ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, parents=(a, b), vjp=vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(out, parents=(a, b), vjp=vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor(out, parents=(a, b), vjp=vjp)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor(out, parents=(a,), vjp=vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return Tensor(out, parents=(a,), vjp=vjp)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return Tensor(out, parents=(a,), vjp=vjp)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return Tensor(out, parents=(a,), vjp=vjp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Tensor(out, parents=(a,), vjp=vjp)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = np.abs(a.data)

    def vjp(g):
        return (g * np.sign(a.data),)  # sign(0) == 0: subgradient at ties

    return Tensor(out, parents=(a,), vjp=vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def vjp(g):
        inside = (a.data > lo) & (a.data < hi)
        return (g * inside,)

    return Tensor(out, parents=(a,), vjp=vjp)


# -- matmul and shape ops -------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(out, parents=(a, b), vjp=vjp)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return Tensor(out, parents=(a,), vjp=vjp)


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return Tensor(out, parents=(a,), vjp=vjp)


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return Tensor(out, parents=(a,), vjp=vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, parents=tuple(parts), vjp=vjp)


def _is_advanced(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def getitem(a, key) -> Tensor:
    """Basic (slice) or purely advanced (integer-array) indexing.

    Advanced indices may repeat; their gradient scatter accumulates.
    """
    a = as_tensor(a)
    out = a.data[key]
    advanced = _is_advanced(key)

    def vjp(g):
        ga = np.zeros_like(a.data)
        if advanced:
            np.add.at(ga, key, g)
        else:
            ga[key] += g
        return (ga,)

    return Tensor(np.array(out, copy=True), parents=(a,), vjp=vjp)


def gather_rows(a, idx: Array) -> Tensor:
    """Select rows along axis 1: out[b, m] = a[b, idx[b, m]].

    `a` is (B, G, ...) and `idx` an integer array of shape (B, M).
    """
    a = as_tensor(a)
    idx = np.asarray(idx)
    batch = np.arange(a.shape[0])[:, None]
    out = a.data[batch, idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (batch, idx), g)
        return (ga,)

    return Tensor(out, parents=(a,), vjp=vjp)


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the two spatial axes of an NHWC tensor."""
    a = as_tensor(a)
    width = ((0, 0), (pad, pad), (pad, pad), (0, 0))
    out = np.pad(a.data, width)

    def vjp(g):
        return (g[:, pad : g.shape[1] - pad, pad : g.shape[2] - pad, :],)

    return Tensor(out, parents=(a,), vjp=vjp)


# -- reductions ----------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return Tensor(out, parents=(a,), vjp=vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def tmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    out = a.data.max(axis=axis)

    def vjp(g):
        expanded = np.expand_dims(out, axis)
        ties = (a.data == expanded).astype(np.float64)
        ties /= ties.sum(axis=axis, keepdims=True)
        return (ties * np.expand_dims(g, axis),)

    return Tensor(out, parents=(a,), vjp=vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor(out, parents=(a,), vjp=vjp)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (g2 * e / s,)

    return Tensor(out, parents=(a,), vjp=vjp)


def custom(value: Array, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Register an externally computed value with a hand-written VJP."""
    return Tensor(value, parents=parents, vjp=vjp)


# -- numeric checking ------------------------------------------------------------


def finite_differences(f: Callable[[Array], float], x: Array, h: float = 1e-4) -> Array:
    """Central finite differences of a scalar function, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(a: Array, b: Array, floor: float = 1e-8) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))
