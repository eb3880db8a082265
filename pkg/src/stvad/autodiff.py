"""Minimal reverse-mode automatic differentiation over numpy arrays.

The whole training pipeline is expressed through a small closed set of
primitives (elementwise arithmetic, matmul, reductions, exp/log/sqrt,
tanh/sigmoid/relu/clip, row gather, concat, reshape/transpose) so that
every gradient the optimizer consumes can be audited against central
finite differences. Composites (softmax, log_softmax) are built from the
primitives and inherit their backward passes.

Scalars mixed into tensor arithmetic are cast to the tensor's dtype, so a
float32 graph stays float32 end to end.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Tensor:
    """Array node of a dynamically recorded computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, seed=None, store: dict | None = None):
        """Accumulate gradients of this (scalar) node into its leaves.

        With `store` given, leaf gradients go into that dict keyed by the
        leaf Tensor instead of the `.grad` attribute; this keeps
        concurrent per-video backward passes from racing on shared
        parameter tensors.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(seed, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if store is not None:
                    prev = store.get(node)
                    store[node] = g if prev is None else prev + g
                else:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return mul(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def constant(value, dtype=None) -> Tensor:
    arr = np.asarray(value) if dtype is None else np.asarray(value, dtype=dtype)
    return Tensor(arr)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitives -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * out / b.data, b.data.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    return _node(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, in_shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.data.shape
    count = a.data.size if axis is None else np.prod([in_shape[ax] for ax in np.atleast_1d(axis)])

    def vjp(g):
        if axis is None:
            gg = g
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(gg, in_shape) / count).astype(a.data.dtype, copy=False),)

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g / (2.0 * out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0).astype(a.data.dtype, copy=False), (a,), lambda g: (g * mask,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-d tensor")
    return _node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    in_shape = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(in_shape),))


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0; repeated indices scatter-add in backward."""
    idx = np.asarray(indices)

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _node(a.data[idx], (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


# -- composites -----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    # Detached max shift: exact for softmax and its gradient (shift invariance).
    shift = constant(np.max(a.data, axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shift = constant(np.max(a.data, axis=axis, keepdims=True))
    shifted = sub(a, shift)
    return sub(shifted, log(tsum(exp(shifted), axis=axis, keepdims=True)))


# -- finite differences ----------------------------------------------------


def numeric_gradient(
    f: Callable[[], float],
    arr: np.ndarray,
    entries: np.ndarray | None = None,
    eps: float = 1e-6,
) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. selected flat entries of arr.

    Perturbs `arr` in place (restoring it), so `f` must read the same array
    object. Returns gradients for `entries` (flat indices; all entries when
    None), shaped like the selection.
    """
    flat = arr.reshape(-1)
    if entries is None:
        entries = np.arange(flat.size)
    grads = np.empty(len(entries), dtype=np.float64)
    for j, idx in enumerate(entries):
        orig = flat[idx]
        flat[idx] = orig + eps
        hi = f()
        flat[idx] = orig - eps
        lo = f()
        flat[idx] = orig
        grads[j] = (hi - lo) / (2.0 * eps)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Max elementwise relative error with an absolute floor on the denominator.

    The floor keeps ~1e-9 central-difference noise on genuinely-zero
    gradient entries from registering as disagreement.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / denom))
