"""Reverse-mode automatic differentiation over dense float64 arrays, plus Adam.

Every forward op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  The graph is rebuilt
on every forward pass; :meth:`Tensor.backward` topologically sorts it and
accumulates gradients into leaf tensors (``+=`` semantics, cleared by
:func:`zero_grad`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    TrainingDivergenceError,
)

__all__ = [
    "Tensor",
    "as_tensor",
    "build_tape",
    "matmul",
    "elementwise",
    "softmax",
    "cosine_similarity",
    "layer_norm",
    "embedding",
    "concat",
    "stack",
    "clip",
    "zero_grad",
    "AdamState",
    "adam_step",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to the Tensor's reflected op

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def values(self):
        """Flat view of the data, row-major."""
        return self.data.reshape(-1)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return _add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _sub(self, as_tensor(other))

    def __rsub__(self, other):
        return _sub(as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return _scale(self, float(other))
        return _mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return _scale(self, 1.0 / float(other))
        return _div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return _div(as_tensor(other), self)

    def __neg__(self):
        return _scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        return _getitem(self, index)

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims=False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return _scale(_sum(self, axis, keepdims), 1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return _transpose(self, tuple(axes))

    def tanh(self):
        return _unary(self, "tanh")

    def sigmoid(self):
        return _unary(self, "sigmoid")

    def relu(self):
        return _unary(self, "relu")

    def exp(self):
        return _unary(self, "exp")

    def log(self):
        return _unary(self, "log")

    def sqrt(self):
        return _unary(self, "sqrt")

    # -- differentiation -----------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf with ``requires_grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return
        tape = build_tape(self)
        pending = {id(self): grad}
        for node in reversed(tape):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def build_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (parents first)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _node(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(data)
    if len(live) != len(parents):
        mask = [p.requires_grad for p in parents]

        def backward_live(g, _full=backward, _mask=mask):
            return [pg for pg, keep in zip(_full(g), _mask) if keep]

        return Tensor(data, True, _parents=live, _backward=backward_live)
    return Tensor(data, True, _parents=live, _backward=backward)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -----------------------------------------------
def _add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def _sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("hadamard", a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def _div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def _scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def _unary(a: Tensor, kind: str) -> Tensor:
    x = a.data
    if kind == "tanh":
        y = np.tanh(x)
        return _node(y, (a,), lambda g: (g * (1.0 - y * y),))
    if kind == "sigmoid":
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        return _node(y, (a,), lambda g: (g * y * (1.0 - y),))
    if kind == "relu":
        mask = x > 0
        return _node(np.where(mask, x, 0.0), (a,), lambda g: (g * mask,))
    if kind == "exp":
        y = np.exp(x)
        return _node(y, (a,), lambda g: (g * y,))
    if kind == "log":
        return _node(np.log(x), (a,), lambda g: (g / x,))
    if kind == "sqrt":
        y = np.sqrt(x)
        return _node(y, (a,), lambda g: (g * 0.5 / y,))
    raise DomainError(f"unknown unary op {kind!r}")


_ELEMENTWISE = {
    "add": lambda a, b: _add(a, b),
    "sub": lambda a, b: _sub(a, b),
    "hadamard": lambda a, b: _mul(a, b),
    "tanh": lambda a: _unary(a, "tanh"),
    "sigmoid": lambda a: _unary(a, "sigmoid"),
    "relu": lambda a: _unary(a, "relu"),
    "exp": lambda a: _unary(a, "exp"),
    "log": lambda a: _unary(a, "log"),
    "negate": lambda a: _scale(a, -1.0),
}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name; binary ops require identical shapes.

    ``scale`` takes a tensor and a python scalar.
    """
    if op == "scale":
        x, c = operands
        return _scale(as_tensor(x), float(c))
    if op not in _ELEMENTWISE:
        raise DomainError(f"unknown elementwise op {op!r}")
    ts = [as_tensor(o) for o in operands]
    if len(ts) == 2 and ts[0].shape != ts[1].shape:
        raise DimensionError(f"{op}: shape mismatch {ts[0].shape} vs {ts[1].shape}")
    return _ELEMENTWISE[op](*ts)


# -- linear algebra -----------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules; 1-D operands are promoted."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul needs at least 1-D operands, got {a.shape} and {b.shape}")
    if a.ndim == 1:
        return _reshape(matmul(_reshape(a, (1, a.shape[0])), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return _reshape(matmul(a, _reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError:
        raise DimensionError(f"matmul batch mismatch: {a.shape} x {b.shape}") from None

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(out, (a, b), backward)


# -- reductions and shape ops -------------------------------------------
def _sum(a: Tensor, axis, keepdims) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (a,), backward)


def _reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(old),))


def _transpose(a: Tensor, axes) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(out, (a,), lambda g: (np.transpose(g, inv),))


def _getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    out = a.data[index]

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), backward)


def embedding(table: Tensor, index, padding_idx: int | None = 0) -> Tensor:
    """Row lookup; rows equal to ``padding_idx`` receive no gradient."""
    index = np.asarray(index, dtype=np.int64)
    n = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        bad = index[(index < 0) | (index >= n)]
        raise IndexError(f"embedding index {int(bad[0])} outside [0, {n - 1}]")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        if padding_idx is not None:
            full[padding_idx] = 0.0
        return (full,)

    return _node(table.data[index], (table,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: incompatible shapes {[t.shape for t in tensors]}") from None
    return _node(out, tensors, lambda g: tuple(np.moveaxis(g, axis, 0)))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _node(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# -- composite ops with hand-written partials ----------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    if x.data.size == 0 or x.shape[axis] == 0:
        raise DomainError("softmax of an empty tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), backward)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along ``axis`` (broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("cosine_similarity", a, b)
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=axis, keepdims=True))
    if (na < eps).any() or (nb < eps).any():
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    dot = (ad * bd).sum(axis=axis, keepdims=True)
    c = dot / (na * nb)
    out = np.clip(np.squeeze(c, axis=axis), -1.0, 1.0)

    def backward(g):
        g = np.expand_dims(g, axis)
        ga = g * (bd / (na * nb) - c * ad / (na * na))
        gb = g * (ad / (na * nb) - c * bd / (nb * nb))
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(out, (a, b), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgain = _unbroadcast(g * xhat, gd.shape)
        dbias = _unbroadcast(g, bias.shape)
        return dx, dgain, dbias

    return _node(out, (x, gain, bias), backward)


# -- optimiser ------------------------------------------------------------
@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, grads: Mapping[str, np.ndarray] | None = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Gradients default to each parameter's ``.grad``; a missing gradient counts
    as zero.
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient in parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data = p.data - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return state
