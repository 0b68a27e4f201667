"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every differentiable quantity in the model is expressed through the
primitives in this module. A :class:`Tape` records each primitive as a node
holding the indices of its inputs and a vector-Jacobian closure; a single
reverse sweep then accumulates adjoints for every reachable node.

Tensors created without a tape are constants: operations on them evaluate
eagerly and record nothing.

>>> tape = Tape()
>>> x = tape.leaf(np.array(3.0), key="x")
>>> backward(tape, x * x)["x"]
array(6.)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class DomainError(ValueError):
    """A primitive was evaluated outside its mathematical domain."""


@dataclass
class _Node:
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    key: object = None
    value: np.ndarray | None = None


@dataclass
class Tape:
    """Append-only record of primitive evaluations.

    Node inputs always reference strictly earlier nodes, so the node list is
    a topological order by construction.
    """

    nodes: list[_Node] = field(default_factory=list)

    def leaf(self, value, key=None) -> "Tensor":
        """Register ``value`` as a differentiable input identified by ``key``."""
        data = np.asarray(value)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.nodes.append(_Node((), None, key, data))
        return Tensor(data, self, len(self.nodes) - 1)

    def _push(self, data: np.ndarray, parents: tuple[int, ...], vjp) -> "Tensor":
        self.nodes.append(_Node(parents, vjp))
        return Tensor(data, self, len(self.nodes) - 1)

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """A dense array, optionally attached to a :class:`Tape`."""

    __slots__ = ("data", "tape", "index")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, index: int = -1):
        self.data = np.asarray(data)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        kind = "const" if self.tape is None else f"node {self.index}"
        return f"Tensor({self.data!r}, {kind})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        if p == 0.5:
            return sqrt(self)
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap ``x`` as a constant; bare scalars adopt the dtype of ``like``."""
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and np.issubdtype(x.dtype, np.floating):
        return Tensor(x)
    dtype = like.dtype if like is not None and np.ndim(x) == 0 else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def const(x) -> Tensor:
    """Detach ``x``: a tape-free tensor sharing its value."""
    return Tensor(x.data if isinstance(x, Tensor) else np.asarray(x))


def _tape_of(inputs: Iterable[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands live on different tapes")
            tape = t.tape
    return tape


def primitive(data: np.ndarray, inputs: Sequence[Tensor], vjps: Sequence[Callable | None]) -> Tensor:
    """Record a primitive with value ``data`` and per-input VJP closures.

    ``vjps[i]`` maps the output adjoint to the adjoint contribution of
    ``inputs[i]``. Closures of constant inputs are never called.
    """
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(data)
    live = [(t.index, f) for t, f in zip(inputs, vjps) if t.tape is not None and f is not None]
    if not live:
        return Tensor(data)
    parents = tuple(i for i, _ in live)
    funcs = tuple(f for _, f in live)

    def vjp(g):
        return [f(g) for f in funcs]

    return tape._push(data, parents, vjp)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(*arrays: np.ndarray) -> None:
    try:
        np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return primitive(a.data + b.data, (a, b), (lambda g: unbroadcast(g, sa), lambda g: unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return primitive(a.data - b.data, (a, b), (lambda g: unbroadcast(g, sa), lambda g: -unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    return primitive(
        ad * bd,
        (a, b),
        (lambda g: unbroadcast(g * bd, ad.shape), lambda g: unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd
    return primitive(
        out,
        (a, b),
        (lambda g: unbroadcast(g / bd, ad.shape), lambda g: unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return primitive(-a.data, (a,), (lambda g: -g,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = _pair(a, b)
    pick = a.data >= b.data
    return primitive(
        np.where(pick, a.data, b.data),
        (a, b),
        (lambda g: unbroadcast(g * pick, a.shape), lambda g: unbroadcast(g * ~pick, b.shape)),
    )


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics (covers batched matmul)."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError("matmul operands must be at least 1-D")
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    a2 = ad[None, :] if ad.ndim == 1 else ad
    b2 = bd[:, None] if bd.ndim == 1 else bd

    def _g2(g):
        if ad.ndim == 1:
            g = np.expand_dims(g, -2)
        if bd.ndim == 1:
            g = np.expand_dims(g, -1)
        return g

    def ga(g):
        return unbroadcast(np.matmul(_g2(g), _swap(b2)), a2.shape).reshape(ad.shape)

    def gb(g):
        return unbroadcast(np.matmul(_swap(a2), _g2(g)), b2.shape).reshape(bd.shape)

    return primitive(out, (a, b), (ga, gb))


batched_matmul = matmul


# ----------------------------------------------------------------- unary ops


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return primitive(out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    ad = a.data
    return primitive(np.log(ad), (a,), (lambda g: g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return primitive(out, (a,), (lambda g: g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return primitive(ad * ad, (a,), (lambda g: 2.0 * g * ad,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return primitive(ad**p, (a,), (lambda g: g * p * ad ** (p - 1),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return primitive(out, (a,), (lambda g: g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = -np.logaddexp(0.0, -x)
    sig = np.exp(out)
    return primitive(out, (a,), (lambda g: g * (1.0 - sig),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return primitive(out, (a,), (lambda g: g * np.exp(x - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return primitive(out, (a,), (lambda g: g * (1.0 - out * out),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    c = np.cos(a.data)
    return primitive(np.sin(a.data), (a,), (lambda g: g * c,))


def cos(a) -> Tensor:
    a = as_tensor(a)
    s = np.sin(a.data)
    return primitive(np.cos(a.data), (a,), (lambda g: -g * s,))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    x = a.data
    scale = np.where(x > 0, 1.0, slope).astype(x.dtype)
    return primitive(x * scale, (a,), (lambda g: g * scale,))


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


# -------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, shape)

    return primitive(out, (a,), (vjp,))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)

    return primitive(np.cumsum(a.data, axis=axis), (a,), (vjp,))


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = exp(a - m)
    out = log(sum(shifted, axis=axis, keepdims=True)) + m
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = exp(a - m)
    return e / sum(e, axis=axis, keepdims=True)


# ----------------------------------------------------------- shape handling


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return primitive(out, (a,), (lambda g: g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return primitive(np.transpose(a.data, axes), (a,), (lambda g: np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return primitive(out, (a,), (lambda g: unbroadcast(g, a.shape),))


def expand_dims(a, axis) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def getitem(a, idx) -> Tensor:
    """Basic or advanced indexing; the adjoint scatters back with ``np.add.at``."""
    a = as_tensor(a)
    out = a.data[idx]
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=np.result_type(dtype, g.dtype))
        np.add.at(full, idx, g)
        return full

    return primitive(out, (a,), (vjp,))


slice_ = getitem


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def make(i):
        lo, hi = bounds[i], bounds[i + 1]
        return lambda g: np.take(g, np.arange(lo, hi), axis=axis)

    return primitive(out, ts, [make(i) for i in range(len(ts))])


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([expand_dims(t, axis) for t in ts], axis=axis)


def take_along_axis(a, indices: np.ndarray, axis: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        idx = list(np.indices(indices.shape, sparse=True))
        idx[axis % a.ndim] = indices
        np.add.at(full, tuple(idx), g)
        return full

    return primitive(np.take_along_axis(a.data, indices, axis), (a,), (vjp,))


def where(mask, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    a, b = _pair(a, b)
    _check_broadcast(mask, a.data, b.data)
    return primitive(
        np.where(mask, a.data, b.data),
        (a, b),
        (lambda g: unbroadcast(np.where(mask, g, 0.0), a.shape), lambda g: unbroadcast(np.where(mask, 0.0, g), b.shape)),
    )


def straight_through(hard, soft) -> Tensor:
    """Value of ``hard``, gradient of ``soft``."""
    soft = as_tensor(soft)
    hard = np.asarray(hard.data if isinstance(hard, Tensor) else hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError("straight-through operands must share a shape")
    return primitive(hard, (soft,), (lambda g: g,))


def stop_gradient(a) -> Tensor:
    return const(a)


# ------------------------------------------------------------ matrix exp


def expm(A: np.ndarray, terms: int = 18) -> np.ndarray:
    """Matrix exponential by scaling and squaring around a Taylor core."""
    A = np.asarray(A, dtype=np.float64)
    norm = np.linalg.norm(A, 1) if A.size else 0.0
    s = max(0, int(np.ceil(np.log2(norm))) + 1) if norm > 0.5 else 0
    X = A / (2.0**s)
    n = A.shape[0]
    out = np.eye(n)
    term = np.eye(n)
    for k in range(1, terms + 1):
        term = term @ X / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def trace_expm(a) -> Tensor:
    """``trace(exp(A))``; the adjoint is ``exp(A)^T``."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("trace_expm needs a square matrix")
    E = expm(a.data)
    return primitive(np.asarray(np.trace(E), dtype=a.dtype), (a,), (lambda g: g * E.T.astype(a.dtype),))


# ---------------------------------------------------------------- backward


def backward(tape: Tape, output: Tensor) -> dict:
    """Gradient of scalar ``output`` w.r.t. every keyed leaf on ``tape``.

    Leaves registered without a key are reported under their node index.
    Unreached leaves get a zero adjoint.
    """
    if output.tape is not tape:
        raise ValueError("output is not recorded on this tape")
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    nodes = tape.nodes
    adj: list[np.ndarray | None] = [None] * len(nodes)
    adj[output.index] = np.ones_like(output.data)
    grads = {}
    for i in range(output.index, -1, -1):
        g = adj[i]
        node = nodes[i]
        if node.vjp is None:
            continue
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            adj[parent] = pg if adj[parent] is None else adj[parent] + pg
        adj[i] = None
    for i, node in enumerate(nodes):
        if node.vjp is None and node.parents == ():
            key = i if node.key is None else node.key
            grads[key] = np.zeros_like(node.value) if adj[i] is None else adj[i]
    return grads


# -------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __bool__(self) -> bool:
        return self.passed


def grad_check(f, theta, step: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare the tape gradient of ``f`` with central differences.

    ``f`` receives a Tensor on a fresh tape (same shape as ``theta``) and
    returns a scalar Tensor. The relative error of each coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    theta = np.array(theta, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(theta.copy(), key="theta")
    out = f(x)
    # an output that never touched the tape does not depend on theta
    analytic = backward(tape, out)["theta"] if out.tape is tape else np.zeros_like(theta)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(theta.shape)

    def value(v):
        r = float(np.asarray(f(Tensor(v)).data))
        if not np.isfinite(r):
            raise DomainError("objective is non-finite at a probe point")
        return r

    numeric = np.zeros_like(theta)
    flat = numeric.reshape(-1)
    for i in range(theta.size):
        plus = theta.copy().reshape(-1)
        minus = theta.copy().reshape(-1)
        plus[i] += step
        minus[i] -= step
        flat[i] = (value(plus.reshape(theta.shape)) - value(minus.reshape(theta.shape))) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(analytic, numeric, rel, tol)
