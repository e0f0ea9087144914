"""Reverse-mode automatic differentiation over numpy arrays.

A small define-by-run tape engine. Every operation on :class:`Var` objects
appends a node to the active :class:`Tape`; :meth:`Tape.backward` then walks the
tape in reverse and accumulates vector-Jacobian products.

Only the primitives needed by the flow, the target densities and the KL loss
are provided. Everything runs in float64.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

ABS_POW_FLOOR = 1e-12


class DomainError(ValueError):
    """Raised when a primitive is evaluated outside its domain (log of x <= 0, 1/0)."""


class Tape:
    """Records nodes in evaluation order. Single-threaded by design."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.guarded_zero = 0  # count of |x|^q evaluations clamped at the floor

    def var(self, value) -> "Var":
        """Create a differentiable leaf on this tape."""
        v = Var(np.asarray(value, dtype=np.float64), tape=self)
        self.nodes.append(v)
        return v

    def backward(self, output: "Var", wrt: Sequence["Var"]) -> list[np.ndarray]:
        """Gradient of the scalar ``output`` with respect to each leaf in ``wrt``."""
        if output.value.size != 1:
            raise ValueError("backward requires a scalar output")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
            if g is None or not node.parents:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                if parent.tape is None:
                    continue
                contrib = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib
        return [grads.get(id(w), np.zeros_like(w.value)) for w in wrt]


class Var:
    """A value on the tape. ``tape is None`` marks a constant."""

    __slots__ = ("value", "tape", "parents", "vjps")
    __array_priority__ = 100

    def __init__(self, value, tape=None, parents=(), vjps=()):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjps = vjps

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, negate(other))

    def __rsub__(self, other):
        return add(other, negate(self))

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Var):
            return multiply(self, 1.0 / np.asarray(other, dtype=np.float64))
        return multiply(self, reciprocal(other))

    def __rtruediv__(self, other):
        return multiply(other, reciprocal(self))

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swap_last(self)


def _const(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64))


def _tape_of(*vs: Var):
    for v in vs:
        if v.tape is not None:
            return v.tape
    return None


def _make(value, parents, vjps) -> Var:
    tape = _tape_of(*parents)
    out = Var(value, tape, tuple(parents), tuple(vjps))
    if tape is not None:
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------- primitives

def add(a, b) -> Var:
    a, b = _const(a), _const(b)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value + b.value, (a, b),
                 (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)))


def multiply(a, b) -> Var:
    a, b = _const(a), _const(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 (lambda g: _unbroadcast(g * bv, av.shape),
                  lambda g: _unbroadcast(g * av, bv.shape)))


def negate(a) -> Var:
    a = _const(a)
    return _make(-a.value, (a,), (lambda g: -g,))


def reciprocal(a) -> Var:
    a = _const(a)
    if np.any(a.value == 0):
        raise DomainError("reciprocal of zero")
    out = 1.0 / a.value
    return _make(out, (a,), (lambda g: -g * out * out,))


def exp(a) -> Var:
    a = _const(a)
    out = np.exp(a.value)
    return _make(out, (a,), (lambda g: g * out,))


def log(a) -> Var:
    a = _const(a)
    if np.any(a.value <= 0):
        raise DomainError("log of non-positive argument")
    av = a.value
    return _make(np.log(av), (a,), (lambda g: g / av,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def _softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a) -> Var:
    a = _const(a)
    out = _sigmoid(a.value)
    return _make(out, (a,), (lambda g: g * out * (1.0 - out),))


def softplus(a) -> Var:
    a = _const(a)
    av = a.value
    return _make(_softplus(av), (a,), (lambda g: g * _sigmoid(av),))


def tanh(a) -> Var:
    a = _const(a)
    out = np.tanh(a.value)
    return _make(out, (a,), (lambda g: g * (1.0 - out * out),))


def abs_pow(a, q) -> Var:
    """|a|**q for a fixed (non-differentiated) exponent, broadcastable to ``a``.

    |a| is floored at ``ABS_POW_FLOOR`` so the derivative stays finite at 0.
    """
    a = _const(a)
    q = np.asarray(q, dtype=np.float64)
    av = a.value
    mag = np.abs(av)
    small = mag < ABS_POW_FLOOR
    if a.tape is not None and np.any(small):
        a.tape.guarded_zero += int(small.sum())
    mag = np.maximum(mag, ABS_POW_FLOOR)
    out = mag ** q
    sign = np.where(av < 0, -1.0, 1.0)

    def vjp(g):
        return _unbroadcast(g * q * out / mag * sign, av.shape)

    return _make(out, (a,), (vjp,))


def sum(a, axis=None, keepdims=False) -> Var:  # noqa: A001 - mirrors numpy
    a = _const(a)
    shape = a.value.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), (vjp,))


def matmul(a, b) -> Var:
    a, b = _const(a), _const(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-d")

    def vjp_a(g):
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

    def vjp_b(g):
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return _make(av @ bv, (a, b), (vjp_a, vjp_b))


def trace(a) -> Var:
    """Trace over the last two axes."""
    a = _const(a)
    shape = a.value.shape
    n = shape[-1]

    def vjp(g):
        return np.asarray(g)[..., None, None] * np.eye(n)

    return _make(np.trace(a.value, axis1=-2, axis2=-1), (a,), (vjp,))


def _forward_subst(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    n = L.shape[-1]
    X = np.zeros(np.broadcast_shapes(L.shape[:-2], B.shape[:-2]) + B.shape[-2:])
    for i in range(n):
        acc = B[..., i, :]
        if i:
            acc = acc - np.einsum("...k,...kj->...j", L[..., i, :i], X[..., :i, :])
        X[..., i, :] = acc / L[..., i, i, None]
    return X


def _back_subst_transposed(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    # solves L^T X = B with L lower triangular
    n = L.shape[-1]
    X = np.zeros(np.broadcast_shapes(L.shape[:-2], B.shape[:-2]) + B.shape[-2:])
    for i in range(n - 1, -1, -1):
        acc = B[..., i, :]
        if i < n - 1:
            acc = acc - np.einsum("...k,...kj->...j", L[..., i + 1:, i], X[..., i + 1:, :])
        X[..., i, :] = acc / L[..., i, i, None]
    return X


def tri_solve(L, B) -> Var:
    """Solve ``L X = B`` for lower-triangular ``L`` (batched over leading axes)."""
    L, B = _const(L), _const(B)
    Lv, Bv = L.value, B.value
    diag = np.diagonal(Lv, axis1=-2, axis2=-1)
    if np.any(diag == 0):
        raise DomainError("singular triangular system")
    X = _forward_subst(Lv, Bv)
    cache = {}

    def _gb(g):
        if "gb" not in cache:
            cache["gb"] = _back_subst_transposed(Lv, g)
        return cache["gb"]

    def vjp_L(g):
        gb = _gb(g)
        return _unbroadcast(np.tril(-gb @ np.swapaxes(X, -1, -2)), Lv.shape)

    def vjp_B(g):
        return _unbroadcast(_gb(g), Bv.shape)

    return _make(X, (L, B), (vjp_L, vjp_B))


# ------------------------------------------------------------ structural ops

def reshape(a, shape) -> Var:
    a = _const(a)
    old = a.value.shape
    return _make(a.value.reshape(shape), (a,), (lambda g: g.reshape(old),))


def swap_last(a) -> Var:
    a = _const(a)
    return _make(np.swapaxes(a.value, -1, -2), (a,), (lambda g: np.swapaxes(g, -1, -2),))


def getitem(a, idx) -> Var:
    a = _const(a)
    shape = a.value.shape

    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in
                (idx if isinstance(idx, tuple) else (idx,)))

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return out

    return _make(a.value[idx], (a,), (vjp,))


def flip_last(a) -> Var:
    a = _const(a)
    return _make(a.value[..., ::-1].copy(), (a,), (lambda g: g[..., ::-1],))


def take(a, indices, axis=-1) -> Var:
    """Gather along ``axis`` with an integer index array."""
    a = _const(a)
    indices = np.asarray(indices)
    shape = a.value.shape
    ax = axis % len(shape)

    def vjp(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, indices, np.moveaxis(g, ax, 0))
        return out

    return _make(np.take(a.value, indices, axis=ax), (a,), (vjp,))


def scatter_last2(a, rows, cols, n_rows, n_cols) -> Var:
    """Place the last axis of ``a`` at positions (rows, cols) of a zero matrix."""
    a = _const(a)
    rows, cols = np.asarray(rows), np.asarray(cols)
    out = np.zeros(a.value.shape[:-1] + (n_rows, n_cols))
    out[..., rows, cols] = a.value
    return _make(out, (a,), (lambda g: g[..., rows, cols],))


def concat(parts: Sequence, axis=-1) -> Var:
    parts = [_const(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)
    vjps = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sl = [slice(None)] * parts[0].value.ndim
        sl[axis] = slice(int(lo), int(hi))
        vjps.append(lambda g, sl=tuple(sl): g[sl])
    return _make(np.concatenate([p.value for p in parts], axis=axis), parts, vjps)


def broadcast_to(a, shape) -> Var:
    a = _const(a)
    old = a.value.shape
    return _make(np.broadcast_to(a.value, shape).copy(), (a,), (lambda g: _unbroadcast(g, old),))


def stop_gradient(a) -> Var:
    return Var(value_of(a).copy())


# ------------------------------------------------------------ composites

def square(a) -> Var:
    return multiply(a, a)


def log_sigmoid(a) -> Var:
    return negate(softplus(negate(a)))


def log_softmax(a, axis=-1) -> Var:
    """Numerically stable log-softmax; the shift uses a constant max."""
    shift = np.max(value_of(a), axis=axis, keepdims=True)
    z = add(a, -shift)
    return add(z, negate(log(sum(exp(z), axis=axis, keepdims=True))))


# ------------------------------------------------------------ graph API

class ExprGraph:
    """A differentiable expression built by a Python callable.

    ``fn`` receives one :class:`Var` per input array and returns a Var (or a
    tuple whose first element is the scalar to differentiate).
    """

    def __init__(self, fn: Callable, n_inputs: int = 1):
        self.fn = fn
        self.n_inputs = n_inputs
        self.tape: Tape | None = None
        self._inputs: list[Var] = []
        self._output = None

    def forward(self, *inputs):
        if len(inputs) != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} inputs, got {len(inputs)}")
        self.tape = Tape()
        self._inputs = [self.tape.var(x) for x in inputs]
        self._output = self.fn(*self._inputs)
        return self._output

    def backward(self) -> list[np.ndarray]:
        if self.tape is None:
            raise RuntimeError("forward must run before backward")
        out = self._output[0] if isinstance(self._output, tuple) else self._output
        return self.tape.backward(out, self._inputs)


def forward_eval(graph: ExprGraph, *inputs):
    """Evaluate the graph; returns output value(s) as arrays."""
    out = graph.forward(*inputs)
    if isinstance(out, tuple):
        return tuple(value_of(o) for o in out)
    return value_of(out)


def backward_grad(graph: ExprGraph, *inputs) -> list[np.ndarray]:
    """Reverse-mode gradient of the graph's scalar output w.r.t. every input."""
    graph.forward(*inputs)
    return graph.backward()


def value_and_grad(fn: Callable, *args):
    """Run ``fn`` on fresh leaves; return (value, [grads], aux)."""
    tape = Tape()
    leaves = [tape.var(a) for a in args]
    out = fn(*leaves)
    aux = None
    if isinstance(out, tuple):
        out, aux = out[0], out[1:]
    grads = tape.backward(out, leaves)
    return float(out.value), grads, aux


def finite_diff_check(f: Callable[[np.ndarray], float], grad: np.ndarray | Callable,
                      x, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x = np.array(x, dtype=np.float64)
    g = grad(x) if callable(grad) else np.asarray(grad, dtype=np.float64)
    g = np.broadcast_to(g, x.shape)
    err = 0.0
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        fd = (f(xp) - f(xm)) / (2 * eps)
        err = max(err, abs(g[i] - fd) / max(1.0, abs(g[i])))
    return err
