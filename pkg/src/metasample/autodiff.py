"""Small reverse-mode autodiff engine with differentiable gradients.

Every pullback is written in terms of the same primitives it differentiates,
so ``grad(..., create_graph=True)`` returns values that live on the tape and
can be differentiated again. That is all the MAML-style outer loops need.

Values are float64 numpy arrays of rank <= 2 (rank 4 is accepted only for
constant lookup tables). Broadcasting follows numpy.

Example
-------
>>> tape = Tape()
>>> x = tape.var(2.0)
>>> (dx,) = grad(x * x * x, [x], create_graph=True)
>>> (ddx,) = grad(dx, [x])
>>> float(ddx.value)
12.0
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape", "Var", "NanGuard", "ShapeMismatch", "TapeBudgetExceeded",
    "grad", "no_grad", "is_recording", "const", "value_of",
    "add", "sub", "neg", "mul", "div", "matmul", "dot", "sum", "mean",
    "abs", "log", "log1p", "exp", "sqrt", "sin", "cos", "sigmoid", "relu",
    "max_with_const", "min_with_const", "pow_scalar", "power", "clamp",
    "where", "reshape", "transpose", "getitem", "scatter", "concat", "stack",
    "broadcast_to", "sum_to", "solve", "gather_trilinear", "square",
]


class NanGuard(FloatingPointError):
    """A forward value became non-finite."""


class ShapeMismatch(ValueError):
    pass


class TapeBudgetExceeded(RuntimeError):
    pass


_RECORDING = [True]


@contextlib.contextmanager
def no_grad():
    """Run primitives without recording them on any tape."""
    _RECORDING.append(False)
    try:
        yield
    finally:
        _RECORDING.pop()


@contextlib.contextmanager
def _recording():
    _RECORDING.append(True)
    try:
        yield
    finally:
        _RECORDING.pop()


def is_recording() -> bool:
    return _RECORDING[-1]


class Tape:
    """Append-only node store. Parents always precede children."""

    def __init__(self, budget: int = 5_000_000):
        self.nodes: list[Var] = []
        self.budget = budget
        self.disconnected = 0

    def __len__(self):
        return len(self.nodes)

    def var(self, value) -> "Var":
        """Create a differentiable leaf."""
        v = Var(np.array(value, dtype=np.float64))
        self._append(v)
        return v

    def _append(self, v: "Var"):
        if len(self.nodes) >= self.budget:
            raise TapeBudgetExceeded(f"tape exceeded {self.budget} nodes")
        v.tape = self
        v.id = len(self.nodes)
        self.nodes.append(v)


class Var:
    __slots__ = ("value", "tape", "id", "parents", "pullback", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), pullback=None):
        self.value = value
        self.tape = None
        self.id = None
        self.parents = parents
        self.pullback = pullback

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        tag = f"id={self.id}" if self.tracked else "const"
        return f"Var({self.value!r}, {tag})"

    def __len__(self):
        return len(self.value)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        if isinstance(p, Var):
            return power(self, p)
        return pow_scalar(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def const(value) -> Var:
    if isinstance(value, Var):
        return value
    return Var(np.asarray(value, dtype=np.float64))


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _make(value, parents, pullback) -> Var:
    """Wrap a primitive's result, recording it when any parent is tracked."""
    if not np.all(np.isfinite(value)):
        raise NanGuard("non-finite value produced by a primitive")
    out = Var(value)
    if not _RECORDING[-1]:
        return out
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise ShapeMismatch("operands live on different tapes")
    if tape is None:
        return out
    out.parents = parents
    out.pullback = pullback
    tape._append(out)
    return out


def _check_broadcast(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Var:
    a, b = const(a), const(b)
    _check_broadcast(a.shape, b.shape)

    def pb(g):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return _make(a.value + b.value, (a, b), pb)


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    _check_broadcast(a.shape, b.shape)

    def pb(g):
        return sum_to(g, a.shape), sum_to(neg(g), b.shape)

    return _make(a.value - b.value, (a, b), pb)


def neg(a) -> Var:
    a = const(a)
    return _make(-a.value, (a,), lambda g: (neg(g),))


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    _check_broadcast(a.shape, b.shape)

    def pb(g):
        ga = sum_to(mul(g, b), a.shape) if a.tracked else None
        gb = sum_to(mul(g, a), b.shape) if b.tracked else None
        return ga, gb

    return _make(a.value * b.value, (a, b), pb)


def square(a) -> Var:
    return mul(a, a)


def div(a, b) -> Var:
    a, b = const(a), const(b)
    _check_broadcast(a.shape, b.shape)

    def pb(g):
        ga = sum_to(div(g, b), a.shape) if a.tracked else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.tracked else None
        return ga, gb

    with np.errstate(divide="ignore", invalid="ignore"):
        val = a.value / b.value
    return _make(val, (a, b), pb)


def abs(a) -> Var:
    a = const(a)
    sign = np.sign(a.value)
    return _make(np.abs(a.value), (a,), lambda g: (mul(g, sign),))


def log(a) -> Var:
    a = const(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log(a.value)
    return _make(val, (a,), lambda g: (div(g, a),))


def log1p(a) -> Var:
    a = const(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log1p(a.value)
    return _make(val, (a,), lambda g: (div(g, add(a, 1.0)),))


def exp(a) -> Var:
    a = const(a)
    with np.errstate(over="ignore"):
        val = np.exp(a.value)
    out = None

    def pb(g):
        return (mul(g, out),)

    out = _make(val, (a,), pb)
    return out


def sqrt(a) -> Var:
    a = const(a)
    with np.errstate(invalid="ignore"):
        val = np.sqrt(a.value)
    out = None

    def pb(g):
        return (div(mul(g, 0.5), out),)

    out = _make(val, (a,), pb)
    return out


def sin(a) -> Var:
    a = const(a)
    return _make(np.sin(a.value), (a,), lambda g: (mul(g, cos(a)),))


def cos(a) -> Var:
    a = const(a)
    return _make(np.cos(a.value), (a,), lambda g: (neg(mul(g, sin(a))),))


def sigmoid(a) -> Var:
    a = const(a)
    val = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    out = None

    def pb(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _make(val, (a,), pb)
    return out


def relu(a) -> Var:
    # relu'(0) := 0
    a = const(a)
    mask = (a.value > 0).astype(np.float64)
    return _make(a.value * mask, (a,), lambda g: (mul(g, mask),))


def max_with_const(a, c: float) -> Var:
    # derivative at the tie is 0
    a = const(a)
    mask = (a.value > c).astype(np.float64)
    return _make(np.maximum(a.value, c), (a,), lambda g: (mul(g, mask),))


def min_with_const(a, c: float) -> Var:
    a = const(a)
    mask = (a.value < c).astype(np.float64)
    return _make(np.minimum(a.value, c), (a,), lambda g: (mul(g, mask),))


def clamp(a, lo: float, hi: float) -> Var:
    """Clip to [lo, hi]; the gradient passes on the closed interval."""
    a = const(a)
    mask = ((a.value >= lo) & (a.value <= hi)).astype(np.float64)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (mul(g, mask),))


def pow_scalar(a, p: float) -> Var:
    a = const(a)
    p = float(p)

    def pb(g):
        if p == 1.0:
            return (g,)
        return (mul(g, mul(pow_scalar(a, p - 1.0), p)),)

    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.power(a.value, p)
    return _make(val, (a,), pb)


def power(base, expo) -> Var:
    """``base ** expo`` for base >= 0 with a differentiable exponent.

    Where base == 0 the value is 0 (expo > 0 assumed) and both partials are 0.
    """
    base, expo = const(base), const(expo)
    _check_broadcast(base.shape, expo.shape)
    mask = base.value > 0
    safe_base = where(mask, base, 1.0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        val = np.where(mask, np.power(np.where(mask, base.value, 1.0), expo.value), 0.0)
    out = None

    def pb(g):
        ga = gb = None
        if base.tracked:
            ga = sum_to(where(mask, mul(g, mul(expo, power(safe_base, sub(expo, 1.0)))), 0.0), base.shape)
        if expo.tracked:
            gb = sum_to(where(mask, mul(g, mul(out, log(safe_base))), 0.0), expo.shape)
        return ga, gb

    out = _make(val, (base, expo), pb)
    return out


def where(mask, a, b) -> Var:
    """Select elementwise by a constant boolean mask."""
    mask = np.asarray(value_of(mask) if isinstance(mask, Var) else mask, dtype=bool)
    a, b = const(a), const(b)
    shape = _check_broadcast(mask.shape, a.shape, b.shape)

    def pb(g):
        ga = sum_to(where(mask, g, 0.0), a.shape) if a.tracked else None
        gb = sum_to(where(mask, 0.0, g), b.shape) if b.tracked else None
        return ga, gb

    val = np.where(mask, a.value, b.value)
    if val.shape != shape:
        val = np.broadcast_to(val, shape).copy()
    return _make(val, (a, b), pb)


# ------------------------------------------------------------------ reductions


def sum(a, axis=None, keepdims: bool = False) -> Var:
    a = const(a)
    val = np.sum(a.value, axis=axis, keepdims=keepdims)

    def pb(g):
        if axis is not None and not keepdims:
            g = reshape(g, np.sum(a.value, axis=axis, keepdims=True).shape)
        return (broadcast_to(g, a.shape),)

    return _make(np.asarray(val, dtype=np.float64), (a,), pb)


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = const(a)
    if axis is None:
        count = a.value.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def broadcast_to(a, shape) -> Var:
    a = const(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    _check_broadcast(a.shape, shape)
    val = np.broadcast_to(a.value, shape).copy()
    return _make(val, (a,), lambda g: (sum_to(g, a.shape),))


def sum_to(a, shape) -> Var:
    """Reduce a broadcast result back down to ``shape``."""
    a = const(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    val = a.value
    lead = val.ndim - len(shape)
    if lead:
        val = val.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and val.shape[i] != 1)
    if axes:
        val = val.sum(axis=axes, keepdims=True)
    return _make(np.asarray(val, dtype=np.float64).reshape(shape), (a,),
                 lambda g: (broadcast_to(g, a.shape),))


# ------------------------------------------------------------------ structure


def reshape(a, shape) -> Var:
    a = const(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _make(a.value.reshape(shape), (a,), lambda g: (reshape(g, a.shape),))


def transpose(a) -> Var:
    a = const(a)
    if a.ndim < 2:
        return a
    return _make(a.value.T.copy(), (a,), lambda g: (transpose(g),))


def getitem(a, idx) -> Var:
    a = const(a)
    val = np.array(a.value[idx], dtype=np.float64)
    return _make(val, (a,), lambda g: (scatter(g, idx, a.shape),))


def scatter(a, idx, shape) -> Var:
    """Zeros of ``shape`` with ``a`` accumulated at ``idx``."""
    a = const(a)
    val = np.zeros(shape)
    np.add.at(val, idx, a.value)
    return _make(val, (a,), lambda g: (getitem(g, idx),))


def concat(items: Sequence, axis: int = 0) -> Var:
    items = [const(i) for i in items]
    sizes = [i.shape[axis] for i in items]
    bounds = np.cumsum([0] + sizes)
    val = np.concatenate([i.value for i in items], axis=axis)

    def pb(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make(val, tuple(items), pb)


def stack(items: Sequence, axis: int = 0) -> Var:
    items = [const(i) for i in items]
    shape = list(items[0].shape)
    ax = axis if axis >= 0 else len(shape) + 1 + axis
    shape.insert(ax, 1)
    return concat([reshape(i, shape) for i in items], axis=ax)


# -------------------------------------------------------------- linear algebra


def matmul(a, b) -> Var:
    a, b = const(a), const(b)
    if a.ndim == 0 or b.ndim == 0 or a.ndim > 2 or b.ndim > 2:
        raise ShapeMismatch(f"matmul needs rank 1 or 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul shapes {a.shape} @ {b.shape}")

    def pb(g):
        ga = gb = None
        if a.tracked:
            if b.ndim == 1:
                gb_ = reshape(b, (1, -1)) if a.ndim == 2 else b
                ga = mul(reshape(g, (-1, 1)), gb_) if a.ndim == 2 else mul(g, b)
            else:
                ga = matmul(g, transpose(b)) if g.ndim == 2 else matmul(b, g)
        if b.tracked:
            if a.ndim == 1:
                gb = mul(reshape(a, (-1, 1)), reshape(g, (1, -1))) if b.ndim == 2 else mul(g, a)
            else:
                gb = matmul(transpose(a), g)
        return ga, gb

    return _make(np.asarray(a.value @ b.value, dtype=np.float64), (a, b), pb)


def dot(a, b) -> Var:
    a, b = const(a), const(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatch(f"dot needs equal-length vectors, got {a.shape}, {b.shape}")
    return sum(mul(a, b))


def solve(A, b) -> Var:
    """x = A^{-1} b for a square ``A`` and vector or matrix ``b``."""
    A, b = const(A), const(b)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or b.shape[0] != A.shape[0]:
        raise ShapeMismatch(f"solve shapes {A.shape}, {b.shape}")
    d = np.diag(A.value)
    if np.count_nonzero(A.value - np.diag(d)) == 0 and np.all(d != 0):
        # diagonal system: divide directly so the result is correctly rounded
        val = b.value / (d if b.ndim == 1 else d[:, None])
    else:
        val = np.linalg.solve(A.value, b.value)
    out = None

    def pb(g):
        gb = solve(transpose(A), g)
        gA = None
        if A.tracked:
            if out.ndim == 1:
                gA = neg(mul(reshape(gb, (-1, 1)), reshape(out, (1, -1))))
            else:
                gA = neg(matmul(gb, transpose(out)))
        return gA, (gb if b.tracked else None)

    out = _make(val, (A, b), pb)
    return out


# ---------------------------------------------------------------- table lookup


def _trilinear(table, t, modes, deriv):
    n = t.shape[0]
    sizes = table.shape[:3]
    lo = np.empty((n, 3), dtype=np.intp)
    hi = np.empty((n, 3), dtype=np.intp)
    frac = np.empty((n, 3))
    live = np.ones((n, 3))
    for k in range(3):
        size = sizes[k]
        tk = t[:, k]
        if modes[k] == "wrap":
            tk = np.mod(tk, size)
            i0 = np.floor(tk).astype(np.intp)
            f = tk - i0
            i0 %= size
            i1 = (i0 + 1) % size
        else:
            outside = (tk < 0) | (tk > size - 1)
            tc = np.clip(tk, 0, size - 1)
            i0 = np.minimum(np.floor(tc).astype(np.intp), size - 1)
            i1 = np.minimum(i0 + 1, size - 1)
            f = tc - i0
            live[:, k] = np.where(outside | (i0 == i1), 0.0, 1.0)
        lo[:, k], hi[:, k], frac[:, k] = i0, i1, f
    out = 0.0
    for corner in range(8):
        bits = [(corner >> k) & 1 for k in range(3)]
        w = np.ones(n)
        for k in range(3):
            if deriv[k]:
                w = w * ((1.0 if bits[k] else -1.0) * live[:, k])
            else:
                w = w * (frac[:, k] if bits[k] else 1.0 - frac[:, k])
        idx = tuple(hi[:, k] if bits[k] else lo[:, k] for k in range(3))
        out = out + w[:, None] * table[idx]
    return np.asarray(out, dtype=np.float64)


def gather_trilinear(table: np.ndarray, t, modes=("clamp", "clamp", "wrap"), deriv=(0, 0, 0)) -> Var:
    """Trilinear interpolation of a constant (I, J, K, C) table.

    ``t`` is an (n, 3) matrix of continuous grid indices (vertex i sits at
    index i). Clamped axes have zero derivative outside [0, size-1]; wrapped
    axes are periodic. ``deriv`` selects a mixed partial derivative of the
    interpolant; the pullback raises the order along each axis, so the
    lookup is differentiable to any order (repeated axes vanish a.e.).
    """
    t = const(t)
    if t.ndim != 2 or t.shape[1] != 3:
        raise ShapeMismatch(f"coordinates must be (n, 3), got {t.shape}")
    val = _trilinear(table, t.value, modes, deriv)

    def pb(g):
        cols = []
        for k in range(3):
            if deriv[k]:
                cols.append(const(np.zeros(t.shape[0])))
                continue
            d = list(deriv)
            d[k] = 1
            cols.append(sum(mul(g, gather_trilinear(table, t, modes, tuple(d))), axis=1))
        return (stack(cols, axis=1),)

    return _make(val, (t,), pb)


# ------------------------------------------------------------------------ grad


def grad(output: Var, inputs: Sequence[Var], create_graph: bool = False) -> list[Var]:
    """Gradients of a scalar ``output`` with respect to ``inputs``.

    With ``create_graph`` the results are recorded on the tape and can be
    differentiated again. Inputs that ``output`` does not depend on get a
    zero gradient and bump ``tape.disconnected``.
    """
    if output.value.size != 1:
        raise ShapeMismatch(f"grad needs a scalar output, got shape {output.shape}")
    tape = output.tape
    if tape is None:
        for v in inputs:
            if v.tape is not None:
                v.tape.disconnected += 1
        return [const(np.zeros_like(v.value)) for v in inputs]
    for v in inputs:
        if v.tape is not None and v.tape is not tape:
            raise ShapeMismatch("input lives on a different tape")

    # ancestors of output
    seen = {output.id}
    stack_ = [output]
    while stack_:
        node = stack_.pop()
        for p in node.parents:
            if p.tape is not None and p.id not in seen:
                seen.add(p.id)
                stack_.append(p)
    input_ids = {v.id for v in inputs if v.tape is not None}
    nodes = tape.nodes
    relevant = set()
    for i in sorted(seen):
        node = nodes[i]
        if i in input_ids or any(p.tape is not None and p.id in relevant for p in node.parents):
            relevant.add(i)

    results: dict[int, Var] = {}
    ctx = _recording() if create_graph else no_grad()
    with ctx:
        adj: dict[int, Var] = {output.id: const(np.ones_like(output.value))}
        for i in sorted(relevant, reverse=True):
            g = adj.pop(i, None)
            if g is None:
                continue
            if i in input_ids:
                results[i] = g
            node = nodes[i]
            if not node.parents:
                continue
            if not any(p.tape is not None and p.id in relevant for p in node.parents):
                continue
            pgrads = node.pullback(g)
            for p, gp in zip(node.parents, pgrads):
                if gp is None or p.tape is None or p.id not in relevant:
                    continue
                prev = adj.get(p.id)
                adj[p.id] = gp if prev is None else add(prev, gp)
    out = []
    for v in inputs:
        g = results.get(v.id) if v.tape is not None else None
        if g is None:
            tape.disconnected += 1
            g = const(np.zeros_like(v.value))
        out.append(g)
    return out


def make_function(fn: Callable[..., Var]):
    """Wrap ``fn(*arrays) -> scalar Var`` into value/gradient callables on plain arrays."""

    def value_and_grad(*arrays):
        tape = Tape()
        xs = [tape.var(a) for a in arrays]
        out = fn(*xs)
        gs = grad(out, xs)
        return float(out.value), [g.value for g in gs]

    return value_and_grad
