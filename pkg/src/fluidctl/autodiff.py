"""Reverse-mode differentiation on a tape of whole-operator VJP rules.

Values flowing through the tape are floats, numpy arrays or field objects
(anything supporting ``+``). Operators are registered by name with a forward
function and a vector-Jacobian-product rule; calling :func:`apply` with no
live :class:`Var` among the inputs just evaluates the forward function, so the
same simulation code runs both recorded and unrecorded.
"""
from __future__ import annotations

import builtins
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op_kind: str, msg: str = ""):
        super().__init__(f"non-finite adjoint produced by op '{op_kind}'{': ' + msg if msg else ''}")
        self.op_kind = op_kind


@dataclass(frozen=True)
class Op:
    forward: Callable[..., tuple[Any, Any]]
    vjp: Callable[..., tuple]
    n_out: int = 1


OPS: dict[str, Op] = {}


def register(name: str, forward, vjp, n_out: int = 1) -> None:
    """Register op ``name``.

    ``forward(*values, **attrs) -> (output, ctx)`` where output is a tuple when
    ``n_out > 1``. ``vjp(ctx, *out_grads) -> tuple`` with one entry per input;
    ``None`` marks an input that receives no gradient.
    """
    OPS[name] = Op(forward, vjp, n_out)


# --------------------------------------------------------------------------
# value helpers (arrays, floats and field objects)


def zeros_like(v):
    if hasattr(v, "zeros_like"):
        return v.zeros_like()
    return np.zeros_like(np.asarray(v, dtype=float))


def all_finite(v) -> bool:
    if hasattr(v, "all_finite"):
        return v.all_finite()
    return bool(np.all(np.isfinite(v)))


def _accum(a, b):
    return b if a is None else a + b


def value_of(x):
    return x.value if isinstance(x, Var) else x


# --------------------------------------------------------------------------


class Var:
    """Handle to a value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.values[self.index]

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var(#{self.index}, {self.value!r})"

    def __add__(self, o):
        return apply("add", self, o)

    def __radd__(self, o):
        return apply("add", o, self)

    def __sub__(self, o):
        return apply("sub", self, o)

    def __rsub__(self, o):
        return apply("sub", o, self)

    def __mul__(self, o):
        return apply("mul", self, o)

    def __rmul__(self, o):
        return apply("mul", o, self)

    def __truediv__(self, o):
        return apply("div", self, o)

    def __rtruediv__(self, o):
        return apply("div", o, self)

    def __neg__(self):
        return apply("neg", self)

    def __pow__(self, p):
        return apply("pow", self, p=float(p))

    def __getitem__(self, idx):
        return apply("getitem", self, idx=idx)

    def __float__(self):
        return float(self.value)


@dataclass
class Node:
    op_kind: str
    inputs: tuple  # slot index or None (constant input)
    outputs: tuple
    ctx: Any


class GradBundle(Mapping):
    """Gradients keyed by parameter name, one buffer per registered parameter."""

    def __init__(self, grads: dict[str, Any]):
        self._g = grads

    def __getitem__(self, k):
        return self._g[k]

    def __iter__(self):
        return iter(self._g)

    def __len__(self):
        return len(self._g)

    def all_finite(self) -> bool:
        return all(all_finite(g) for g in self._g.values())


class Tape:
    """Append-only record of operations. Confined to one thread."""

    def __init__(self):
        self.values: list = []
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def _new_slot(self, value) -> int:
        self.values.append(value)
        return len(self.values) - 1

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise TapeError(f"parameter {name!r} already registered")
        var = Var(self, self._new_slot(value))
        self.params[name] = var.index
        return var

    def constant(self, value) -> Var:
        """Leaf that carries a value but never receives a gradient."""
        return Var(self, self._new_slot(value_of(value)))

    def record(self, op_kind: str, inputs, **attrs):
        op = OPS.get(op_kind)
        if op is None:
            raise TapeError(f"unknown op_kind {op_kind!r}")
        slots = []
        vals = []
        for x in inputs:
            if isinstance(x, Var):
                if x.tape is not self:
                    raise TapeError(f"input to {op_kind!r} belongs to a different tape")
                slots.append(x.index)
                vals.append(self.values[x.index])
            else:
                slots.append(None)
                vals.append(x)
        out, ctx = op.forward(*vals, **attrs)
        outs = out if op.n_out > 1 else (out,)
        out_slots = tuple(self._new_slot(o) for o in outs)
        self.nodes.append(Node(op_kind, tuple(slots), out_slots, ctx))
        handles = tuple(Var(self, s) for s in out_slots)
        return handles if op.n_out > 1 else handles[0]

    def detach(self, x) -> Var:
        """Same value, zero backward contribution (truncation frontier)."""
        if isinstance(x, Var) and x.tape is not self:
            raise TapeError("detach of a handle from another tape")
        return self.record("detach", [x])

    def backward(self, loss: Var) -> GradBundle:
        if not isinstance(loss, Var) or loss.tape is not self:
            raise TapeError("loss must be a handle on this tape")
        if np.ndim(loss.value) != 0:
            raise TapeError(f"loss must be scalar, got shape {np.shape(loss.value)}")
        adj: dict[int, Any] = {loss.index: 1.0}
        for node in reversed(self.nodes):
            if not any(o in adj for o in node.outputs):
                continue
            gs = [adj.pop(o) if o in adj else zeros_like(self.values[o]) for o in node.outputs]
            grads = OPS[node.op_kind].vjp(node.ctx, *gs)
            for slot, g in zip(node.inputs, grads):
                if slot is None or g is None:
                    continue
                if not all_finite(g):
                    raise NonFiniteError(node.op_kind)
                adj[slot] = _accum(adj.get(slot), g)
        out = {}
        for name, slot in self.params.items():
            g = adj.get(slot)
            out[name] = zeros_like(self.values[slot]) if g is None else g
        return GradBundle(out)


def _find_tape(inputs):
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("inputs belong to different tapes")
    return tape


def apply(op_kind: str, *inputs, **attrs):
    """Evaluate ``op_kind``; record it if any input is a live handle."""
    tape = _find_tape(inputs)
    if tape is not None:
        return tape.record(op_kind, inputs, **attrs)
    op = OPS.get(op_kind)
    if op is None:
        raise TapeError(f"unknown op_kind {op_kind!r}")
    return op.forward(*inputs, **attrs)[0]


def detach(x):
    if isinstance(x, Var):
        return x.tape.detach(x)
    return x


# --------------------------------------------------------------------------
# elementwise / array primitives


def _unbroadcast(g, shape):
    if not isinstance(g, np.ndarray) or np.shape(g) == tuple(shape):
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape(v):
    return None if hasattr(v, "zeros_like") and not isinstance(v, np.ndarray) else np.shape(v)


def _red(g, shape):
    if shape is None or not isinstance(g, (np.ndarray, np.generic, float, int)):
        return g
    g = _unbroadcast(g, shape)
    return float(g) if shape == () and np.ndim(g) == 0 else g


register("detach", lambda x: (x, None), lambda ctx, g: (None,))
register(
    "add",
    lambda a, b: (a + b, (_shape(a), _shape(b))),
    lambda c, g: (_red(g, c[0]), _red(g, c[1])),
)
register(
    "sub",
    lambda a, b: (a - b, (_shape(a), _shape(b))),
    lambda c, g: (_red(g, c[0]), _red(-g, c[1])),
)
register(
    "mul",
    lambda a, b: (a * b, (a, b)),
    lambda c, g: (_red(g * c[1], _shape(c[0])), _red(g * c[0], _shape(c[1]))),
)
register(
    "div",
    lambda a, b: (a / b, (a, b)),
    lambda c, g: (
        _red(g / c[1], _shape(c[0])),
        _red(-g * c[0] / (c[1] * c[1]), _shape(c[1])),
    ),
)
register("neg", lambda a: (-a, None), lambda c, g: (-g,))


def _pow_fwd(a, p):
    return a**p, (a, p)


register("pow", _pow_fwd, lambda c, g: (g * c[1] * c[0] ** (c[1] - 1.0),))


def _unary(name, f, df):
    def fwd(a):
        y = f(a)
        return y, (a, y)

    register(name, fwd, lambda c, g: (g * df(*c),))


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _softplus(a):
    return np.logaddexp(0.0, a)


_unary("exp", np.exp, lambda a, y: y)
_unary("log", np.log, lambda a, y: 1.0 / a)
_unary("sqrt", np.sqrt, lambda a, y: 0.5 / y)
_unary("tanh", np.tanh, lambda a, y: 1.0 - y * y)
_unary("sigmoid", _sigmoid, lambda a, y: y * (1.0 - y))
_unary("softplus", _softplus, lambda a, y: _sigmoid(a))
_unary("abs", np.abs, lambda a, y: np.sign(a))


def _maximum_fwd(a, b):
    out = np.maximum(a, b)
    return out, (np.greater_equal(a, b), np.shape(a), np.shape(b))


register(
    "maximum",
    _maximum_fwd,
    lambda c, g: (_red(g * c[0], c[1]), _red(g * ~c[0], c[2])),
)


def _minimum_fwd(a, b):
    out = np.minimum(a, b)
    return out, (np.less_equal(a, b), np.shape(a), np.shape(b))


register(
    "minimum",
    _minimum_fwd,
    lambda c, g: (_red(g * c[0], c[1]), _red(g * ~c[0], c[2])),
)


def _clip_fwd(a, lo, hi):
    a = np.asarray(a, dtype=float)
    inside = (a >= lo) & (a <= hi)
    out = np.clip(a, lo, hi)
    return (float(out) if out.ndim == 0 else out), inside


register("clip", _clip_fwd, lambda c, g: (g * c, None, None))


def _where_fwd(cond, a, b):
    return np.where(cond, a, b), (cond, np.shape(a), np.shape(b))


register(
    "where",
    _where_fwd,
    lambda c, g: (None, _red(np.where(c[0], g, 0.0), c[1]), _red(np.where(c[0], 0.0, g), c[2])),
)


def _sum_fwd(a, axis=None):
    a = np.asarray(a, dtype=float)
    out = a.sum(axis=axis)
    return (float(out) if np.ndim(out) == 0 else out), (a.shape, axis)


def _sum_vjp(c, g):
    shape, axis = c
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


register("sum", _sum_fwd, _sum_vjp)


def _reshape_fwd(a, shape):
    a = np.asarray(a)
    return a.reshape(shape), a.shape


register("reshape", _reshape_fwd, lambda c, g: (np.reshape(g, c),))


def _getitem_fwd(a, idx):
    a = np.asarray(a)
    out = a[idx]
    return (float(out) if np.ndim(out) == 0 else out), (a.shape, idx)


def _getitem_vjp(c, g):
    shape, idx = c
    out = np.zeros(shape)
    np.add.at(out, idx, g)
    return (out,)


register("getitem", _getitem_fwd, _getitem_vjp)


def _concat_fwd(*arrays, axis=0):
    arrays = [np.atleast_1d(np.asarray(a, dtype=float)) for a in arrays]
    sizes = [a.shape[axis] for a in arrays]
    return np.concatenate(arrays, axis=axis), (sizes, axis, [np.shape(a) for a in arrays])


def _concat_vjp(c, g):
    sizes, axis, _ = c
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


register("concat", _concat_fwd, _concat_vjp)


def _stack_fwd(*arrays, axis=0):
    return np.stack([np.asarray(a, dtype=float) for a in arrays], axis=axis), (axis, len(arrays))


def _stack_vjp(c, g):
    axis, n = c
    return tuple(np.take(g, i, axis=axis) for i in range(n))


register("stack", _stack_fwd, _stack_vjp)


def _matmul_fwd(a, b):
    return a @ b, (a, b)


def _matmul_vjp(c, g):
    a, b = c
    ga = np.outer(g, b) if np.ndim(a) == 2 and np.ndim(b) == 1 else g @ np.swapaxes(b, -1, -2)
    gb = a.T @ g if np.ndim(b) == 1 or np.ndim(b) == 2 else None
    return ga, gb


register("matmul", _matmul_fwd, _matmul_vjp)


# functional spellings that dispatch on Var / plain values


def exp(a):
    return apply("exp", a)


def log(a):
    return apply("log", a)


def sqrt(a):
    return apply("sqrt", a)


def tanh(a):
    return apply("tanh", a)


def sigmoid(a):
    return apply("sigmoid", a)


def softplus(a):
    return apply("softplus", a)


def absolute(a):
    return apply("abs", a)


def maximum(a, b):
    return apply("maximum", a, b)


def minimum(a, b):
    return apply("minimum", a, b)


def clip(a, lo, hi):
    return apply("clip", a, lo, hi)


def where(cond, a, b):
    return apply("where", np.asarray(value_of(cond), dtype=bool), a, b)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    return apply("sum", a, axis=axis)


def reshape(a, shape):
    return apply("reshape", a, shape=tuple(shape))


def concat(arrays, axis=0):
    return apply("concat", *arrays, axis=axis)


def stack(arrays, axis=0):
    return apply("stack", *arrays, axis=axis)


def matmul(a, b):
    return apply("matmul", a, b)


def sumsq(a):
    return sum(a * a)


def norm(a):
    return sqrt(sumsq(a))


# --------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    worst: tuple = field(default=())


def _prepare(f, x0):
    single = not isinstance(x0, Mapping)
    xs = {"x": np.asarray(x0, dtype=float)} if single else {k: np.asarray(v, dtype=float) for k, v in x0.items()}

    def call(vals):
        return f(vals["x"]) if single else f(vals)

    tape = Tape()
    handles = {k: tape.param(k, v.copy()) for k, v in xs.items()}
    loss = call(handles)
    if not isinstance(loss, Var):
        raise TapeError("f does not depend on its argument")
    if not np.isfinite(loss.value):
        raise FloatingPointError("f returned a non-finite value")
    return xs, call, tape.backward(loss)


def _finite(val) -> float:
    val = float(value_of(val))
    if not np.isfinite(val):
        raise FloatingPointError("f returned a non-finite value")
    return val


def grad_check(f, x0, eps: float = 1e-5, coords: int | None = None, seed: int = 0,
               guard: float = 1e-8) -> GradCheckResult:
    """Compare tape gradients of scalar ``f`` against central differences.

    ``x0`` is an array or a dict of named arrays; ``f`` receives the same
    structure (handles when recording, plain arrays when differencing).
    ``coords`` limits the check to that many randomly chosen coordinates per
    array (all coordinates when ``None``).
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    xs, call, grads = _prepare(f, x0)

    rng = np.random.default_rng(seed)
    worst_err, worst, n = 0.0, (), 0
    for name, base in xs.items():
        flat_idx = np.arange(base.size)
        if coords is not None and coords < base.size:
            flat_idx = np.sort(rng.choice(base.size, size=coords, replace=False))
        g_all = np.asarray(grads[name]).reshape(-1)
        for i in flat_idx:
            vals = []
            for sgn in (1.0, -1.0):
                pert = dict(xs)
                arr = base.copy().reshape(-1)
                arr[i] += sgn * eps
                pert[name] = arr.reshape(base.shape)
                vals.append(_finite(call(pert)))
            fd = (vals[0] - vals[1]) / (2.0 * eps)
            g = g_all[i]
            err = abs(g - fd) / max(abs(g) + abs(fd), guard)
            n += 1
            if err > worst_err:
                worst_err, worst = err, (name, int(i), float(g), float(fd))
    return GradCheckResult(worst_err, n, worst)


def directional_check(f, x0, eps: float = 1e-5, n_dirs: int = 3, seed: int = 0,
                      guard: float = 1e-8) -> GradCheckResult:
    """Compare ``<grad, d>`` with a central difference along random directions.

    Each direction perturbs every coordinate of every array at once, so one
    pair of evaluations covers the whole parameter set.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    xs, call, grads = _prepare(f, x0)
    rng = np.random.default_rng(seed)
    worst_err, worst = 0.0, ()
    for k in range(n_dirs):
        dirs = {name: rng.normal(size=v.shape) for name, v in xs.items()}
        scale = np.sqrt(builtins.sum(float(np.sum(d * d)) for d in dirs.values()))
        dirs = {name: d / scale for name, d in dirs.items()}
        g = builtins.sum(float(np.sum(np.asarray(grads[name]) * d)) for name, d in dirs.items())
        plus = _finite(call({name: xs[name] + eps * dirs[name] for name in xs}))
        minus = _finite(call({name: xs[name] - eps * dirs[name] for name in xs}))
        fd = (plus - minus) / (2.0 * eps)
        err = abs(g - fd) / max(abs(g) + abs(fd), guard)
        if err > worst_err:
            worst_err, worst = err, ("direction", k, g, fd)
    return GradCheckResult(worst_err, n_dirs, worst)
