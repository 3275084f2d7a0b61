"""Reverse-mode automatic differentiation on a Wengert tape.

Every node on a :class:`Tape` holds a numpy value (0-d arrays for plain
scalars) and a vector-Jacobian closure.  ``Tape.backward`` sweeps the tape
once in reverse creation order, which is a valid reverse topological order
because parents are always recorded before their children.

Subgradient convention: at max/min ties and at kinks, the whole gradient goes
to the first attaining argument.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "EvaluationError", "Tape", "Var", "Gradients",
    "add", "sub", "mul", "div", "neg", "square", "sqrt", "tanh", "exp", "log",
    "hypot", "sigmoid", "sin", "cos", "tan", "atan", "relu", "leaky_relu", "max2",
    "min2", "where", "clip", "matmul", "vsum", "vmean", "stack", "concat", "reduce_agg",
    "cumulative_agg", "softmax_agg", "softmin_agg", "gather_last",
]


class EvaluationError(ArithmeticError):
    """Raised when a node evaluates to a non-finite or undefined value."""

    def __init__(self, message: str, op: str = "?", node: int = -1):
        super().__init__(f"{message} (op={op}, node={node})")
        self.op = op
        self.node = node


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tape:
    """An append-only record of operations.  Single-threaded; use one per thread."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []
        self.ops: list[str] = []

    def __len__(self) -> int:
        return len(self.values)

    def var(self, value) -> "Var":
        """Create a leaf node."""
        value = np.array(value, dtype=float)
        if not np.all(np.isfinite(value)):
            raise EvaluationError("non-finite leaf value", "leaf", len(self.values))
        return self._push(value, "leaf", (), None)

    def _push(self, value, op, parents, vjp) -> "Var":
        nid = len(self.values)
        self.values.append(value)
        self.parents.append(parents)
        self.vjps.append(vjp)
        self.ops.append(op)
        return Var(self, nid, value)

    def record(self, op: str, value: np.ndarray, inputs: Sequence, vjp: Callable) -> "Var":
        """Append a node computed from ``inputs``.

        ``vjp(g)`` must return one gradient per entry of ``inputs`` (entries for
        non-Var inputs are ignored).
        """
        if not np.all(np.isfinite(value)):
            raise EvaluationError("non-finite result", op, len(self.values))
        pids = tuple(x.id if isinstance(x, Var) else -1 for x in inputs)
        return self._push(value, op, pids, vjp)

    def backward(self, root: "Var") -> "Gradients":
        """Adjoints of every node with respect to the scalar ``root``."""
        if not isinstance(root, Var) or root.tape is not self or root.id >= len(self.values):
            raise ValueError("root is not a node of this tape")
        if root.value.size != 1:
            raise ValueError(f"root must be scalar, got shape {root.value.shape}")
        adj: list = [None] * (root.id + 1)
        adj[root.id] = np.ones_like(root.value)
        values, parents, vjps = self.values, self.parents, self.vjps
        for i in range(root.id, -1, -1):
            g = adj[i]
            if g is None or not parents[i]:
                continue
            grads = vjps[i](g)
            for p, gp in zip(parents[i], grads):
                if p < 0 or gp is None:
                    continue
                gp = _unbroadcast(np.asarray(gp, dtype=float), values[p].shape)
                adj[p] = gp if adj[p] is None else adj[p] + gp
        return Gradients(self, adj)


class Gradients(dict):
    """Mapping node-id -> adjoint array (only nodes reached by the sweep)."""

    def __init__(self, tape: Tape, adj: list):
        super().__init__((i, g) for i, g in enumerate(adj) if g is not None)
        self.tape = tape

    def of(self, v: "Var") -> np.ndarray:
        g = self.get(v.id)
        return np.zeros_like(v.value) if g is None else g


class Var:
    """Handle to a tape node."""

    __slots__ = ("tape", "id", "value")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, nid: int, value: np.ndarray):
        self.tape = tape
        self.id = nid
        self.value = value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Var(id={self.id}, value={self.value!r})"

    def __float__(self):
        return float(self.value)

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)

    def __getitem__(self, idx) -> "Var":
        shape = self.value.shape
        out = self.value[idx]

        basic = _is_basic(idx)

        def vjp(g):
            gx = np.zeros(shape)
            if basic:
                gx[idx] = g
            else:
                np.add.at(gx, idx, g)
            return (gx,)
        return self.tape.record("index", np.array(out, dtype=float), (self,), vjp)

    def reshape(self, *shape) -> "Var":
        old = self.value.shape
        return self.tape.record("reshape", self.value.reshape(*shape), (self,),
                                lambda g: (g.reshape(old),))

    def sum(self, axis=None) -> "Var":
        return vsum(self, axis)

    def mean(self, axis=None) -> "Var":
        return vmean(self, axis)


def _numpy_fallback(fn):
    """Evaluate ``fn`` on a scratch tape when its first argument is plain data."""
    def wrapper(a, *args, **kwargs):
        if isinstance(a, Var):
            return fn(a, *args, **kwargs)
        return fn(Tape().var(a), *args, **kwargs).value
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is Ellipsis or i is None or isinstance(i, (int, np.integer, slice)) for i in items)


def _tape_of(*xs) -> Tape:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands live on different tapes")
    if tape is None:
        raise ValueError("at least one operand must be a Var")
    return tape


def _node(x) -> int:
    return len(x.tape) if isinstance(x, Var) else -1


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _binary(op, a, b, f, vjp_maker):
    av, bv = _val(a), _val(b)
    if not isinstance(a, Var) and not isinstance(b, Var):
        return f(av, bv)
    tape = _tape_of(a, b)
    out = f(av, bv)
    return tape.record(op, out, (a, b), vjp_maker(av, bv, out))


def _unary(op, a, f, vjp_maker):
    if not isinstance(a, Var):
        return f(np.asarray(a, dtype=float))
    av = a.value
    out = f(av)
    return a.tape.record(op, out, (a,), vjp_maker(av, out))


# --- elementwise -----------------------------------------------------------

def add(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return _val(a) + _val(b)
    return _binary("add", a, b, np.add, lambda a, b, o: lambda g: (g, g))


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda a, b, o: lambda g: (g, -g))


def mul(a, b):
    return _binary("mul", a, b, np.multiply, lambda a, b, o: lambda g: (g * b, g * a))


def div(a, b):
    bv = _val(b)
    if np.any(bv == 0):
        node = len(_tape_of(a, b)) if isinstance(a, Var) or isinstance(b, Var) else -1
        raise EvaluationError("division by zero", "div", node)
    return _binary("div", a, b, np.divide,
                   lambda a, b, o: lambda g: (g / b, -g * o / b))


def neg(a):
    return _unary("neg", a, np.negative, lambda a, o: lambda g: (-g,))


def square(a):
    return _unary("square", a, np.square, lambda a, o: lambda g: (2.0 * a * g,))


def sqrt(a):
    if np.any(_val(a) <= 0):
        raise EvaluationError("sqrt of non-positive value", "sqrt", _node(a))
    return _unary("sqrt", a, np.sqrt, lambda a, o: lambda g: (0.5 * g / o,))


def hypot(a, b):
    """sqrt(a^2 + b^2); the subgradient at the origin is zero."""
    def vjp(a, b, o):
        safe = np.where(o > 0, o, 1.0)
        return lambda g: (np.where(o > 0, g * a / safe, 0.0), np.where(o > 0, g * b / safe, 0.0))
    return _binary("hypot", a, b, np.hypot, vjp)


def tanh(a):
    return _unary("tanh", a, np.tanh, lambda a, o: lambda g: (g * (1.0 - o * o),))


def sigmoid(a):
    def f(x):
        return 0.5 * (1.0 + np.tanh(0.5 * x))
    return _unary("sigmoid", a, f, lambda a, o: lambda g: (g * o * (1.0 - o),))


def exp(a):
    return _unary("exp", a, np.exp, lambda a, o: lambda g: (g * o,))


def log(a):
    if np.any(_val(a) <= 0):
        raise EvaluationError("log of non-positive value", "log", _node(a))
    return _unary("log", a, np.log, lambda a, o: lambda g: (g / a,))


def sin(a):
    return _unary("sin", a, np.sin, lambda a, o: lambda g: (g * np.cos(a),))


def cos(a):
    return _unary("cos", a, np.cos, lambda a, o: lambda g: (-g * np.sin(a),))


def tan(a):
    return _unary("tan", a, np.tan, lambda a, o: lambda g: (g * (1.0 + o * o),))


def atan(a):
    return _unary("atan", a, np.arctan, lambda a, o: lambda g: (g / (1.0 + a * a),))


def relu(a):
    # max(0, x): ties at 0 go to the constant branch.
    return _unary("relu", a, lambda x: np.maximum(0.0, x),
                  lambda a, o: lambda g: (g * (a > 0),))


def leaky_relu(a, slope: float = 0.01):
    """max(slope*x, x); at x == 0 the gradient is ``slope`` (first argument)."""
    return _unary("leaky_relu", a, lambda x: np.maximum(slope * x, x),
                  lambda a, o: lambda g: (g * np.where(a > 0, 1.0, slope),))


def max2(a, b):
    def vjp(a, b, o):
        pick_a = a >= b
        return lambda g: (g * pick_a, g * ~pick_a)
    return _binary("max2", a, b, np.maximum, vjp)


def min2(a, b):
    def vjp(a, b, o):
        pick_a = a <= b
        return lambda g: (g * pick_a, g * ~pick_a)
    return _binary("min2", a, b, np.minimum, vjp)


def where(cond, a, b):
    """Elementwise select with a constant boolean ``cond``."""
    cond = np.asarray(cond, dtype=bool)
    return _binary("where", a, b, lambda x, y: np.where(cond, x, y),
                   lambda a, b, o: lambda g: (g * cond, g * ~cond))


def clip(a, lo, hi):
    """Clamp with pass-through gradient inside [lo, hi] and zero outside."""
    return _unary("clip", a, lambda x: np.clip(x, lo, hi),
                  lambda a, o: lambda g: (g * ((a >= lo) & (a <= hi)),))


# --- linear algebra / shape ------------------------------------------------

def matmul(a, b):
    def vjp(a, b, o):
        def f(g):
            ga = g @ np.swapaxes(b, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b)
            if a.ndim > 1:
                gb = np.swapaxes(a, -1, -2) @ g
            else:
                gb = np.multiply.outer(a, g)
            return ga, gb
        return f
    return _binary("matmul", a, b, np.matmul, vjp)


@_numpy_fallback
def vsum(a, axis=None):
    shape = a.value.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return a.tape.record("sum", np.asarray(a.value.sum(axis=axis)), (a,), vjp)


@_numpy_fallback
def vmean(a, axis=None):
    n = a.value.size if axis is None else np.prod([a.value.shape[i] for i in np.atleast_1d(axis)])
    return vsum(a, axis) * (1.0 / n)


def stack(xs: Sequence, axis: int = 0) -> Var:
    if not any(isinstance(x, Var) for x in xs):
        return np.stack([_val(x) for x in xs], axis=axis)
    tape = _tape_of(*xs)
    out = np.stack([_val(x) for x in xs], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))
    return tape.record("stack", out, tuple(xs), vjp)


def concat(xs: Sequence, axis: int = -1) -> Var:
    if not any(isinstance(x, Var) for x in xs):
        return np.concatenate([_val(x) for x in xs], axis=axis)
    tape = _tape_of(*xs)
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))
    return tape.record("concat", out, tuple(xs), vjp)


@_numpy_fallback
def gather_last(a: Var, idx: np.ndarray) -> Var:
    """``a[..., idx]`` for an integer index array ``idx`` of any shape."""
    shape = a.value.shape
    lead = (slice(None),) * (a.value.ndim - 1)

    def vjp(g):
        gx = np.zeros(shape)
        np.add.at(gx, lead + (idx,), g)
        return (gx,)
    return a.tape.record("gather", a.value[lead + (idx,)], (a,), vjp)


# --- aggregations ----------------------------------------------------------

@_numpy_fallback
def reduce_agg(a: Var, axis: int = -1, kind: str = "max", temperature: float = math.inf,
               mask: np.ndarray | None = None) -> Var:
    """Max or min along ``axis``, exact (temperature=inf) or log-sum-exp smoothed.

    ``mask`` (broadcastable to ``a``) marks the entries that take part; every
    reduced slice must contain at least one of them.
    """
    sign = 1.0 if kind == "max" else -1.0
    x = sign * np.moveaxis(a.value, axis, -1)
    m = None if mask is None else np.moveaxis(np.broadcast_to(mask, a.value.shape), axis, -1)
    if m is not None:
        x = np.where(m, x, -np.inf)
    if math.isinf(temperature):
        arg = np.argmax(x, axis=-1)
        out = np.take_along_axis(x, arg[..., None], -1)[..., 0]

        def local(g):
            w = np.zeros_like(x)
            np.put_along_axis(w, arg[..., None], g[..., None], -1)
            return w
    else:
        t = float(temperature)
        top = x.max(axis=-1, keepdims=True)
        z = np.exp(t * (x - top))
        s = z.sum(axis=-1, keepdims=True)
        out = (top + np.log(s) / t)[..., 0]
        w_soft = z / s

        def local(g):
            return w_soft * g[..., None]
    out = sign * out

    def vjp(g):
        return (np.moveaxis(local(g), -1, axis),)
    return a.tape.record(f"reduce_{kind}", out, (a,), vjp)


@_numpy_fallback
def cumulative_agg(a: Var, kind: str = "min", temperature: float = math.inf,
                   mask: np.ndarray | None = None, reverse: bool = False) -> Var:
    """Running max/min along the last axis (prefix, or suffix if ``reverse``).

    Masked-out entries are skipped; the first entry of each scanned row must
    be unmasked.
    """
    sign = 1.0 if kind == "max" else -1.0
    x = sign * a.value
    if reverse:
        x = x[..., ::-1]
    if mask is not None:
        m = np.broadcast_to(mask, a.value.shape)
        if reverse:
            m = m[..., ::-1]
        x = np.where(m, x, -np.inf)
    n = x.shape[-1]
    if math.isinf(temperature):
        out = np.maximum.accumulate(x, axis=-1)
        new = np.ones(x.shape, dtype=bool)
        new[..., 1:] = x[..., 1:] > out[..., :-1]
        arg = np.maximum.accumulate(np.where(new, np.arange(n), 0), axis=-1)

        def local(g):
            gx = np.zeros(x.shape)
            flat_g = g.reshape(-1, n)
            flat_a = arg.reshape(-1, n)
            rows = np.arange(flat_g.shape[0])[:, None]
            out_flat = gx.reshape(-1, n)
            np.add.at(out_flat, (rows, flat_a), flat_g)
            return out_flat.reshape(x.shape)
    else:
        t = float(temperature)
        out = np.logaddexp.accumulate(t * x, axis=-1) / t

        def local(g):
            # grad_j = exp(t(x_j - out_j)) * S_j,  S_j = g_j + exp(t(out_j - out_{j+1})) S_{j+1}
            S = np.empty_like(g)
            S[..., -1] = g[..., -1]
            for j in range(n - 2, -1, -1):
                S[..., j] = g[..., j] + np.exp(t * (out[..., j] - out[..., j + 1])) * S[..., j + 1]
            with np.errstate(invalid="ignore"):
                w = np.exp(t * (x - out))
            return np.where(np.isfinite(x), w * S, 0.0)
    value = sign * out
    if reverse:
        value = value[..., ::-1]

    def vjp(g):
        if reverse:
            g = g[..., ::-1]
        gx = local(np.asarray(g))
        if reverse:
            gx = gx[..., ::-1]
        return (gx,)
    return a.tape.record(f"cum_{kind}", np.ascontiguousarray(value), (a,), vjp)


def softmax_agg(xs, temperature: float, axis: int = -1) -> Var:
    """(1/t) log sum exp(t x), stabilised by subtracting the maximum.

    ``xs`` is either a Var (reduced along ``axis``) or a non-empty list of
    scalar Vars.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not isinstance(xs, Var):
        if len(xs) == 0:
            raise ValueError("softmax_agg of an empty list")
        xs, axis = stack(list(xs), axis=0), 0
    return reduce_agg(xs, axis, "max", temperature)


def softmin_agg(xs, temperature: float, axis: int = -1) -> Var:
    """-(1/t) log sum exp(-t x)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not isinstance(xs, Var):
        if len(xs) == 0:
            raise ValueError("softmin_agg of an empty list")
        xs, axis = stack(list(xs), axis=0), 0
    return reduce_agg(xs, axis, "min", temperature)


def grad(root: Var, wrt: Iterable[Var]) -> list[np.ndarray]:
    """Convenience: adjoints of ``root`` for each Var in ``wrt``."""
    g = root.tape.backward(root)
    return [g.of(v) for v in wrt]
