"""Scalar reverse-mode automatic differentiation on an explicit tape.

A Tape records every primitive operation in creation order, which is already
a topological order, so the backward sweep is a single reversed pass that
visits each node exactly once.  Values are python floats or 1-D numpy arrays
with elementwise semantics; an array payload evaluates the same scalar graph
for a whole batch in one pass, with gradients summed over the batch when they
reach a scalar leaf.  That is the only batching mechanism in here: there are
no tensor ops, no matmul, no reshapes.

The module-level math functions (tanh, exp, ...) dispatch on their argument:
Vars get taped, numpy arrays go through numpy, plain floats go through the
math module (cheapest).  Model code written against these functions runs
unchanged in fast numeric and taped modes.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionMismatch, NonFiniteValue

_active_tape = None


class Var:
    """One node on the tape: a value plus a backward closure."""

    __slots__ = ("value", "grad", "_vjp", "_nd")

    # ndarray <op> Var must defer to the reflected Var operator instead of
    # broadcasting the Var into an object array.
    __array_ufunc__ = None

    def __init__(self, value, vjp=None):
        self.value = value
        self.grad = None
        self._vjp = vjp
        # cached ndim of the payload; _accum sits on the hottest path of
        # multi-seed backward sweeps and np.ndim() there is measurable
        self._nd = value.ndim if isinstance(value, np.ndarray) else 0

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return powc(self, p)

    def __repr__(self):
        return f"Var({self.value!r})"


class Tape:
    """Append-only record of primitive operations.

    Use as a context manager; leaf variables are created with tape.var().
    backward() seeds one or more output nodes and sweeps the record once in
    reverse.  Seeds may carry extra leading axes (prefix axes) to pull several
    adjoint vectors through the graph in a single sweep; prefix axes survive
    in leaf gradients while broadcast batch axes are summed away.
    """

    def __init__(self):
        self.nodes = []
        self._prefix_ndim = 0

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev
        return False

    def var(self, value):
        """Create a leaf variable holding a float or 1-D float array."""
        if isinstance(value, np.ndarray):
            v = Var(value.astype(float, copy=False))
        else:
            v = Var(float(value))
        self.nodes.append(v)
        return v

    def backward(self, outputs, seeds=None, prefix_ndim=0):
        """Seed output node(s) and run one reverse sweep over the tape."""
        if isinstance(outputs, Var):
            outputs = [outputs]
            seeds = [seeds] if seeds is not None else None
        if seeds is None:
            seeds = [1.0] * len(outputs)
        if len(seeds) != len(outputs):
            raise DimensionMismatch(
                f"{len(outputs)} outputs but {len(seeds)} seeds"
            )
        self._prefix_ndim = int(prefix_ndim)
        for node in self.nodes:
            node.grad = None
        for out, seed in zip(outputs, seeds):
            want = self._prefix_ndim + np.ndim(out.value)
            if np.ndim(seed) != want:
                raise DimensionMismatch(
                    f"seed ndim {np.ndim(seed)} != prefix {self._prefix_ndim} "
                    f"+ value ndim {np.ndim(out.value)}"
                )
            _accum(self, out, seed)
        for node in reversed(self.nodes):
            if node.grad is not None and node._vjp is not None:
                node._vjp(node.grad)

    def gradient(self, output, wrt, check_finite=True):
        """Value of a scalar output and its gradient w.r.t. a list of leaves."""
        if np.ndim(output.value) != 0:
            raise DimensionMismatch("gradient() needs a scalar output node")
        if check_finite and not math.isfinite(output.value):
            raise NonFiniteValue(f"output value is {output.value}")
        self.backward(output)
        g = np.array(
            [v.grad if v.grad is not None else 0.0 for v in wrt], dtype=float
        )
        if check_finite and not np.all(np.isfinite(g)):
            raise NonFiniteValue("non-finite gradient component")
        return output.value, g


def _accum(tape, node, g):
    """Add a contribution to node.grad, folding broadcast axes but not prefix axes."""
    target = tape._prefix_ndim + node._nd
    nd = getattr(g, "ndim", 0)
    if nd > target:
        g = np.sum(g, axis=tuple(range(target, nd)))
    if node.grad is None:
        node.grad = g
    else:
        node.grad = node.grad + g


def _node(tape, value, vjp):
    v = Var(value, vjp)
    tape.nodes.append(v)
    return v


def _tape_of(*xs):
    if _active_tape is not None:
        return _active_tape
    raise RuntimeError("Var operation outside of an active Tape context")


def is_var(x):
    return isinstance(x, Var)


def value_of(x):
    return x.value if isinstance(x, Var) else x


# ---------------------------------------------------------------------------
# binary primitives
# ---------------------------------------------------------------------------


def add(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return a + b
    t = _tape_of(a, b)
    av = a.value if isinstance(a, Var) else a
    bv = b.value if isinstance(b, Var) else b

    def vjp(g):
        if isinstance(a, Var):
            _accum(t, a, g)
        if isinstance(b, Var):
            _accum(t, b, g)

    return _node(t, av + bv, vjp)


def sub(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return a - b
    t = _tape_of(a, b)
    av = a.value if isinstance(a, Var) else a
    bv = b.value if isinstance(b, Var) else b

    def vjp(g):
        if isinstance(a, Var):
            _accum(t, a, g)
        if isinstance(b, Var):
            _accum(t, b, -g)

    return _node(t, av - bv, vjp)


def mul(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return a * b
    t = _tape_of(a, b)
    av = a.value if isinstance(a, Var) else a
    bv = b.value if isinstance(b, Var) else b

    def vjp(g):
        if isinstance(a, Var):
            _accum(t, a, g * bv)
        if isinstance(b, Var):
            _accum(t, b, g * av)

    return _node(t, av * bv, vjp)


def div(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return a / b
    t = _tape_of(a, b)
    av = a.value if isinstance(a, Var) else a
    bv = b.value if isinstance(b, Var) else b
    out = av / bv

    def vjp(g):
        if isinstance(a, Var):
            _accum(t, a, g / bv)
        if isinstance(b, Var):
            _accum(t, b, -g * out / bv)

    return _node(t, out, vjp)


def neg(a):
    if not isinstance(a, Var):
        return -a
    t = _tape_of(a)

    def vjp(g):
        _accum(t, a, -g)

    return _node(t, -a.value, vjp)


def powc(a, p):
    """a ** p with a constant exponent."""
    if not isinstance(a, Var):
        return a**p
    t = _tape_of(a)
    av = a.value
    out = av**p

    def vjp(g):
        _accum(t, a, g * p * av ** (p - 1))

    return _node(t, out, vjp)


def minimum(a, b):
    """Elementwise min; on ties the gradient flows to the first argument."""
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.minimum(a, b) if isinstance(a, np.ndarray) or isinstance(b, np.ndarray) else min(a, b)
    t = _tape_of(a, b)
    av = a.value if isinstance(a, Var) else a
    bv = b.value if isinstance(b, Var) else b
    take_a = av <= bv

    def vjp(g):
        if isinstance(a, Var):
            _accum(t, a, g * take_a)
        if isinstance(b, Var):
            _accum(t, b, g * np.logical_not(take_a))

    return _node(t, np.where(take_a, av, bv) if np.ndim(av) or np.ndim(bv) else (av if take_a else bv), vjp)


def maximum(a, b):
    """Elementwise max; on ties the gradient flows to the first argument."""
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.maximum(a, b) if isinstance(a, np.ndarray) or isinstance(b, np.ndarray) else max(a, b)
    t = _tape_of(a, b)
    av = a.value if isinstance(a, Var) else a
    bv = b.value if isinstance(b, Var) else b
    take_a = av >= bv

    def vjp(g):
        if isinstance(a, Var):
            _accum(t, a, g * take_a)
        if isinstance(b, Var):
            _accum(t, b, g * np.logical_not(take_a))

    return _node(t, np.where(take_a, av, bv) if np.ndim(av) or np.ndim(bv) else (av if take_a else bv), vjp)


def where(cond, a, b):
    """Select a where cond else b. cond is raw boolean data, never a Var."""
    if isinstance(cond, Var):
        raise TypeError("where() condition must be plain boolean data")
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.where(cond, a, b) if np.ndim(cond) else (a if cond else b)
    t = _tape_of(a, b)
    av = a.value if isinstance(a, Var) else a
    bv = b.value if isinstance(b, Var) else b
    out = np.where(cond, av, bv) if np.ndim(cond) else (av if cond else bv)

    def vjp(g):
        if isinstance(a, Var):
            _accum(t, a, g * cond if np.ndim(cond) else (g if cond else 0.0 * g))
        if isinstance(b, Var):
            _accum(t, b, g * np.logical_not(cond) if np.ndim(cond) else (0.0 * g if cond else g))

    return _node(t, out, vjp)


# ---------------------------------------------------------------------------
# unary primitives
# ---------------------------------------------------------------------------


def _unary(a, f_math, f_np, dfdx):
    """Build a unary op. dfdx(x_value, out_value) -> local derivative."""
    if not isinstance(a, Var):
        return f_np(a) if isinstance(a, np.ndarray) else f_math(a)
    t = _tape_of(a)
    av = a.value
    out = f_np(av) if isinstance(av, np.ndarray) else f_math(av)

    def vjp(g):
        _accum(t, a, g * dfdx(av, out))

    return _node(t, out, vjp)


def tanh(a):
    return _unary(a, math.tanh, np.tanh, lambda x, y: 1.0 - y * y)


def exp(a):
    return _unary(a, math.exp, np.exp, lambda x, y: y)


def log(a):
    return _unary(a, math.log, np.log, lambda x, y: 1.0 / x)


def atan(a):
    return _unary(a, math.atan, np.arctan, lambda x, y: 1.0 / (1.0 + x * x))


def atanh(a):
    return _unary(a, math.atanh, np.arctanh, lambda x, y: 1.0 / (1.0 - x * x))


def sin(a):
    return _unary(a, math.sin, np.sin, lambda x, y: np.cos(x) if isinstance(x, np.ndarray) else math.cos(x))


def cos(a):
    return _unary(a, math.cos, np.cos, lambda x, y: -np.sin(x) if isinstance(x, np.ndarray) else -math.sin(x))


def tan(a):
    return _unary(a, math.tan, np.tan, lambda x, y: 1.0 + y * y)


def sqrt(a):
    return _unary(a, math.sqrt, np.sqrt, lambda x, y: 0.5 / y)


def absval(a):
    """|a| with subgradient 0 at exactly 0."""

    def dfdx(x, y):
        if isinstance(x, np.ndarray):
            return np.sign(x)
        return float((x > 0.0) - (x < 0.0))

    return _unary(a, math.fabs, np.abs, dfdx)


def clip(a, lo, hi):
    """min(max(a, lo), hi) composed from the min/max primitives."""
    return minimum(maximum(a, lo), hi)


# ---------------------------------------------------------------------------
# reductions and interpolation
# ---------------------------------------------------------------------------


def amean(a):
    """Mean over an array-valued node, producing a scalar node."""
    if not isinstance(a, Var):
        return float(np.mean(a))
    t = _tape_of(a)
    av = a.value
    if not isinstance(av, np.ndarray):
        return a
    n = av.shape[-1]

    def vjp(g):
        _accum(t, a, np.multiply.outer(np.asarray(g, dtype=float), np.full(n, 1.0 / n)))

    return _node(t, float(np.mean(av)), vjp)


def asum(a):
    """Sum over an array-valued node, producing a scalar node."""
    if not isinstance(a, Var):
        return float(np.sum(a))
    t = _tape_of(a)
    av = a.value
    if not isinstance(av, np.ndarray):
        return a
    n = av.shape[-1]

    def vjp(g):
        _accum(t, a, np.multiply.outer(np.asarray(g, dtype=float), np.ones(n)))

    return _node(t, float(np.sum(av)), vjp)


def lininterp(x, xs, ys):
    """Piecewise-linear interpolation of sampled data, differentiable in x.

    xs must be strictly increasing; outside the range the value clamps to the
    end samples and the derivative is zero.  xs/ys are constant data.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if not isinstance(x, Var):
        out = np.interp(x, xs, ys)
        return out if isinstance(x, np.ndarray) else float(out)
    t = _tape_of(x)
    xv = x.value
    out = np.interp(xv, xs, ys)
    idx = np.clip(np.searchsorted(xs, xv) - 1, 0, len(xs) - 2)
    slopes = (ys[idx + 1] - ys[idx]) / (xs[idx + 1] - xs[idx])
    inside = (xv >= xs[0]) & (xv <= xs[-1])
    slope = np.where(inside, slopes, 0.0)
    if not isinstance(xv, np.ndarray):
        out = float(out)
        slope = float(slope)

    def vjp(g):
        _accum(t, x, g * slope)

    return _node(t, out, vjp)


def grad(f, theta):
    """Gradient of a scalar function of a flat parameter vector.

    f takes a list of Vars (one per parameter) and returns a scalar Var.
    Returns (value, gradient array).  Raises NonFiniteValue if the value or
    any gradient component is not finite.
    """
    theta = np.asarray(theta, dtype=float)
    with Tape() as tape:
        tvars = [tape.var(v) for v in theta]
        out = f(tvars)
        if not isinstance(out, Var):
            raise TypeError("f must return a Var")
        return tape.gradient(out, tvars)
