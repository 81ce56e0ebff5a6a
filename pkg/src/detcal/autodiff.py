"""Scalar reverse-mode differentiation on an explicit tape.

Every :class:`Value` is appended to the :class:`Tape` that owns it at
construction time, so the arena order is already a topological order and
``backward`` is a single reverse sweep.  Each node stores the local partial
derivatives with respect to its operands, computed during the forward pass.

The module-level helpers (``exp``, ``tanh``, ``maximum``, ``softmax`` ...)
accept plain floats as well as Values, which lets the uncertainty and loss
code run unchanged on either.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

__all__ = [
    "Tape",
    "Value",
    "exp",
    "log",
    "tanh",
    "tanh_complement",
    "absolute",
    "maximum",
    "minimum",
    "powi",
    "vsum",
    "vmean",
    "pvar",
    "softmax",
    "grad_check",
    "GradCheckReport",
]


class Tape:
    """Node arena.  Parameters are leaves created through :meth:`param`."""

    def __init__(self):
        self.nodes: list[Value] = []
        self.params: list[Value] = []

    def __len__(self):
        return len(self.nodes)

    def param(self, x: float) -> "Value":
        v = Value(self, float(x))
        self.params.append(v)
        return v

    def params_from(self, xs) -> list["Value"]:
        return [self.param(x) for x in xs]

    def zero_grad(self):
        for node in self.nodes:
            node.grad = 0.0

    def backward(self, root: "Value") -> list[float]:
        """Accumulate d(root)/d(node) into every node's ``grad``.

        Returns the gradients of the registered parameters, in creation order.
        Gradients accumulate across calls; use :meth:`zero_grad` in between.
        """
        if not isinstance(root, Value):
            raise TypeError(f"backward needs a scalar Value root, got {type(root).__name__}")
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        nodes = self.nodes
        root.grad += 1.0
        for i in range(root.idx, -1, -1):
            node = nodes[i]
            g = node.grad
            if g == 0.0 or not node.parents:
                continue
            for p, d in zip(node.parents, node.partials):
                p.grad += g * d
        return [p.grad for p in self.params]


class Value:
    __slots__ = ("tape", "data", "grad", "op", "parents", "partials", "idx")
    # make numpy scalars defer to the reflected Value operators
    __array_ufunc__ = None

    def __init__(self, tape: Tape, data: float, op: str = "leaf", parents=(), partials=(),
                 _isfinite=math.isfinite):
        if not _isfinite(data):
            raise FloatingPointError(f"non-finite value produced by {op!r}")
        self.tape = tape
        self.data = data
        self.grad = 0.0
        self.op = op
        self.parents = parents
        self.partials = partials
        nodes = tape.nodes
        self.idx = len(nodes)
        nodes.append(self)

    def __repr__(self):
        return f"Value({self.data!r}, op={self.op!r}, grad={self.grad!r})"

    def __float__(self):
        return self.data

    # operand handling -------------------------------------------------

    def _other(self, other):
        if isinstance(other, Value):
            if other.tape is not self.tape:
                raise ValueError("operands live on different tapes")
            return other
        return None

    # arithmetic --------------------------------------------------------

    def __add__(self, other):
        o = self._other(other)
        if o is None:
            return Value(self.tape, self.data + other, "add", (self,), (1.0,))
        return Value(self.tape, self.data + o.data, "add", (self, o), (1.0, 1.0))

    __radd__ = __add__

    def __sub__(self, other):
        o = self._other(other)
        if o is None:
            return Value(self.tape, self.data - other, "sub", (self,), (1.0,))
        return Value(self.tape, self.data - o.data, "sub", (self, o), (1.0, -1.0))

    def __rsub__(self, other):
        return Value(self.tape, other - self.data, "sub", (self,), (-1.0,))

    def __mul__(self, other):
        o = self._other(other)
        if o is None:
            return Value(self.tape, self.data * other, "mul", (self,), (float(other),))
        return Value(self.tape, self.data * o.data, "mul", (self, o), (o.data, self.data))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._other(other)
        if o is None:
            if other == 0:
                raise ZeroDivisionError("division of a Value by zero")
            return Value(self.tape, self.data / other, "div", (self,), (1.0 / other,))
        if o.data == 0.0:
            raise ZeroDivisionError("division by a zero-valued Value")
        q = self.data / o.data
        return Value(self.tape, q, "div", (self, o), (1.0 / o.data, -q / o.data))

    def __rtruediv__(self, other):
        if self.data == 0.0:
            raise ZeroDivisionError("division by a zero-valued Value")
        q = other / self.data
        return Value(self.tape, q, "div", (self,), (-q / self.data,))

    def __neg__(self):
        return Value(self.tape, -self.data, "neg", (self,), (-1.0,))

    def __pow__(self, n):
        return powi(self, n)

    def __abs__(self):
        return absolute(self)

    # unary functions ---------------------------------------------------

    def exp(self):
        try:
            e = math.exp(self.data)
        except OverflowError:
            raise FloatingPointError(f"exp overflow at {self.data}") from None
        return Value(self.tape, e, "exp", (self,), (e,))

    def log(self):
        if self.data <= 0.0:
            raise ValueError(f"log of non-positive value {self.data}")
        return Value(self.tape, math.log(self.data), "log", (self,), (1.0 / self.data,))

    def tanh(self):
        t = math.tanh(self.data)
        return Value(self.tape, t, "tanh", (self,), (1.0 - t * t,))

    def tanh_complement(self):
        c = _tanh_complement(self.data)
        return Value(self.tape, c, "1-tanh", (self,), (-c * (2.0 - c),))


def _tape_of(xs):
    for x in xs:
        if isinstance(x, Value):
            return x.tape
    return None


def exp(x):
    return x.exp() if isinstance(x, Value) else math.exp(x)


def log(x):
    if isinstance(x, Value):
        return x.log()
    if x <= 0:
        raise ValueError(f"log of non-positive value {x}")
    return math.log(x)


def tanh(x):
    return x.tanh() if isinstance(x, Value) else math.tanh(x)


def _tanh_complement(x: float) -> float:
    # 1 - tanh(x) = 2 / (1 + e^{2x}); stays positive long after tanh(x) rounds to 1
    if x >= 0.0:
        e = math.exp(-2.0 * x)
        return 2.0 * e / (1.0 + e)
    return 2.0 / (1.0 + math.exp(2.0 * x))


def tanh_complement(x):
    """1 - tanh(x), accurate for large x."""
    return x.tanh_complement() if isinstance(x, Value) else _tanh_complement(x)


def absolute(x):
    """|x| with subgradient 0 at x == 0."""
    if not isinstance(x, Value):
        return abs(x)
    d = 1.0 if x.data > 0 else (-1.0 if x.data < 0 else 0.0)
    return Value(x.tape, abs(x.data), "abs", (x,), (d,))


def powi(x, n: int):
    if not isinstance(n, int):
        raise TypeError("powi takes an integer exponent")
    if not isinstance(x, Value):
        return x ** n
    if n == 0:
        return Value(x.tape, 1.0, "powi", (x,), (0.0,))
    if n < 0 and x.data == 0.0:
        raise ZeroDivisionError("negative power of zero")
    return Value(x.tape, x.data ** n, "powi", (x,), (n * x.data ** (n - 1),))


def _select(a, b, op, pick_a: bool, tie: bool):
    tape = _tape_of((a, b))
    av = a.data if isinstance(a, Value) else float(a)
    bv = b.data if isinstance(b, Value) else float(b)
    if tape is None:
        return av if pick_a else bv
    if isinstance(a, Value) and isinstance(b, Value) and a.tape is not b.tape:
        raise ValueError("operands live on different tapes")
    da, db = (0.5, 0.5) if tie else ((1.0, 0.0) if pick_a else (0.0, 1.0))
    parents, partials = [], []
    if isinstance(a, Value):
        parents.append(a)
        partials.append(da)
    if isinstance(b, Value):
        parents.append(b)
        partials.append(db)
    return Value(tape, av if pick_a else bv, op, tuple(parents), tuple(partials))


def maximum(a, b):
    """max(a, b); gradient goes to the strictly larger operand, split on ties."""
    av = a.data if isinstance(a, Value) else a
    bv = b.data if isinstance(b, Value) else b
    return _select(a, b, "max", av >= bv, av == bv)


def minimum(a, b):
    av = a.data if isinstance(a, Value) else a
    bv = b.data if isinstance(b, Value) else b
    return _select(a, b, "min", av <= bv, av == bv)


def vsum(xs: Sequence):
    """n-ary sum recorded as a single node."""
    xs = list(xs)
    tape = _tape_of(xs)
    if tape is None:
        return math.fsum(xs) if xs else 0.0
    total = 0.0
    parents = []
    for x in xs:
        if isinstance(x, Value):
            total += x.data
            parents.append(x)
        else:
            total += x
    return Value(tape, total, "sum", tuple(parents), (1.0,) * len(parents))


def _split(xs):
    """(tape or None, raw values, Value operands) of a mixed sequence."""
    tape = None
    vals, parents = [], []
    for x in xs:
        if type(x) is Value:
            tape = x.tape
            vals.append(x.data)
            parents.append(x)
        else:
            vals.append(x)
    if parents and any(p.tape is not tape for p in parents):
        raise ValueError("operands live on different tapes")
    return tape, vals, parents


def _mean_of(vals, n):
    # shifted accumulation: exact when all entries are equal
    x0 = vals[0]
    return x0 + sum([v - x0 for v in vals]) / n


def vmean(xs: Sequence):
    n = len(xs)
    if n == 0:
        raise ValueError("mean of an empty sequence")
    tape, vals, parents = _split(xs)
    m = _mean_of(vals, n)
    if tape is None:
        return m
    return Value(tape, m, "mean", tuple(parents), (1.0 / n,) * len(parents))


def pvar(xs: Sequence):
    """Population variance (divides by n) as a single node."""
    n = len(xs)
    if n == 0:
        raise ValueError("variance of an empty sequence")
    tape, vals, parents = _split(xs)
    m = _mean_of(vals, n)
    dev = [v - m for v in vals]
    var = sum([d * d for d in dev]) / n
    if tape is None:
        return var
    if len(parents) == n:
        partials = tuple([2.0 * d / n for d in dev])
    else:
        partials = tuple(2.0 * d / n for x, d in zip(xs, dev) if type(x) is Value)
    return Value(tape, var, "pvar", tuple(parents), partials)


def softmax(xs: Sequence) -> list:
    """Max-shifted softmax over a sequence of floats or Values."""
    xs = list(xs)
    if not xs:
        return []
    shift = max(x.data if isinstance(x, Value) else x for x in xs)
    es = [exp(x - shift) for x in xs]
    total = vsum(es)
    return [e / total for e in es]


@dataclass
class GradCheckReport:
    analytic: list[float]
    numeric: list[float]
    rel_errors: list[float] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors, default=0.0)

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


def grad_check(f: Callable[[list], Value], params: Sequence[float], h: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central differences.

    ``f`` receives a list of leaf Values (or floats) and returns a scalar.
    """
    params = [float(p) for p in params]
    tape = Tape()
    leaves = tape.params_from(params)
    root = f(leaves)
    analytic = tape.backward(root)

    def evaluate(xs):
        t = Tape()
        out = f(t.params_from(xs))
        return out.data if isinstance(out, Value) else float(out)

    numeric = []
    for i in range(len(params)):
        up = list(params)
        dn = list(params)
        up[i] += h
        dn[i] -= h
        numeric.append((evaluate(up) - evaluate(dn)) / (2 * h))
    errs = [relative_error(a, n) for a, n in zip(analytic, numeric)]
    return GradCheckReport(analytic, numeric, errs)
