"""Scalar tape automatic differentiation with forward-over-reverse support.

A :class:`Tape` records every operation on :class:`Var` scalars together with
its local partial derivatives; :func:`backward` sweeps it in reverse.
:class:`DualVar` pairs a primal with a tangent (d/dt of the primal). Both
halves are ``Var`` nodes on the same tape, so anything computed from tangents,
such as an ODE residual, can itself be differentiated in reverse.

Elementary functions (:func:`tanh`, :func:`relu`, ...) accept plain floats,
``Var`` and ``DualVar`` alike.

Example
-------
>>> tape = Tape()
>>> w = tape.param(0.5)
>>> t = DualVar(tape.var(2.0), 1.0)
>>> y = tanh(w * t)
>>> g = backward(y.tangent)  # d/dw of dy/dt
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError

__all__ = [
    "Tape",
    "Var",
    "DualVar",
    "backward",
    "gradient_check",
    "dot",
    "sqrt",
    "square",
    "pow32",
    "absolute",
    "minimum",
    "maximum",
    "relu",
    "leaky_relu",
    "tanh",
    "gelu",
    "vsum",
    "mean",
    "LEAKY_SLOPE",
    "GELU_C",
    "GELU_K",
]

LEAKY_SLOPE = 0.01
GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


class Tape:
    """Append-only record of scalar operations.

    Node ``i`` stores its value, the indices of its operands (always ``< i``)
    and the partial derivative of node ``i`` with respect to each operand.
    """

    __slots__ = ("values", "parents", "partials", "params")

    def __init__(self):
        self.values: list[float] = []
        self.parents: list[tuple[int, ...]] = []
        self.partials: list[tuple[float, ...]] = []
        self.params: list[int] = []

    def __len__(self) -> int:
        return len(self.values)

    def _push(self, value: float, parents: tuple[int, ...] = (), partials: tuple[float, ...] = ()) -> "Var":
        self.values.append(value)
        self.parents.append(parents)
        self.partials.append(partials)
        return Var(self, len(self.values) - 1, value)

    def var(self, value: float) -> "Var":
        """A leaf that is not reported by :func:`backward`."""
        return self._push(float(value))

    def param(self, value: float) -> "Var":
        """A leaf registered as a trainable parameter."""
        v = self._push(float(value))
        self.params.append(v.index)
        return v

    def params_from(self, values: Iterable[float]) -> list["Var"]:
        return [self.param(x) for x in values]


class Var:
    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: Tape, index: int, value: float):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self):
        return f"Var({self.value!r}, node={self.index})"

    def __float__(self):
        return float(self.value)

    def _unary(self, value, partial):
        return self.tape._push(value, (self.index,), (partial,))

    def __add__(self, other):
        if isinstance(other, Var):
            return self.tape._push(self.value + other.value, (self.index, other.index), (1.0, 1.0))
        if isinstance(other, DualVar):
            return NotImplemented
        return self._unary(self.value + other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Var):
            return self.tape._push(self.value - other.value, (self.index, other.index), (1.0, -1.0))
        if isinstance(other, DualVar):
            return NotImplemented
        return self._unary(self.value - other, 1.0)

    def __rsub__(self, other):
        return self._unary(other - self.value, -1.0)

    def __neg__(self):
        return self._unary(-self.value, -1.0)

    def __mul__(self, other):
        if isinstance(other, Var):
            return self.tape._push(self.value * other.value, (self.index, other.index), (other.value, self.value))
        if isinstance(other, DualVar):
            return NotImplemented
        return self._unary(self.value * other, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            if other.value == 0.0:
                raise DomainError("division by zero")
            q = self.value / other.value
            return self.tape._push(q, (self.index, other.index), (1.0 / other.value, -q / other.value))
        if isinstance(other, DualVar):
            return NotImplemented
        if other == 0:
            raise DomainError("division by zero")
        return self._unary(self.value / other, 1.0 / other)

    def __rtruediv__(self, other):
        if self.value == 0.0:
            raise DomainError("division by zero")
        q = other / self.value
        return self._unary(q, -q / self.value)


def _lift(x, tape: Tape):
    return x if isinstance(x, Var) else tape.var(float(x))


class DualVar:
    """Primal value with its time tangent; both are tape nodes or plain floats."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent=0.0):
        self.primal = primal
        self.tangent = tangent

    def __repr__(self):
        return f"DualVar({_val(self.primal)!r}, d={_val(self.tangent)!r})"

    def __add__(self, other):
        if isinstance(other, DualVar):
            return DualVar(self.primal + other.primal, self.tangent + other.tangent)
        return DualVar(self.primal + other, self.tangent)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, DualVar):
            return DualVar(self.primal - other.primal, self.tangent - other.tangent)
        return DualVar(self.primal - other, self.tangent)

    def __rsub__(self, other):
        return DualVar(other - self.primal, -self.tangent)

    def __neg__(self):
        return DualVar(-self.primal, -self.tangent)

    def __mul__(self, other):
        if isinstance(other, DualVar):
            return DualVar(self.primal * other.primal, self.primal * other.tangent + self.tangent * other.primal)
        return DualVar(self.primal * other, self.tangent * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, DualVar):
            if _val(other.primal) == 0.0:
                raise DomainError("division by zero")
            q = self.primal / other.primal
            return DualVar(q, (self.tangent - q * other.tangent) / other.primal)
        if _val(other) == 0.0:
            raise DomainError("division by zero")
        return DualVar(self.primal / other, self.tangent / other)

    def __rtruediv__(self, other):
        if _val(self.primal) == 0.0:
            raise DomainError("division by zero")
        q = other / self.primal
        return DualVar(q, -(q / self.primal) * self.tangent)


def _val(x) -> float:
    return x.value if isinstance(x, Var) else float(x)


# --- elementary functions -------------------------------------------------


def sqrt(x):
    if isinstance(x, DualVar):
        s = sqrt(x.primal)
        return DualVar(s, x.tangent * (0.5 / s) if _val(s) != 0.0 else 0.0 * x.tangent)
    v = _val(x)
    if v < 0:
        raise DomainError(f"sqrt of negative number {v}")
    s = math.sqrt(v)
    if isinstance(x, Var):
        return x._unary(s, 0.5 / s if s > 0 else math.inf)
    return s


def square(x):
    if isinstance(x, DualVar):
        return DualVar(square(x.primal), 2.0 * x.primal * x.tangent)
    if isinstance(x, Var):
        return x._unary(x.value * x.value, 2.0 * x.value)
    return float(x) * float(x)


def pow32(x):
    """``x ** 1.5`` for ``x >= 0``."""
    if isinstance(x, DualVar):
        return DualVar(pow32(x.primal), 1.5 * sqrt(x.primal) * x.tangent)
    v = _val(x)
    if v < 0:
        raise DomainError(f"pow(., 3/2) of negative number {v}")
    r = math.sqrt(v)
    if isinstance(x, Var):
        return x._unary(v * r, 1.5 * r)
    return v * r


def _sign(v: float) -> float:
    return 1.0 if v > 0 else (-1.0 if v < 0 else 0.0)


def absolute(x):
    if isinstance(x, DualVar):
        return DualVar(absolute(x.primal), _sign(_val(x.primal)) * x.tangent)
    if isinstance(x, Var):
        return x._unary(abs(x.value), _sign(x.value))
    return abs(float(x))


def minimum(x, c: float):
    """``min(x, c)`` with a constant ``c``."""
    if isinstance(x, DualVar):
        active = _val(x.primal) < c
        return DualVar(minimum(x.primal, c), x.tangent * (1.0 if active else 0.0))
    if isinstance(x, Var):
        return x._unary(x.value, 1.0) if x.value < c else x._unary(float(c), 0.0)
    return min(float(x), c)


def maximum(x, c: float):
    """``max(x, c)`` with a constant ``c``."""
    if isinstance(x, DualVar):
        active = _val(x.primal) > c
        return DualVar(maximum(x.primal, c), x.tangent * (1.0 if active else 0.0))
    if isinstance(x, Var):
        return x._unary(x.value, 1.0) if x.value > c else x._unary(float(c), 0.0)
    return max(float(x), c)


def relu(x):
    # derivative at exactly 0 is taken as 0
    if isinstance(x, DualVar):
        on = _val(x.primal) > 0
        return DualVar(relu(x.primal), x.tangent * (1.0 if on else 0.0))
    if isinstance(x, Var):
        return x._unary(x.value, 1.0) if x.value > 0 else x._unary(0.0, 0.0)
    return max(float(x), 0.0)


def leaky_relu(x):
    if isinstance(x, DualVar):
        slope = 1.0 if _val(x.primal) > 0 else LEAKY_SLOPE
        return DualVar(leaky_relu(x.primal), x.tangent * slope)
    v = _val(x)
    slope = 1.0 if v > 0 else LEAKY_SLOPE
    if isinstance(x, Var):
        return x._unary(v * slope, slope)
    return v * slope


def tanh(x):
    if isinstance(x, DualVar):
        y = tanh(x.primal)
        return DualVar(y, (1.0 - y * y) * x.tangent)
    if isinstance(x, Var):
        y = math.tanh(x.value)
        return x._unary(y, 1.0 - y * y)
    return math.tanh(float(x))


def gelu(x):
    """Tanh approximation ``0.5 x (1 + tanh(c (x + k x^3)))``, built from primitives."""
    inner = GELU_C * (x + GELU_K * (x * x * x))
    return 0.5 * x * (1.0 + tanh(inner))


def vsum(xs: Sequence):
    """Sum in index order. Var-only inputs are fused into one tape node."""
    xs = list(xs)
    if not xs:
        return 0.0
    if any(isinstance(x, DualVar) for x in xs):
        acc = xs[0]
        for x in xs[1:]:
            acc = acc + x
        return acc
    tapes = [x.tape for x in xs if isinstance(x, Var)]
    if not tapes:
        return sum(float(x) for x in xs)
    total = 0.0
    parents = []
    for x in xs:
        total += _val(x)
        if isinstance(x, Var):
            parents.append(x.index)
    return tapes[0]._push(total, tuple(parents), (1.0,) * len(parents))


def mean(xs: Sequence):
    xs = list(xs)
    return vsum(xs) * (1.0 / len(xs))


def dot(ws: Sequence, xs: Sequence, bias=None):
    """``sum_i ws[i] * xs[i] (+ bias)`` recorded as a single fused node.

    Falls back to elementwise arithmetic when any operand is a ``DualVar``.
    """
    if len(ws) != len(xs):
        raise ValueError("dot of sequences with different lengths")
    if any(isinstance(x, DualVar) for x in xs) or any(isinstance(w, DualVar) for w in ws) or isinstance(bias, DualVar):
        primals = [x.primal if isinstance(x, DualVar) else x for x in xs]
        tangents = [x.tangent if isinstance(x, DualVar) else 0.0 for x in xs]
        wp = [w.primal if isinstance(w, DualVar) else w for w in ws]
        wt = [w.tangent if isinstance(w, DualVar) else 0.0 for w in ws]
        bp = bias.primal if isinstance(bias, DualVar) else bias
        bt = bias.tangent if isinstance(bias, DualVar) else 0.0
        primal = dot(wp, primals, bp)
        tangent = dot(wp + wt, tangents + primals, bt if _nonzero(bt) else None)
        return DualVar(primal, tangent)
    tape = None
    for v in (*ws, *xs, bias):
        if isinstance(v, Var):
            tape = v.tape
            break
    total = 0.0
    for w, x in zip(ws, xs):
        total += _val(w) * _val(x)
    if bias is not None:
        total += _val(bias)
    if tape is None:
        return total
    parents: list[int] = []
    partials: list[float] = []
    for w, x in zip(ws, xs):
        if isinstance(w, Var):
            parents.append(w.index)
            partials.append(_val(x))
        if isinstance(x, Var):
            parents.append(x.index)
            partials.append(_val(w))
    if isinstance(bias, Var):
        parents.append(bias.index)
        partials.append(1.0)
    return tape._push(total, tuple(parents), tuple(partials))


def _nonzero(x) -> bool:
    return isinstance(x, Var) or float(x) != 0.0


# --- reverse sweep ---------------------------------------------------------


def backward(loss, params: Sequence[Var] | None = None) -> np.ndarray:
    """Gradient of the scalar ``loss`` with respect to parameter leaves.

    Parameters default to every leaf registered with :meth:`Tape.param`, in
    registration order. Parameters that do not influence ``loss`` get 0.
    """
    if isinstance(loss, DualVar):
        raise TypeError("backward needs a Var; pick .primal or .tangent")
    if not isinstance(loss, Var):
        n = len(params) if params is not None else 0
        return np.zeros(n)
    tape = loss.tape
    idx = [p.index for p in params] if params is not None else tape.params
    adj = [0.0] * (loss.index + 1)
    adj[loss.index] = 1.0
    parents = tape.parents
    partials = tape.partials
    for i in range(loss.index, -1, -1):
        a = adj[i]
        if a == 0.0:
            continue
        for p, d in zip(parents[i], partials[i]):
            adj[p] += a * d
    return np.array([adj[i] if i <= loss.index else 0.0 for i in idx])


def gradient_check(
    f: Callable[[Tape, list[Var]], Var],
    x,
    eps: float = 1e-6,
) -> float:
    """Largest relative disagreement between :func:`backward` and central differences.

    ``f(tape, params)`` must build a scalar from the parameter leaves. The
    relative error of component ``i`` is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-8, 1e-4]")
    x = np.asarray(x, dtype=float)
    tape = Tape()
    params = tape.params_from(x)
    analytic = backward(f(tape, params), params)

    def value(v):
        t = Tape()
        return _val(f(t, t.params_from(v)))

    worst = 0.0
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        numeric = (value(xp) - value(xm)) / (2 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
