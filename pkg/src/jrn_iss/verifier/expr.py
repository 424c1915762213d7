"""Hash-consed expression DAG for the falsification queries.

Nodes are interned, so structurally equal expressions are the same object
and DAG equality is identity. Python operators build nodes, and the
``sin``/``cos``/``tanh`` methods let numpy object arrays of nodes go through
``np.sin`` and friends. That is how the plant maps in
:mod:`jrn_iss.dynamics` produce symbolic output.
"""

from __future__ import annotations

import math
import weakref
from numbers import Real

OPS = ("var", "const", "add", "sub", "mul", "neg", "sq", "tanh", "sin", "cos", "abs", "norm")
_UNARY = ("neg", "sq", "tanh", "sin", "cos", "abs")

_interned = weakref.WeakValueDictionary()


class Expr:
    __slots__ = ("op", "args", "value", "__weakref__")

    def __new__(cls, op, args=(), value=None):
        if op not in OPS:
            raise ValueError(f"unsupported node kind {op!r}")
        args = tuple(args)
        for a in args:
            if not isinstance(a, Expr):
                raise TypeError(f"argument of {op} must be Expr, got {type(a).__name__}")
        if op == "const":
            value = float(value)
            if not math.isfinite(value):
                raise ValueError("constants must be finite")
            # Keep -0.0 distinct so the SMT-LIB round trip stays exact.
            key = (op, (), (value, math.copysign(1.0, value)))
        elif op == "var":
            value = (int(value[0]), str(value[1]))
            key = (op, (), value)
        else:
            if op in _UNARY and len(args) != 1:
                raise ValueError(f"{op} takes one argument")
            if op in ("sub", "mul") and len(args) != 2:
                raise ValueError(f"{op} takes two arguments")
            if op in ("add", "norm") and not args:
                raise ValueError(f"{op} needs at least one argument")
            key = (op, tuple(id(a) for a in args), None)
        node = _interned.get(key)
        if node is not None:
            return node
        node = object.__new__(cls)
        node.op = op
        node.args = args
        node.value = value
        _interned[key] = node
        return node

    # -- construction helpers -------------------------------------------------

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

    def __neg__(self):
        return neg(self)

    def __abs__(self):
        return Expr("abs", (self,))

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise ValueError("only squaring is supported")

    def sin(self):
        return Expr("sin", (self,))

    def cos(self):
        return Expr("cos", (self,))

    def tanh(self):
        return Expr("tanh", (self,))

    def __repr__(self):
        if self.op == "const":
            return repr(self.value)
        if self.op == "var":
            return self.value[1]
        return f"{self.op}({', '.join(map(repr, self.args))})" if len(self.args) < 4 else \
            f"{self.op}(<{len(self.args)} args>)"

    def __bool__(self):
        return True

    __hash__ = object.__hash__

    def __eq__(self, other):
        return self is other


def var(index: int, name: str) -> Expr:
    return Expr("var", value=(index, name))


def const(x: float) -> Expr:
    return Expr("const", value=x)


def _lift(x):
    if isinstance(x, Expr):
        return x
    if isinstance(x, Real):
        return const(float(x))
    raise TypeError(f"cannot use {type(x).__name__} in an expression")


def _is_const(x, v=None):
    return x.op == "const" and (v is None or x.value == v)


def add(a, b) -> Expr:
    a, b = _lift(a), _lift(b)
    if _is_const(a) and _is_const(b):
        return const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Expr("add", (a, b))


def sub(a, b) -> Expr:
    a, b = _lift(a), _lift(b)
    if _is_const(a) and _is_const(b):
        return const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    return Expr("sub", (a, b))


def mul(a, b) -> Expr:
    a, b = _lift(a), _lift(b)
    if _is_const(a) and _is_const(b):
        return const(a.value * b.value)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if a is b:
        return square(a)
    return Expr("mul", (a, b))


def neg(a) -> Expr:
    a = _lift(a)
    if _is_const(a):
        return const(-a.value)
    return Expr("neg", (a,))


def square(a) -> Expr:
    a = _lift(a)
    if _is_const(a):
        return const(a.value * a.value)
    return Expr("sq", (a,))


def tanh(a) -> Expr:
    return Expr("tanh", (_lift(a),))


def sin(a) -> Expr:
    return Expr("sin", (_lift(a),))


def cos(a) -> Expr:
    return Expr("cos", (_lift(a),))


def norm(args) -> Expr:
    """Euclidean norm of a list of expressions."""
    return Expr("norm", tuple(_lift(a) for a in args))


def esum(terms) -> Expr:
    """n-ary sum; constant terms are folded."""
    terms = [_lift(t) for t in terms]
    c = sum(t.value for t in terms if t.op == "const")
    rest = [t for t in terms if t.op != "const"]
    if c != 0.0:
        rest.append(const(c))
    if not rest:
        return const(0.0)
    if len(rest) == 1:
        return rest[0]
    return Expr("add", rest)


def lincomb(coeffs, terms) -> Expr:
    return esum(float(c) * t for c, t in zip(coeffs, terms) if float(c) != 0.0)


def sumsq(args) -> Expr:
    return esum(square(a) for a in args)


def topological(roots):
    """Nodes reachable from ``roots`` with children before parents."""
    order, seen = [], set()
    for root in roots:
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            for child in reversed(node.args):
                if id(child) not in seen:
                    stack.append((child, False))
    return order


def variables(roots):
    return sorted({n.value for n in topological(roots) if n.op == "var"})
