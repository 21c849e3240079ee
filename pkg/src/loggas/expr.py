"""Arithmetic expression trees for potentials and basic maps.

A tiny recursive-descent parser covering the grammar used by ensemble
configs: numbers, the variable ``x``, named parameters, ``+ - * / ^``,
unary minus, and a fixed set of functions. Trees are immutable; evaluation
is precision-parameterized through mpmath or compiled to fast float/numpy
callables.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import mpmath as mp
import numpy as np

from .errors import ExpressionError

FUNCTIONS = ("exp", "log", "sinh", "cosh", "sqrt", "asin", "abs", "sin", "cos")

_MP_FUNCS = {
    "exp": mp.exp, "log": mp.log, "sinh": mp.sinh, "cosh": mp.cosh,
    "sqrt": mp.sqrt, "asin": mp.asin, "abs": abs, "sin": mp.sin, "cos": mp.cos,
}
_MATH_FUNCS = {
    "exp": math.exp, "log": math.log, "sinh": math.sinh, "cosh": math.cosh,
    "sqrt": math.sqrt, "asin": math.asin, "abs": abs, "sin": math.sin, "cos": math.cos,
}
_NUMPY_FUNCS = {
    "exp": np.exp, "log": np.log, "sinh": np.sinh, "cosh": np.cosh,
    "sqrt": np.sqrt, "asin": np.arcsin, "abs": np.abs, "sin": np.sin, "cos": np.cos,
}


class Node:
    """Base class for expression nodes. Subclasses are frozen dataclasses."""

    __slots__ = ()


@dataclass(frozen=True)
class Num(Node):
    # literal text is preserved so evaluation at any precision reparses the
    # exact decimal the user wrote
    text: str


@dataclass(frozen=True)
class Var(Node):
    pass


@dataclass(frozen=True)
class Param(Node):
    name: str


@dataclass(frozen=True)
class Neg(Node):
    arg: Node


@dataclass(frozen=True)
class BinOp(Node):
    op: str  # one of + - * / ^
    left: Node
    right: Node


@dataclass(frozen=True)
class Func(Node):
    name: str
    arg: Node


_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(src):
    pos, out = 0, []
    while pos < len(src):
        m = _TOKEN.match(src, pos)
        if m is None:
            # skip leading whitespace before reporting
            stripped = pos + len(src[pos:]) - len(src[pos:].lstrip())
            if stripped >= len(src):
                break
            raise ExpressionError(f"unexpected character {src[stripped]!r}", offset=stripped)
        kind = m.lastgroup
        out.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    out.append(("end", "", len(src)))
    return out


class _Parser:
    def __init__(self, src):
        self.src = src
        self.toks = _tokenize(src)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def next(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, text):
        kind, val, off = self.next()
        if val != text:
            raise ExpressionError(f"expected {text!r}, found {val!r}", offset=off)

    def parse(self):
        node = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            raise ExpressionError(f"trailing input {val!r}", offset=off)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.next()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.next()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[1] == "-":
            self.next()
            return Neg(self.unary())
        if self.peek()[1] == "+":
            self.next()
            return self.unary()
        return self.power()

    def power(self):
        node = self.atom()
        if self.peek()[1] == "^":
            self.next()
            # right-associative; exponent may carry unary minus
            return BinOp("^", node, self.unary())
        return node

    def atom(self):
        kind, val, off = self.next()
        if kind == "num":
            return Num(val)
        if kind == "name":
            if self.peek()[1] == "(":
                if val not in FUNCTIONS:
                    raise ExpressionError(f"unknown function {val!r}", offset=off)
                self.next()
                arg = self.expr()
                self.expect(")")
                return Func(val, arg)
            if val == "x":
                return Var()
            return Param(val)
        if val == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ExpressionError(f"unexpected token {val!r}", offset=off)


# precedence levels for the canonical printer
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4, "atom": 5}


def _print(node):
    if isinstance(node, Num):
        return node.text, _PREC["atom"]
    if isinstance(node, Var):
        return "x", _PREC["atom"]
    if isinstance(node, Param):
        return node.name, _PREC["atom"]
    if isinstance(node, Func):
        inner, _ = _print(node.arg)
        return f"{node.name}({inner})", _PREC["atom"]
    if isinstance(node, Neg):
        inner, prec = _print(node.arg)
        if prec < _PREC["neg"]:
            inner = f"({inner})"
        return f"-{inner}", _PREC["neg"]
    if isinstance(node, BinOp):
        lh, lp = _print(node.left)
        rh, rp = _print(node.right)
        p = _PREC[node.op]
        # left-assoc for +-*/: right side needs parens at equal precedence;
        # '^' is right-assoc: the left side does.
        if node.op == "^":
            if lp <= p:
                lh = f"({lh})"
            if rp < p:
                rh = f"({rh})"
        else:
            if lp < p:
                lh = f"({lh})"
            if rp <= p:
                rh = f"({rh})"
        return f"{lh}{node.op}{rh}", p
    raise TypeError(f"not an expression node: {node!r}")


def _walk(node):
    yield node
    if isinstance(node, Neg):
        yield from _walk(node.arg)
    elif isinstance(node, BinOp):
        yield from _walk(node.left)
        yield from _walk(node.right)
    elif isinstance(node, Func):
        yield from _walk(node.arg)


@dataclass(frozen=True)
class Expression:
    """Immutable arithmetic expression in the variable ``x``.

    Free parameters must be bound (via ``params`` at evaluation/compile
    time or :meth:`bind`) before any evaluation.
    """

    root: Node
    source: str

    def __str__(self):
        return _print(self.root)[0]

    def __eq__(self, other):
        return isinstance(other, Expression) and self.root == other.root

    def __hash__(self):
        return hash(self.root)

    @property
    def parameters(self):
        """Sorted names of free parameters."""
        return tuple(sorted({n.name for n in _walk(self.root) if isinstance(n, Param)}))

    def _check_bound(self, params):
        missing = [p for p in self.parameters if p not in params]
        if missing:
            raise ExpressionError(f"unbound parameters: {', '.join(missing)}")

    def bind(self, **params):
        """Substitute parameter values, returning a new expression."""
        def literal(value):
            if isinstance(value, str):
                return parse_expression(value).root
            v = float(value)
            return Neg(Num(repr(-v))) if v < 0 else Num(repr(v))

        def sub(node):
            if isinstance(node, Param) and node.name in params:
                return literal(params[node.name])
            if isinstance(node, Neg):
                return Neg(sub(node.arg))
            if isinstance(node, BinOp):
                return BinOp(node.op, sub(node.left), sub(node.right))
            if isinstance(node, Func):
                return Func(node.name, sub(node.arg))
            return node
        root = sub(self.root)
        return Expression(root, _print(root)[0])

    def substitute_scale(self, c):
        """Return the expression with x replaced by (c*x)."""
        scaled = BinOp("*", Num(repr(float(c))), Var())

        def sub(node):
            if isinstance(node, Var):
                return scaled
            if isinstance(node, Neg):
                return Neg(sub(node.arg))
            if isinstance(node, BinOp):
                return BinOp(node.op, sub(node.left), sub(node.right))
            if isinstance(node, Func):
                return Func(node.name, sub(node.arg))
            return node
        root = sub(self.root)
        return Expression(root, _print(root)[0])

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, x, params=None, precision=None):
        """Evaluate at ``x`` with mpmath at ``precision`` decimal digits.

        Deterministic: the same (x, params, precision) always produces the
        same digits. ``precision=None`` uses the ambient mpmath precision.
        """
        params = params or {}
        self._check_bound(params)
        if precision is not None:
            with mp.workdps(precision):
                return self._eval_mp(self.root, mp.mpf(x), params)
        return self._eval_mp(self.root, mp.mpf(x), params)

    def _eval_mp(self, node, x, params):
        if isinstance(node, Num):
            return mp.mpf(node.text)
        if isinstance(node, Var):
            return x
        if isinstance(node, Param):
            return mp.mpf(params[node.name])
        if isinstance(node, Neg):
            return -self._eval_mp(node.arg, x, params)
        if isinstance(node, Func):
            return _MP_FUNCS[node.name](self._eval_mp(node.arg, x, params))
        a = self._eval_mp(node.left, x, params)
        b = self._eval_mp(node.right, x, params)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            return a / b
        return a ** b

    def compile(self, backend="mpmath", params=None):
        """Compile to a unary callable f(x).

        backend: "mpmath" (arbitrary precision at the ambient context),
        "math" (float scalars), or "numpy" (vectorized arrays).
        """
        params = params or {}
        self._check_bound(params)
        if backend == "mpmath":
            root = self.root
            return lambda x: self._eval_mp(root, x, params)
        funcs = _MATH_FUNCS if backend == "math" else _NUMPY_FUNCS

        def build(node):
            if isinstance(node, Num):
                v = float(node.text)
                return lambda x: v
            if isinstance(node, Var):
                return lambda x: x
            if isinstance(node, Param):
                v = float(params[node.name])
                return lambda x: v
            if isinstance(node, Neg):
                f = build(node.arg)
                return lambda x: -f(x)
            if isinstance(node, Func):
                g, f = funcs[node.name], build(node.arg)
                return lambda x: g(f(x))
            fl, fr = build(node.left), build(node.right)
            op = node.op
            if op == "+":
                return lambda x: fl(x) + fr(x)
            if op == "-":
                return lambda x: fl(x) - fr(x)
            if op == "*":
                return lambda x: fl(x) * fr(x)
            if op == "/":
                return lambda x: fl(x) / fr(x)
            return lambda x: fl(x) ** fr(x)

        return build(self.root)

    # -- structure queries used by the Gram moment engine --------------------

    def as_monomial(self):
        """Match c * x^p (with c, p constants); return (c, p) or None.

        Recognizes x, c*x, x^p, c*x^p, c*x*x, nested negation, and numeric
        coefficients. Used to collapse Gram entries to one-parameter moments.
        """
        def visit(node):
            # returns (coeff, power) with float coeff/power, or None
            if isinstance(node, Num):
                return float(node.text), 0.0
            if isinstance(node, Var):
                return 1.0, 1.0
            if isinstance(node, Neg):
                r = visit(node.arg)
                return None if r is None else (-r[0], r[1])
            if isinstance(node, BinOp):
                if node.op == "*":
                    a, b = visit(node.left), visit(node.right)
                    if a is None or b is None:
                        return None
                    return a[0] * b[0], a[1] + b[1]
                if node.op == "/":
                    a, b = visit(node.left), visit(node.right)
                    if a is None or b is None or b[1] != 0.0 or b[0] == 0.0:
                        return None
                    return a[0] / b[0], a[1]
                if node.op == "^":
                    a = visit(node.left)
                    e = visit(node.right)
                    if a is None or e is None or e[1] != 0.0:
                        return None
                    if a[1] == 0.0:  # constant ^ constant
                        return a[0] ** e[0], 0.0
                    if a[0] < 0:
                        return None
                    return a[0] ** e[0], a[1] * e[0]
                return None
            return None

        if any(isinstance(n, Param) for n in _walk(self.root)):
            return None
        return visit(self.root)


def parse_expression(src: str) -> Expression:
    """Parse ``src`` into an :class:`Expression`.

    Raises :class:`ExpressionError` with the byte offset on syntax errors,
    unknown function names, or malformed input. Round-trips through the
    canonical printer: ``parse(str(parse(s)))`` equals ``parse(s)``.
    """
    if not isinstance(src, str) or not src.strip():
        raise ExpressionError("empty expression", offset=0)
    root = _Parser(src).parse()
    return Expression(root, src)
