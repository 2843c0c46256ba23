"""Equation strings: parsing, evaluation and printing.

The grammar is ordinary infix arithmetic with ``^`` for powers::

    expr  := term (('+' | '-') term)*
    term  := unary (('*' | '/') unary)*
    unary := ('-' | '+') unary | power
    power := atom ('^' unary)?
    atom  := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

so ``^`` binds tighter than unary minus (``-x^2 == -(x^2)``) and is right
associative (``2^3^2 == 2^9``). ``**`` is accepted as a synonym for ``^``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import DomainError, ExprSyntaxError, UnboundSymbolError, UnknownFunctionError

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "abs")
CONSTANTS = {"pi": math.pi}

#: Lower clamp applied in lenient array evaluation (fractional powers, log, sqrt).
CLAMP_FLOOR = 1e-8

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


class Expr:
    """Base class of the immutable expression tree."""

    __slots__ = ()

    def symbols(self) -> frozenset:
        out: set = set()
        self._collect(out)
        return frozenset(out)

    def _collect(self, out):
        pass

    def evaluate(self, env: Mapping[str, float]) -> float:
        raise NotImplementedError

    def evaluate_array(self, env, clamp=None):
        raise NotImplementedError

    def __str__(self):
        return pretty(self)


@dataclass(frozen=True, eq=True)
class Const(Expr):
    value: float

    def evaluate(self, env):
        return float(self.value)

    def evaluate_array(self, env, clamp=None):
        return float(self.value)


@dataclass(frozen=True, eq=True)
class Sym(Expr):
    name: str

    def __post_init__(self):
        if not self.name:
            raise ValueError("symbol name must be nonempty")

    def _collect(self, out):
        out.add(self.name)

    def evaluate(self, env):
        try:
            return float(env[self.name])
        except KeyError:
            if self.name in CONSTANTS:
                return CONSTANTS[self.name]
            raise UnboundSymbolError(self.name) from None

    def evaluate_array(self, env, clamp=None):
        try:
            return env[self.name]
        except KeyError:
            if self.name in CONSTANTS:
                return CONSTANTS[self.name]
            raise UnboundSymbolError(self.name) from None


@dataclass(frozen=True, eq=True)
class Neg(Expr):
    child: Expr

    def _collect(self, out):
        self.child._collect(out)

    def evaluate(self, env):
        return -self.child.evaluate(env)

    def evaluate_array(self, env, clamp=None):
        return -self.child.evaluate_array(env, clamp)


@dataclass(frozen=True, eq=True)
class Bin(Expr):
    op: str
    left: Expr
    right: Expr

    def _collect(self, out):
        self.left._collect(out)
        self.right._collect(out)

    def evaluate(self, env):
        a = self.left.evaluate(env)
        b = self.right.evaluate(env)
        op = self.op
        if op == "+":
            r = a + b
        elif op == "-":
            r = a - b
        elif op == "*":
            r = a * b
        elif op == "/":
            if b == 0.0:
                raise DomainError("division by zero", self)
            r = a / b
        else:
            r = _scalar_pow(a, b, self)
        if r != r:
            raise DomainError("undefined result (NaN)", self)
        return r

    def evaluate_array(self, env, clamp=None):
        a = self.left.evaluate_array(env, clamp)
        b = self.right.evaluate_array(env, clamp)
        op = self.op
        with np.errstate(all="ignore"):
            if op == "+":
                r = a + b
            elif op == "-":
                r = a - b
            elif op == "*":
                r = a * b
            elif op == "/":
                if np.any(np.asarray(b) == 0.0):
                    raise DomainError("division by zero", self)
                r = a / b
            else:
                r = _array_pow(a, b, self, clamp)
        if np.any(np.isnan(r)):
            raise DomainError("undefined result (NaN)", self)
        return r


@dataclass(frozen=True, eq=True)
class Call(Expr):
    func: str
    arg: Expr

    def _collect(self, out):
        self.arg._collect(out)

    def evaluate(self, env):
        x = self.arg.evaluate(env)
        f = self.func
        if f == "log" and x <= 0.0:
            raise DomainError("log of non-positive value", self)
        if f == "sqrt" and x < 0.0:
            raise DomainError("sqrt of negative value", self)
        if f in ("sin", "cos") and math.isinf(x):
            raise DomainError(f"{f} of infinite value", self)
        if f == "exp":
            try:
                return math.exp(x)
            except OverflowError:
                return math.inf
        if f == "abs":
            return abs(x)
        return getattr(math, f)(x)

    def evaluate_array(self, env, clamp=None):
        x = self.arg.evaluate_array(env, clamp)
        f = self.func
        if f in ("log", "sqrt"):
            bad = (x <= 0.0) if f == "log" else (x < 0.0)
            if np.any(bad):
                if clamp is None:
                    raise DomainError(f"{f} argument out of domain", self)
                x = _clamped(x, clamp)
        with np.errstate(over="ignore", invalid="ignore"):
            r = getattr(np, f)(x)
        if np.any(np.isnan(r)):
            raise DomainError("undefined result (NaN)", self)
        return r


class ClampCounter:
    """Tallies how many values were lifted to :data:`CLAMP_FLOOR`."""

    def __init__(self):
        self.count = 0


def _clamped(x, clamp):
    x = np.asarray(x, dtype=float)
    low = x < CLAMP_FLOOR
    clamp.count += int(np.count_nonzero(low))
    return np.where(low, CLAMP_FLOOR, x)


def _scalar_pow(a, b, node):
    if a < 0.0 and not float(b).is_integer():
        raise DomainError("negative base with non-integer exponent", node)
    if a == 0.0 and b < 0.0:
        raise DomainError("zero raised to a negative power", node)
    try:
        return math.pow(a, b)
    except OverflowError:
        if a < 0.0 and float(b) % 2.0 == 1.0:
            return -math.inf
        return math.inf


def _array_pow(a, b, node, clamp):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    frac = b != np.floor(b)
    bad = (a < 0.0) & frac
    if clamp is None:
        if np.any(bad):
            raise DomainError("negative base with non-integer exponent", node)
    else:
        low = frac & (a < CLAMP_FLOOR)
        if np.any(low):
            clamp.count += int(np.count_nonzero(low))
            a = np.where(low, CLAMP_FLOOR, a)
    if np.any((a == 0.0) & (b < 0.0)):
        raise DomainError("zero raised to a negative power", node)
    return np.power(a, b)


# ---------------------------------------------------------------- parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^()]))"
)


def _tokenize(source):
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(source[pos:]) - len(source[pos:].lstrip()))
            raise ExprSyntaxError(
                f"unexpected character {source[bad]!r}", source, _byte_offset(source, bad)
            )
        kind = m.lastgroup
        text = m.group(kind)
        start = m.start(kind)
        if text == "**":
            text = "^"
        tokens.append((kind, text, start))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


def _byte_offset(source, index):
    return len(source[:index].encode("utf-8"))


class _Parser:
    def __init__(self, source):
        self.source = source
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message, tok=None):
        tok = tok or self.peek()
        return ExprSyntaxError(message, self.source, _byte_offset(self.source, tok[2]))

    def expect(self, text):
        tok = self.take()
        if tok[1] != text or tok[0] == "end":
            raise self.error(f"expected {text!r}", tok)

    def parse(self):
        if self.peek()[0] == "end":
            raise self.error("empty expression")
        node = self.expr()
        if self.peek()[0] != "end":
            raise self.error(f"unexpected token {self.peek()[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = Bin(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = Bin(op, node, self.unary())
        return node

    def unary(self):
        tok = self.peek()
        if tok[0] == "op" and tok[1] == "-":
            self.take()
            return Neg(self.unary())
        if tok[0] == "op" and tok[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return Bin("^", base, self.unary())
        return base

    def atom(self):
        tok = self.take()
        kind, text, _ = tok
        if kind == "num":
            return Const(float(text))
        if kind == "name":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                if text not in FUNCTIONS:
                    err = self.error(f"unknown function {text!r}", tok)
                    raise UnknownFunctionError(
                        f"unknown function {text!r}", self.source, err.offset
                    )
                self.take()
                arg = self.expr()
                self.expect(")")
                return Call(text, arg)
            return Sym(text)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "end":
            raise self.error("unexpected end of input", tok)
        raise self.error(f"unexpected token {text!r}", tok)


def parse_expression(source: str) -> Expr:
    """Parse an equation string into an expression tree.

    Raises
    ------
    ExprSyntaxError
        On malformed input; ``offset`` locates the problem.
    UnknownFunctionError
        For a call to anything outside ``sin, cos, exp, log, sqrt, abs``.
    """
    if not isinstance(source, str):
        raise TypeError("expression source must be a string")
    return _Parser(source).parse()


def eval_expr(e: Expr, bindings: Mapping[str, float]) -> float:
    """Evaluate ``e`` with every symbol bound (``pi`` is implicitly bound)."""
    return e.evaluate(bindings)


def eval_array(e: Expr, bindings, clamp: ClampCounter | None = None):
    """Vectorised evaluation over numpy arrays.

    With ``clamp`` given, bases of fractional powers and arguments of
    ``log``/``sqrt`` below :data:`CLAMP_FLOOR` are lifted to it and counted
    instead of raising :class:`DomainError`.
    """
    return e.evaluate_array(bindings, clamp)


# ---------------------------------------------------------------- printing


def _level(e):
    if isinstance(e, Bin):
        return {"+": _PREC_ADD, "-": _PREC_ADD, "*": _PREC_MUL, "/": _PREC_MUL}.get(
            e.op, _PREC_POW
        )
    if isinstance(e, Neg):
        return _PREC_NEG
    return _PREC_ATOM


def _fmt_const(v):
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def pretty(e: Expr) -> str:
    """Render with the minimal parentheses needed to re-parse the same tree."""
    if isinstance(e, Const):
        s = _fmt_const(e.value)
        return f"({s})" if e.value < 0 else s
    if isinstance(e, Sym):
        return e.name
    if isinstance(e, Call):
        return f"{e.func}({pretty(e.arg)})"
    if isinstance(e, Neg):
        inner = pretty(e.child)
        return "-" + (inner if _level(e.child) >= _PREC_NEG else f"({inner})")
    lvl = _level(e)
    left, right = pretty(e.left), pretty(e.right)
    if e.op == "^":
        if _level(e.left) <= _PREC_POW:
            left = f"({left})"
        if _level(e.right) < _PREC_NEG:
            right = f"({right})"
        return f"{left}^{right}"
    if _level(e.left) < lvl:
        left = f"({left})"
    if _level(e.right) <= lvl:
        right = f"({right})"
    sep = f" {e.op} " if lvl == _PREC_ADD else e.op
    return f"{left}{sep}{right}"


def contains(e: Expr, names) -> bool:
    return not e.symbols().isdisjoint(names)


def substitute(e: Expr, mapping: Mapping[str, Expr]) -> Expr:
    """Replace symbols by expressions."""
    if isinstance(e, Sym):
        return mapping.get(e.name, e)
    if isinstance(e, Neg):
        return Neg(substitute(e.child, mapping))
    if isinstance(e, Bin):
        return Bin(e.op, substitute(e.left, mapping), substitute(e.right, mapping))
    if isinstance(e, Call):
        return Call(e.func, substitute(e.arg, mapping))
    return e
