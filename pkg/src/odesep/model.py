"""ODE models built from equation strings, parameter roles and linearity analysis."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from .errors import ModelError, RoleError
from .expr import CONSTANTS, Bin, Call, Const, Expr, Neg, Sym, contains, eval_array, parse_expression

TIME = "t"

LINEAR = "linear"
NONLINEAR = "non-linear"
LIKELIHOOD = "likelihood"
FIXED = "fixed"

ABSENT = "absent"


@dataclass(frozen=True)
class OdeModel:
    """A system ``x' = F(x; theta)`` with one equation per state variable.

    ``roles`` maps every parameter to one of :data:`LINEAR`, :data:`NONLINEAR`,
    :data:`LIKELIHOOD` or :data:`FIXED`; fixed parameters carry their value in
    ``fixed``. ``inputs`` names external input signals. ``t`` is reserved.
    """

    variables: tuple
    equations: tuple
    parameters: tuple
    roles: Mapping[str, str]
    fixed: Mapping[str, float] = field(default_factory=dict)
    inputs: tuple = ()
    sources: tuple = ()

    def __post_init__(self):
        self._check()

    @classmethod
    def build(
        cls,
        equations: Mapping[str, str | Expr],
        parameters: Sequence[str] | None = None,
        nonlinear: Sequence[str] = (),
        likelihood: Sequence[str] = (),
        fixed: Mapping[str, float] | None = None,
        inputs: Sequence[str] = (),
    ) -> "OdeModel":
        """Parse ``equations`` (variable -> string) and assign parameter roles.

        Parameters not listed as nonlinear, likelihood-only or fixed are linear.
        When ``parameters`` is omitted, every unknown symbol is a parameter, in
        order of first appearance.
        """
        fixed = dict(fixed or {})
        variables = tuple(equations)
        exprs, sources = [], []
        for var in variables:
            src = equations[var]
            if isinstance(src, Expr):
                exprs.append(src)
                sources.append(str(src))
            else:
                exprs.append(parse_expression(src))
                sources.append(src)
        if parameters is None:
            known = set(variables) | set(inputs) | {TIME} | set(CONSTANTS)
            found: list = []
            for e in exprs:
                for name in _symbols_in_order(e):
                    if name not in known and name not in found:
                        found.append(name)
            parameters = found + [p for p in likelihood if p not in found]
            parameters += [p for p in fixed if p not in parameters]
        parameters = tuple(parameters)
        roles = {}
        for p in parameters:
            if p in fixed:
                roles[p] = FIXED
            elif p in likelihood:
                roles[p] = LIKELIHOOD
            elif p in nonlinear:
                roles[p] = NONLINEAR
            else:
                roles[p] = LINEAR
        for group, label in ((nonlinear, "nonlinear"), (likelihood, "likelihood"), (fixed, "fixed")):
            stray = [p for p in group if p not in roles]
            if stray:
                raise ModelError(f"{label} names are not parameters of the model: {stray}")
        clash = set(nonlinear) & set(likelihood)
        if clash:
            raise ModelError(f"parameters given more than one role: {sorted(clash)}")
        return cls(
            variables=variables,
            equations=tuple(exprs),
            parameters=parameters,
            roles=roles,
            fixed={k: float(v) for k, v in fixed.items()},
            inputs=tuple(inputs),
            sources=tuple(sources),
        )

    def _check(self):
        if len(self.variables) < 1:
            raise ModelError("a model needs at least one state variable")
        if len(self.equations) != len(self.variables):
            raise ModelError("each variable needs exactly one equation")
        names = list(self.variables) + list(self.parameters) + list(self.inputs)
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ModelError(f"names used for more than one role: {dupes}")
        if TIME in names:
            raise ModelError("'t' is reserved for time")
        known = set(names) | {TIME} | set(CONSTANTS)
        for var, e in zip(self.variables, self.equations):
            unknown = sorted(e.symbols() - known)
            if unknown:
                raise ModelError(f"equation for {var} uses undeclared symbols {unknown}")
        for p, role in self.roles.items():
            if role == FIXED and p not in self.fixed:
                raise ModelError(f"fixed parameter {p} has no value")

    # ------------------------------------------------------------ views

    @property
    def dim(self) -> int:
        return len(self.variables)

    def by_role(self, role) -> tuple:
        return tuple(p for p in self.parameters if self.roles[p] == role)

    @property
    def linear(self) -> tuple:
        return self.by_role(LINEAR)

    @property
    def nonlinear(self) -> tuple:
        return self.by_role(NONLINEAR)

    @property
    def likelihood(self) -> tuple:
        return self.by_role(LIKELIHOOD)

    @property
    def free(self) -> tuple:
        return tuple(p for p in self.parameters if self.roles[p] != FIXED)

    def with_roles(self, nonlinear=None, likelihood=None, fixed=None) -> "OdeModel":
        """Copy with some roles reassigned; unspecified groups keep their members."""
        nonlinear = self.nonlinear if nonlinear is None else tuple(nonlinear)
        likelihood = self.likelihood if likelihood is None else tuple(likelihood)
        fixed = dict(self.fixed if fixed is None else fixed)
        roles = {}
        for p in self.parameters:
            if p in fixed:
                roles[p] = FIXED
            elif p in likelihood:
                roles[p] = LIKELIHOOD
            elif p in nonlinear:
                roles[p] = NONLINEAR
            else:
                roles[p] = LINEAR
        return replace(self, roles=roles, fixed={k: float(v) for k, v in fixed.items()})

    def equation(self, var) -> Expr:
        return self.equations[self.variables.index(var)]

    @cached_property
    def program(self):
        """Bytecode for the compiled right-hand side (see :mod:`odesep._vm`)."""
        from ._vm import compile_model

        return compile_model(self)

    def evaluate_rhs_grid(self, env, clamp=None) -> np.ndarray:
        """Evaluate every equation over arrays in ``env``; returns ``(d, len)``."""
        rows = [np.broadcast_to(eval_array(e, env, clamp), np.shape(env[TIME])) for e in self.equations]
        return np.array(rows, dtype=float)


def _symbols_in_order(e):
    if isinstance(e, Sym):
        yield e.name
    elif isinstance(e, Neg):
        yield from _symbols_in_order(e.child)
    elif isinstance(e, Bin):
        yield from _symbols_in_order(e.left)
        yield from _symbols_in_order(e.right)
    elif isinstance(e, Call):
        yield from _symbols_in_order(e.arg)


# ---------------------------------------------------------------- linearity


def _classify(e: Expr, p: str) -> str:
    """Structural role of ``p`` in ``e`` with every other symbol held constant."""
    if isinstance(e, Sym):
        return LINEAR if e.name == p else ABSENT
    if isinstance(e, Const):
        return ABSENT
    if isinstance(e, Neg):
        return _classify(e.child, p)
    if isinstance(e, Call):
        return NONLINEAR if contains(e.arg, {p}) else ABSENT
    a = _classify(e.left, p)
    if e.op == "^":
        return NONLINEAR if (a != ABSENT or contains(e.right, {p})) else ABSENT
    if e.op == "/":
        if contains(e.right, {p}):
            return NONLINEAR
        return a
    b = _classify(e.right, p)
    if NONLINEAR in (a, b):
        return NONLINEAR
    if e.op == "*" and a == LINEAR and b == LINEAR:
        return NONLINEAR
    return LINEAR if LINEAR in (a, b) else ABSENT


def classify_linearity(model: OdeModel) -> dict:
    """Map ``(variable, parameter)`` to ``linear``, ``non-linear`` or ``absent``."""
    out = {}
    for var, e in zip(model.variables, model.equations):
        for p in model.parameters:
            out[(var, p)] = _classify(e, p)
    return out


def _product_pairs(e: Expr, lin: frozenset, pairs: set) -> frozenset:
    if isinstance(e, Sym):
        return frozenset({e.name}) if e.name in lin else frozenset()
    if isinstance(e, Const):
        return frozenset()
    if isinstance(e, Neg):
        return _product_pairs(e.child, lin, pairs)
    if isinstance(e, Call):
        return _product_pairs(e.arg, lin, pairs)
    a = _product_pairs(e.left, lin, pairs)
    b = _product_pairs(e.right, lin, pairs)
    if e.op == "*" and a and b:
        pairs.update((p, q) for p in a for q in b if p != q)
    return a | b


def validate_roles(model: OdeModel) -> list:
    """Diagnostics for declared-linear parameters that are not separable.

    First every linear parameter is checked on its own. Only when all of them
    pass is the joint form checked, which catches products of two linear
    parameters in the same term.
    """
    lin = model.linear
    order = {p: i for i, p in enumerate(model.parameters)}
    msgs = []
    for j, (var, e) in enumerate(zip(model.variables, model.equations), start=1):
        for p in lin:
            if _classify(e, p) == NONLINEAR:
                msgs.append(f"Problem in eq.{j} [{var}] - parameter [{p}] should be set as non-linear")
    if msgs:
        return msgs
    for j, (var, e) in enumerate(zip(model.variables, model.equations), start=1):
        pairs: set = set()
        _product_pairs(e, frozenset(lin), pairs)
        ordered = sorted({tuple(sorted(pq, key=order.get)) for pq in pairs}, key=lambda pq: (order[pq[0]], order[pq[1]]))
        for p, q in ordered:
            msgs.append(
                f"Problem in eq.{j} [{var}] - parameter [{p}] or [{q}] should be set as non-linear"
            )
    return msgs


# ---------------------------------------------------------------- decomposition

ZERO = Const(0.0)
ONE = Const(1.0)


def _is(e, v):
    return isinstance(e, Const) and e.value == v


def _add(a, b):
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    return Bin("+", a, b)


def _sub(a, b):
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return Neg(b)
    return Bin("-", a, b)


def _neg(a):
    if _is(a, 0.0):
        return a
    if isinstance(a, Neg):
        return a.child
    return Neg(a)


def _mul(a, b):
    if _is(a, 0.0) or _is(b, 0.0):
        return ZERO
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    return Bin("*", a, b)


def _div(a, b):
    if _is(a, 0.0):
        return ZERO
    if _is(b, 1.0):
        return a
    return Bin("/", a, b)


def _split(e: Expr, lin: frozenset):
    """Return ``(offset, {param: coefficient})`` with ``e == offset + sum(coef * param)``."""
    if not contains(e, lin):
        return e, {}
    if isinstance(e, Sym):
        return ZERO, {e.name: ONE}
    if isinstance(e, Neg):
        off, co = _split(e.child, lin)
        return _neg(off), {k: _neg(v) for k, v in co.items()}
    if isinstance(e, Bin) and e.op in "+-":
        o1, c1 = _split(e.left, lin)
        o2, c2 = _split(e.right, lin)
        comb = _add if e.op == "+" else _sub
        co = dict(c1)
        for k, v in c2.items():
            co[k] = comb(co[k], v) if k in co else (v if e.op == "+" else _neg(v))
        return comb(o1, o2), co
    if isinstance(e, Bin) and e.op == "*":
        if not contains(e.right, lin):
            off, co = _split(e.left, lin)
            return _mul(off, e.right), {k: _mul(v, e.right) for k, v in co.items()}
        if not contains(e.left, lin):
            off, co = _split(e.right, lin)
            return _mul(e.left, off), {k: _mul(e.left, v) for k, v in co.items()}
    if isinstance(e, Bin) and e.op == "/" and not contains(e.right, lin):
        off, co = _split(e.left, lin)
        return _div(off, e.right), {k: _div(v, e.right) for k, v in co.items()}
    raise RoleError([f"expression '{e}' is not linear in {sorted(e.symbols() & lin)}"])


@dataclass(frozen=True)
class LinearDecomposition:
    """``F_j = offsets[j] + sum_k coefficients[j][k] * theta_L[k]``."""

    linear: tuple
    offsets: tuple
    coefficients: tuple

    @property
    def p_linear(self) -> int:
        return len(self.linear)

    def reconstruct(self, j: int, env: Mapping[str, float]) -> float:
        total = self.offsets[j].evaluate(env)
        for k, p in enumerate(self.linear):
            total += self.coefficients[j][k].evaluate(env) * float(env[p])
        return total


def decompose_linear(model: OdeModel, linear: Sequence[str] | None = None) -> LinearDecomposition:
    """Split each equation into an offset plus coefficients of the linear parameters.

    Raises :class:`RoleError` carrying the diagnostics if the declared roles
    are not separable.
    """
    if linear is None:
        diags = validate_roles(model)
        if diags:
            raise RoleError(diags)
        linear = model.linear
    lin = frozenset(linear)
    offsets, coefs = [], []
    for e in model.equations:
        off, co = _split(e, lin)
        offsets.append(off)
        coefs.append(tuple(co.get(p, ZERO) for p in linear))
    return LinearDecomposition(tuple(linear), tuple(offsets), tuple(coefs))
