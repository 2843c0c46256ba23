"""Integral-matching (stage-1) estimation.

For a smoothed path ``x_hat`` on ``[0, T]`` the criterion is

    int ||x_hat(t) - xi - int_0^t F(x_hat(s); theta) ds||^2 dt.

Writing ``F = f0 + g(x; theta_NL) theta_L``, the running integrals
``G_hat(t)`` of ``g`` make the criterion quadratic in ``(xi, theta_L)`` for
fixed ``theta_NL``, which gives closed-form linear estimates and the reduced
criterion ``M(theta_NL)``. Several observation sets can share ``theta``
while each keeps its own initial values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np

from .boxls import box_qp
from .errors import DomainError, IdentifiabilityError
from .expr import ClampCounter
from .model import OdeModel, decompose_linear
from .nlopt import OptimConfig, OptimResult, minimize
from .smoothing import SmoothedPath, build_quad, cum_trapz, grid_env, trapz_weights

COND_LIMIT = 1e12
# the criterion carries no solver noise, so the optimal forward-difference step applies
IM_OPTIM = OptimConfig(fd_step=float(np.sqrt(np.finfo(float).eps)))
SEPARABLE = "separable"
NON_SEPARABLE = "non-separable"


@dataclass(frozen=True)
class ImProblem:
    """Everything stage 1 needs, for one or several observation sets.

    Parameters
    ----------
    model : OdeModel
        Roles decide which parameters are linear, non-linear or fixed;
        likelihood-only parameters are ignored here.
    paths : sequence of SmoothedPath
        One smoothed trajectory per observation set.
    x0_fixed : sequence of dict
        Per set, known initial values.
    x0_linear : tuple of str
        Variables whose initial value is estimated as a linear unknown.
    x0_nonlinear : tuple of str
        Variables whose initial value is optimised with ``theta_NL``.
    start : dict
        Starts for non-linear parameters (and optionally linear ones, used by
        the non-separable method).
    x0_start : sequence of dict
        Per set, starts for ``x0_nonlinear``.
    lower, upper : dict
        Bounds keyed by parameter or variable name; missing means infinite.
    inputs : sequence of sequences of ExternalInput
        Per set external inputs.
    path_hook : callable, optional
        ``path_hook(bindings, x0_per_set) -> paths``; called for every trial
        of the non-linear unknowns so paths can depend on them.
    rows : tuple of int, optional
        Restrict the criterion to these equations.
    """

    model: OdeModel
    paths: tuple
    x0_fixed: tuple = ()
    x0_linear: tuple = ()
    x0_nonlinear: tuple = ()
    start: Mapping[str, float] = field(default_factory=dict)
    x0_start: tuple = ()
    lower: Mapping[str, float] = field(default_factory=dict)
    upper: Mapping[str, float] = field(default_factory=dict)
    inputs: tuple = ()
    path_hook: Callable | None = None
    rows: tuple | None = None

    def __post_init__(self):
        S = len(self.paths)
        if S < 1:
            raise ValueError("at least one smoothed path is required")
        if not self.x0_fixed:
            object.__setattr__(self, "x0_fixed", tuple({} for _ in range(S)))
        if not self.x0_start:
            object.__setattr__(self, "x0_start", tuple({} for _ in range(S)))
        if not self.inputs:
            object.__setattr__(self, "inputs", tuple(() for _ in range(S)))
        for name in ("x0_fixed", "x0_start", "inputs"):
            if len(getattr(self, name)) != S:
                raise ValueError(f"{name} needs one entry per observation set")
        for v in self.model.variables:
            n_ways = (v in self.x0_linear) + (v in self.x0_nonlinear)
            if n_ways > 1:
                raise ValueError(f"initial value of {v} given two estimation routes")
            if n_ways == 0 and any(v not in f for f in self.x0_fixed):
                raise ValueError(f"initial value of {v} is neither known nor estimated")
        for name, lo, hi, x in self._started():
            if not lo <= x <= hi:
                raise ValueError(f"start for {name} ({x}) outside bounds [{lo}, {hi}]")

    def _started(self):
        for p in self.nonlinear:
            if p not in self.start:
                raise ValueError(f"non-linear parameter {p} needs a start value")
            yield p, self.lo(p), self.hi(p), float(self.start[p])
        for s, st in enumerate(self.x0_start):
            for v in self.x0_nl_rows:
                if v not in st:
                    raise ValueError(f"initial value of {v} (set {s + 1}) needs a start value")
                yield v, self.lo(v), self.hi(v), float(st[v])

    def lo(self, name):
        return float(self.lower.get(name, -np.inf))

    def hi(self, name):
        return float(self.upper.get(name, np.inf))

    # ------------------------------------------------------------ layout

    @cached_property
    def row_index(self) -> tuple:
        return tuple(range(self.model.dim)) if self.rows is None else tuple(self.rows)

    @cached_property
    def row_vars(self) -> tuple:
        return tuple(self.model.variables[j] for j in self.row_index)

    @cached_property
    def _used(self) -> frozenset:
        return frozenset().union(*(self.model.equations[j].symbols() for j in self.row_index))

    @cached_property
    def linear(self) -> tuple:
        return tuple(p for p in self.model.linear if p in self._used or self.rows is None)

    @cached_property
    def nonlinear(self) -> tuple:
        return tuple(p for p in self.model.nonlinear if p in self._used or self.rows is None)

    @cached_property
    def x0_lin_rows(self) -> tuple:
        return tuple(v for v in self.row_vars if v in self.x0_linear)

    @cached_property
    def x0_nl_rows(self) -> tuple:
        return tuple(v for v in self.row_vars if v in self.x0_nonlinear)

    @property
    def n_sets(self) -> int:
        return len(self.paths)

    @cached_property
    def decomposition(self):
        d = decompose_linear(self.model)
        cols = [d.linear.index(p) for p in self.linear]
        return d, np.array(cols, dtype=int)

    @property
    def p_linear(self) -> int:
        return len(self.linear)

    def nl_names(self) -> list:
        names = list(self.nonlinear)
        for s in range(self.n_sets):
            names += [self._x0_label(v, s) for v in self.x0_nl_rows]
        return names

    def lin_names(self) -> list:
        names = list(self.linear)
        for s in range(self.n_sets):
            names += [self._x0_label(v, s) for v in self.x0_lin_rows]
        return names

    def _x0_label(self, v, s):
        return v if self.n_sets == 1 else f"{v}[{s + 1}]"

    def nl_start(self) -> np.ndarray:
        vals = [float(self.start[p]) for p in self.nonlinear]
        for s in range(self.n_sets):
            vals += [float(self.x0_start[s][v]) for v in self.x0_nl_rows]
        return np.array(vals)

    def nl_bounds(self):
        names = list(self.nonlinear) + list(self.x0_nl_rows) * self.n_sets
        return np.array([self.lo(n) for n in names]), np.array([self.hi(n) for n in names])

    def lin_bounds(self):
        names = list(self.linear) + list(self.x0_lin_rows) * self.n_sets
        return np.array([self.lo(n) for n in names]), np.array([self.hi(n) for n in names])

    def unpack_nl(self, v):
        """Split a non-linear vector into parameter bindings and per-set x0 values."""
        v = np.asarray(v, dtype=float)
        k = len(self.nonlinear)
        bind = dict(self.model.fixed)
        bind.update(zip(self.nonlinear, v[:k]))
        m = len(self.x0_nl_rows)
        x0s = []
        for s in range(self.n_sets):
            x = dict(self.x0_start[s])
            x.update(self.x0_fixed[s])
            x.update(zip(self.x0_nl_rows, v[k + s * m:k + (s + 1) * m]))
            x0s.append(x)
        return bind, x0s

    def unpack_lin(self, z):
        z = np.asarray(z, dtype=float)
        p = self.p_linear
        theta = dict(zip(self.linear, z[:p]))
        e = len(self.x0_lin_rows)
        xis = [dict(zip(self.x0_lin_rows, z[p + s * e:p + (s + 1) * e])) for s in range(self.n_sets)]
        return theta, xis

    # ------------------------------------------------------------ design

    def design(self, nl) -> "Design":
        """Normal-equation pieces of the criterion at the non-linear vector ``nl``."""
        bind, x0s = self.unpack_nl(nl)
        paths = self.paths if self.path_hook is None else tuple(self.path_hook(bind, x0s))
        decomp, cols = self.decomposition
        rows = self.row_index
        sets = []
        clamped = 0
        for s, path in enumerate(paths):
            q = build_quad(path, decomp, bind, self.inputs[s], rows)
            clamped += q.clamped
            xh = path.values[:, list(rows)]
            known = np.array([0.0 if v in self.x0_lin_rows else float(x0s[s][v]) for v in self.row_vars])
            xt = xh - known - q.F0
            est = np.array([self.row_vars.index(v) for v in self.x0_lin_rows], dtype=int)
            sets.append(_SetTerms(q.weights, q.G_hat[:, :, cols], xt, est, q.span,
                                  q.A_hat[:, cols], q.B_hat[np.ix_(cols, cols)]))
        return Design(sets, self.p_linear, self.lin_names(), clamped)


@dataclass(frozen=True)
class _SetTerms:
    w: np.ndarray
    G: np.ndarray
    xt: np.ndarray
    est: np.ndarray
    T: float
    A: np.ndarray
    B: np.ndarray


@dataclass(frozen=True)
class Design:
    """Quadratic criterion ``sum_s int w ||xt - E xi_s - G theta||^2`` in ``z = (theta, xi_1..xi_S)``."""

    sets: list
    p: int
    names: list
    clamped: int = 0

    @property
    def size(self) -> int:
        return self.p + sum(st.est.size for st in self.sets)

    def normal(self):
        n, p = self.size, self.p
        H = np.zeros((n, n))
        c = np.zeros(n)
        off = p
        for st in self.sets:
            H[:p, :p] += st.B
            c[:p] += np.einsum("t,tjk,tj->k", st.w, st.G, st.xt)
            e = st.est.size
            if e:
                sl = slice(off, off + e)
                H[sl, sl] = st.T * np.eye(e)
                H[sl, :p] = st.A[st.est]
                H[:p, sl] = st.A[st.est].T
                c[sl] = st.w @ st.xt[:, st.est]
            off += e
        return 0.5 * (H + H.T), c

    def loss(self, z) -> float:
        z = np.asarray(z, dtype=float)
        theta = z[:self.p]
        off = self.p
        total = 0.0
        for st in self.sets:
            r = st.xt - st.G @ theta
            e = st.est.size
            if e:
                r[:, st.est] -= z[off:off + e]
            off += e
            total += float(st.w @ np.sum(r * r, axis=1))
        return total

    def check(self, H):
        """Raise :class:`IdentifiabilityError` if ``H`` is singular or ill-conditioned."""
        d = np.diag(H)
        scale = float(np.max(d)) if d.size else 0.0
        dead = [self.names[i] for i in np.flatnonzero(d <= 1e-14 * max(scale, 1e-300))]
        if dead:
            raise IdentifiabilityError("unknowns do not enter the integral-matching design", dead)
        Dinv = 1.0 / np.sqrt(d)
        Hs = H * np.outer(Dinv, Dinv)
        vals, vecs = np.linalg.eigh(Hs)
        if vals[0] <= vals[-1] / COND_LIMIT:
            v = np.abs(vecs[:, 0])
            names = [self.names[i] for i in np.flatnonzero(v >= 0.1 * v.max())]
            cond = np.inf if vals[0] <= 0 else vals[-1] / vals[0]
            raise IdentifiabilityError(f"normal matrix condition number {cond:.3g} exceeds {COND_LIMIT:.0e}", names)
        return Dinv

    def closed_form(self):
        """Unconstrained minimiser via the direct estimators (one set) or the normal equations."""
        H, c = self.normal()
        self.check(H)
        if len(self.sets) == 1:
            return _direct_single(self.sets[0], self.p)
        return np.linalg.solve(H, c)

    def solve(self, lower, upper):
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if np.all(np.isinf(lower)) and np.all(np.isinf(upper)):
            return self.closed_form()
        H, c = self.normal()
        Dinv = self.check(H)
        Hs = H * np.outer(Dinv, Dinv)
        return Dinv * box_qp(Hs, Dinv * c, lower / Dinv, upper / Dinv)


def _direct_single(st: _SetTerms, p: int) -> np.ndarray:
    """``xi = (T I - A B^-1 A')^-1 int (I - A B^-1 G') xt``, ``theta = B^-1 int G'(xt - xi)``."""
    E = st.est
    gx = np.einsum("t,tjk,tj->k", st.w, st.G, st.xt)
    if p == 0:
        return st.w @ st.xt[:, E] / st.T
    Binv = np.linalg.inv(st.B)
    if E.size:
        AE = st.A[E]
        lhs = st.T * np.eye(E.size) - AE @ Binv @ AE.T
        rhs = st.w @ st.xt[:, E] - AE @ Binv @ gx
        xi = np.linalg.solve(lhs, rhs)
        resid = st.xt.copy()
        resid[:, E] -= xi
        theta = Binv @ np.einsum("t,tjk,tj->k", st.w, st.G, resid)
        return np.concatenate([theta, xi])
    return Binv @ gx


# ---------------------------------------------------------------- public operations


@dataclass
class ImEstimate:
    """Stage-1 estimates.

    ``x0`` holds, per set, the full vector of initial values (known and
    estimated). ``matrix`` is the per-equation table of the decoupled fit,
    with ``nan`` where a parameter does not appear.
    """

    theta: dict
    x0: list
    loss: float
    method: str
    converged: bool = True
    optim: OptimResult | None = None
    matrix: dict | None = None
    clamped: int = 0


def direct_linear_estimate(problem: ImProblem, nl=None):
    """``(theta_L, xi per set)`` minimising the criterion at the non-linear vector ``nl``.

    Finite bounds switch to the box-constrained solver, which returns the
    closed form when no bound is active.
    """
    nl = problem.nl_start() if nl is None else np.asarray(nl, dtype=float)
    design = problem.design(nl)
    z = design.solve(*problem.lin_bounds())
    return problem.unpack_lin(z)


def reduced_criterion(problem: ImProblem, nl):
    """``M(theta_NL)`` with ``(xi, theta_L)`` profiled out; returns ``(M, theta_L, xis)``."""
    design = problem.design(nl)
    z = design.solve(*problem.lin_bounds())
    theta, xis = problem.unpack_lin(z)
    return design.loss(z), theta, xis


def im_loss(problem: ImProblem, theta: Mapping[str, float], x0: Sequence[Mapping[str, float]]) -> float:
    """The criterion evaluated directly from the vector field (no decomposition).

    ``theta`` binds every non-fixed parameter in the problem's rows and ``x0``
    every initial value, per set. Domain errors give ``inf``.
    """
    bind = dict(problem.model.fixed)
    bind.update(theta)
    total = 0.0
    x0s = [dict(x) for x in x0]
    paths = problem.paths if problem.path_hook is None else tuple(problem.path_hook(bind, x0s))
    rows = list(problem.row_index)
    for s, path in enumerate(paths):
        env = grid_env(path, bind, problem.inputs[s])
        try:
            F = problem.model.evaluate_rhs_grid(env, ClampCounter())[rows].T
        except DomainError:
            return np.inf
        zeta = np.array([float(x0s[s][v]) for v in problem.row_vars])
        r = path.values[:, rows] - zeta - cum_trapz(path.grid, F)
        total += float(trapz_weights(path.grid) @ np.sum(r * r, axis=1))
    return total


def _safe(fn):
    def wrapped(v):
        try:
            return fn(v)
        except (IdentifiabilityError, DomainError, np.linalg.LinAlgError):
            return np.inf
    return wrapped


def _estimate(problem, nl, z, loss, method, res=None, clamped=0) -> ImEstimate:
    bind, x0s = problem.unpack_nl(nl)
    theta, xis = problem.unpack_lin(z)
    out = {p: bind[p] for p in problem.nonlinear}
    out.update(theta)
    x0 = []
    for s in range(problem.n_sets):
        x = {v: x0s[s][v] for v in problem.model.variables if v in x0s[s]}
        x.update(xis[s])
        x0.append(x)
    conv = True if res is None else res.converged
    return ImEstimate(out, x0, float(loss), method, conv, res, None, clamped)


def fit_im(problem: ImProblem, method: str = SEPARABLE, config: OptimConfig = IM_OPTIM) -> ImEstimate:
    """Minimise the integral-matching criterion.

    ``separable`` optimises ``M`` over the non-linear unknowns only and then
    recovers the linear ones; ``non-separable`` optimises everything jointly,
    starting the linear unknowns from the direct solution at the non-linear
    start unless ``problem.start`` gives them. Without linear unknowns the
    non-separable route is used.
    """
    if method not in (SEPARABLE, NON_SEPARABLE):
        raise ValueError(f"unknown integral-matching method {method!r}")
    n_lin = len(problem.lin_names())
    if n_lin == 0:
        method = NON_SEPARABLE
    nl0 = problem.nl_start()
    nlo, nhi = problem.nl_bounds()
    llo, lhi = problem.lin_bounds()

    if method == SEPARABLE:
        design = problem.design(nl0)
        z0 = design.solve(llo, lhi)
        if nl0.size == 0:
            return _estimate(problem, nl0, z0, design.loss(z0), method, clamped=design.clamped)
        res = minimize(_safe(lambda v: reduced_criterion(problem, v)[0]), nl0, nlo, nhi, config)
        design = problem.design(res.x)
        z = design.solve(llo, lhi)
        return _estimate(problem, res.x, z, design.loss(z), method, res, design.clamped)

    k = nl0.size
    if n_lin:
        z0 = problem.design(nl0).solve(llo, lhi)
        given = [problem.start.get(p) for p in problem.linear]
        for i, g in enumerate(given):
            if g is not None:
                z0[i] = float(g)
        z0 = np.clip(z0, llo, lhi)
    else:
        z0 = np.zeros(0)
    cache = {}

    def design_at(nl):
        key = nl.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = problem.design(nl)
        return cache[key]

    def objective(v):
        return design_at(v[:k]).loss(v[k:])

    x0 = np.concatenate([nl0, z0])
    res = minimize(_safe(objective), x0, np.concatenate([nlo, llo]), np.concatenate([nhi, lhi]), config)
    d = design_at(res.x[:k])
    return _estimate(problem, res.x[:k], res.x[k:], res.fun, method, res, d.clamped)


def fit_im_decoupled(problem: ImProblem, method: str = SEPARABLE,
                     config: OptimConfig = IM_OPTIM) -> ImEstimate:
    """Fit each equation on its own and average parameters shared between equations.

    Each equation uses the smoothed paths of all variables but only its own
    initial value. The per-equation table is returned in ``matrix`` keyed by
    variable, with ``nan`` for parameters absent from that equation.
    """
    model = problem.model
    free = [p for p in model.parameters if p in problem.linear or p in problem.nonlinear]
    matrix, per_x0 = {}, [dict(f) for f in problem.x0_fixed]
    fits = []
    for j in problem.row_index:
        sub = replace(problem, rows=(j,))
        if not sub.nl_names() and not sub.lin_names():
            continue
        est = fit_im(sub, method, config)
        fits.append(est)
        var = model.variables[j]
        matrix[var] = {p: est.theta.get(p, np.nan) for p in free}
        for s in range(problem.n_sets):
            if var in est.x0[s]:
                per_x0[s][var] = est.x0[s][var]
    theta = {}
    for p in free:
        vals = [row[p] for row in matrix.values() if not np.isnan(row[p])]
        if not vals:
            raise IdentifiabilityError("parameter appears in no fitted equation", [p])
        theta[p] = float(np.mean(vals))
    loss = im_loss(problem, theta, per_x0)
    conv = all(f.converged for f in fits)
    clamped = sum(f.clamped for f in fits)
    return ImEstimate(theta, per_x0, loss, method, conv, None, matrix, clamped)
