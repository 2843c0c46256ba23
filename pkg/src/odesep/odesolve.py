"""Forward simulation of :class:`~odesep.model.OdeModel` systems."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import _vm
from .errors import ModelError, SolverError
from .expr import Expr, parse_expression, substitute
from .model import TIME, OdeModel

DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-10
MAX_STEPS = 200_000

_MODES = {"linear": 0, "previous": 1}


@dataclass(frozen=True)
class ExternalInput:
    """A named signal of time: tabulated samples or a closed-form expression in ``t``."""

    name: str
    times: np.ndarray | None = None
    values: np.ndarray | None = None
    mode: str = "linear"
    expr: Expr | None = None

    def __post_init__(self):
        if self.expr is None:
            if self.times is None or self.values is None:
                raise ModelError(f"input {self.name}: needs times and values or an expression")
            t = np.asarray(self.times, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if t.shape != v.shape or t.ndim != 1 or t.size < 1:
                raise ModelError(f"input {self.name}: times and values must be equal-length vectors")
            if np.any(np.diff(t) <= 0):
                raise ModelError(f"input {self.name}: times must be strictly increasing")
            if self.mode not in _MODES:
                raise ModelError(f"input {self.name}: unknown interpolation mode {self.mode!r}")
            object.__setattr__(self, "times", t)
            object.__setattr__(self, "values", v)
        elif not self.expr.symbols() <= {TIME, "pi"}:
            raise ModelError(f"input {self.name}: closed form may only depend on t")

    @classmethod
    def tabulated(cls, name, times, values, mode="linear"):
        return cls(name, np.asarray(times, float), np.asarray(values, float), mode)

    @classmethod
    def closed_form(cls, name, source):
        e = parse_expression(source) if isinstance(source, str) else source
        return cls(name, expr=e)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.expr is not None:
            return np.broadcast_to(self.expr.evaluate_array({TIME: t}), t.shape).astype(float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        idx = np.clip(idx, 0, self.times.size - 1)
        if self.mode == "previous":
            return self.values[idx]
        return np.interp(t, self.times, self.values)

    def covers(self, t0, t1) -> bool:
        return self.expr is not None or (self.times[0] <= t0 and self.times[-1] >= t1)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    values: np.ndarray
    variables: tuple

    def __getitem__(self, var):
        return self.values[:, self.variables.index(var)]

    def as_dict(self):
        return {v: self.values[:, j] for j, v in enumerate(self.variables)}


def _bind_inputs(model: OdeModel, inputs: Sequence[ExternalInput]):
    """Inline closed-form inputs; return the reduced model and tabulated inputs in order."""
    given = {u.name: u for u in inputs}
    missing = [u for u in model.inputs if u not in given]
    if missing:
        raise ModelError(f"no values supplied for external inputs {missing}")
    closed = {u: given[u].expr for u in model.inputs if given[u].expr is not None}
    if closed:
        eqs = tuple(substitute(e, closed) for e in model.equations)
        model = replace(model, equations=eqs, inputs=tuple(u for u in model.inputs if u not in closed))
    return model, [given[u] for u in model.inputs]


class Integrator:
    """A model prepared for many solves with the same external inputs.

    Parameter vectors follow ``model.parameters`` (fixed values included);
    state vectors follow ``model.variables``.
    """

    def __init__(self, model: OdeModel, inputs: Sequence[ExternalInput] = (), rtol=DEFAULT_RTOL,
                 atol=DEFAULT_ATOL, max_steps=MAX_STEPS):
        self.model = model
        self.bound_model, tab = _bind_inputs(model, inputs)
        self.inputs = tuple(tab)
        self.prog = self.bound_model.program
        self.rtol = float(rtol)
        self.atol = float(atol)
        self.max_steps = int(max_steps)
        k = len(tab)
        width = max([u.times.size for u in tab], default=1)
        self._ut = np.zeros((k, width))
        self._uv = np.zeros((k, width))
        self._ulen = np.zeros(k, dtype=np.int64)
        self._umode = np.zeros(k, dtype=np.int64)
        for i, u in enumerate(tab):
            n = u.times.size
            self._ut[i, :n] = u.times
            self._uv[i, :n] = u.values
            self._ulen[i] = n
            self._umode[i] = _MODES[u.mode]
        self._breaks = np.unique(np.concatenate([u.times for u in tab])) if tab else np.zeros(0)

    def param_vector(self, theta: Mapping[str, float]) -> np.ndarray:
        m = self.model
        vec = np.zeros(len(m.parameters))
        used = set().union(*(e.symbols() for e in m.equations))
        missing = []
        for i, p in enumerate(m.parameters):
            if p in theta:
                vec[i] = float(theta[p])
            elif p in m.fixed:
                vec[i] = m.fixed[p]
            elif p in used:
                missing.append(p)
        if missing:
            raise ModelError(f"unbound parameters: {', '.join(missing)}")
        return vec

    def raw(self, p_vec, x0_vec, times):
        """Run the integrator; returns ``(values, status, fail_time, fail_node)``."""
        times = np.ascontiguousarray(times, dtype=float)
        Y, status, t_fail, instr, _ = _vm.dopri5(
            self.prog.ops, self.prog.args, self.prog.consts, self.prog.stack_size,
            np.ascontiguousarray(p_vec, dtype=float), np.array(x0_vec, dtype=float), times,
            self._ut, self._uv, self._ulen, self._umode, self.rtol, self.atol, self.max_steps, self._breaks,
        )
        return Y, status, t_fail, self.prog.node_at(instr)

    def solve(self, p_vec, x0_vec, times) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        if times.ndim != 1 or times.size < 1 or np.any(np.diff(times) < 0):
            raise ValueError("times must be a sorted 1-d vector")
        for u in self.inputs:
            if not u.covers(times[0], times[-1]):
                raise ModelError(f"input {u.name} does not cover [{times[0]}, {times[-1]}]")
        uniq, inv = np.unique(times, return_inverse=True)
        Y, status, t_fail, node = self.raw(p_vec, x0_vec, uniq)
        if status == _vm.STATUS_DOMAIN:
            raise SolverError(f"domain error in '{node}'", t_fail)
        if status == _vm.STATUS_NONFINITE:
            raise SolverError("non-finite state or derivative", t_fail)
        if status == _vm.STATUS_UNDERFLOW:
            raise SolverError("step size underflow (stiff or singular system)", t_fail)
        if status == _vm.STATUS_MAXSTEPS:
            raise SolverError("maximum number of steps exceeded", t_fail)
        return Y[inv]

    def try_solve(self, p_vec, x0_vec, times):
        """Like :meth:`solve` but returns ``None`` on numerical failure."""
        Y, status, _, _ = self.raw(p_vec, x0_vec, times)
        return Y if status == _vm.STATUS_OK else None


def solve_ode(
    model: OdeModel,
    theta: Mapping[str, float],
    x0: Mapping[str, float],
    times,
    inputs: Sequence[ExternalInput] = (),
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
) -> Trajectory:
    """Solve the initial value problem with ``x(times[0]) = x0``.

    Uses Dormand-Prince 5(4) with PI step control; values between accepted
    steps come from cubic Hermite interpolation.

    Raises
    ------
    SolverError
        On step-size underflow, a non-finite state, or a domain error in the
        right-hand side; the message carries the failing time.
    """
    integ = Integrator(model, inputs, rtol=rtol, atol=atol)
    missing = [v for v in model.variables if v not in x0]
    if missing:
        raise ModelError(f"no initial value for {missing}")
    x = np.array([float(x0[v]) for v in model.variables])
    times = np.asarray(times, dtype=float)
    return Trajectory(times, integ.solve(integ.param_vector(theta), x, times), model.variables)


def rhs_eval(model: OdeModel, theta: Mapping[str, float], state, t: float,
             inputs: Sequence[ExternalInput] = ()) -> np.ndarray:
    """``F(x(t); theta)`` component by component, with ``t`` and inputs bound."""
    env = dict(model.fixed)
    env.update(theta)
    env.update(zip(model.variables, (float(s) for s in state)))
    env[TIME] = float(t)
    given = {u.name: u for u in inputs}
    for name in model.inputs:
        if name not in given:
            raise ModelError(f"no values supplied for external input {name}")
        env[name] = float(given[name](t))
    return np.array([e.evaluate(env) for e in model.equations])
