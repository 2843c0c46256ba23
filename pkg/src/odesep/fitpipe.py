"""The two-stage estimation pipeline.

Stage 1 smooths the observations and minimises the integral-matching
criterion (:mod:`odesep.imcore`). Stage 2 starts from those estimates and
minimises the trajectory least-squares loss, or a user negative
log-likelihood, by numerically solving the ODE for every trial.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ModelError, OdesepError, RoleError, SolverError
from .imcore import IM_OPTIM, SEPARABLE, ImEstimate, ImProblem, fit_im, fit_im_decoupled
from .model import LIKELIHOOD, LINEAR, NONLINEAR, OdeModel, validate_roles
from .nlopt import OptimConfig, OptimResult, minimize
from .odesolve import ExternalInput, Integrator
from .smoothing import smooth_all

ESTIMATE = "estimate"
SEPARATE = "separate"
SEPARATE_X0 = "separate_x0"
# tighter than the simulation default so finite-difference gradients see little solver noise
STAGE2_RTOL = 1e-10
STAGE2_ATOL = 1e-12
TYPE_LABELS = {LINEAR: "linear", NONLINEAR: "non-linear", LIKELIHOOD: "likelihood"}


@dataclass(frozen=True)
class ObservationSet:
    """Noisy samples ``series[var] = (times, values)`` plus optional external inputs."""

    series: Mapping[str, tuple]
    inputs: tuple = ()
    index: int = 0

    def __post_init__(self):
        clean = {}
        for var, (t, y) in self.series.items():
            t = np.asarray(t, dtype=float)
            y = np.asarray(y, dtype=float)
            if t.shape != y.shape or t.ndim != 1 or t.size == 0:
                raise ValueError(f"series {var}: times and values must be non-empty vectors of equal length")
            if np.any(np.diff(t) < 0):
                raise ValueError(f"series {var}: times must be sorted")
            if not np.all(np.isfinite(y)):
                raise ValueError(f"series {var}: non-finite observation")
            clean[var] = (t, y)
        if not clean:
            raise ValueError("an observation set needs at least one series")
        object.__setattr__(self, "series", clean)
        object.__setattr__(self, "inputs", tuple(self.inputs))

    @classmethod
    def shared(cls, times, values: Mapping[str, Sequence[float]], inputs=(), index=0):
        """Build from one time vector shared by every series."""
        return cls({v: (times, y) for v, y in values.items()}, inputs, index)

    @property
    def variables(self) -> tuple:
        return tuple(self.series)

    def union_times(self) -> np.ndarray:
        return np.unique(np.concatenate([t for t, _ in self.series.values()]))

    @property
    def size(self) -> int:
        return sum(t.size for t, _ in self.series.values())


# A reconstruction hook receives (model, parameter bindings, x0 bindings,
# observed series) and returns series for every state variable.
ReconstructionHook = Callable[[OdeModel, dict, dict, dict], dict]
# A likelihood hook receives (parameter bindings, times, observed series,
# model trajectory as {var: values at times}) and returns a negative log-likelihood.
LikelihoodHook = Callable[[dict, np.ndarray, dict, dict], float]


@dataclass(frozen=True)
class FitConfig:
    """Options for :func:`fit`.

    ``x0`` maps each variable to a known value or ``"estimate"`` (linear
    route in stage 1); variables missing from ``x0`` are estimated. A list
    gives per-set values. Variables in ``x0_nonlinear`` are optimised with
    the non-linear parameters in stage 1 and need a start in ``start``.
    """

    x0: Mapping[str, float | str] | Sequence[Mapping[str, float | str]] = field(default_factory=dict)
    x0_nonlinear: tuple = ()
    start: Mapping[str, float] = field(default_factory=dict)
    lower: Mapping[str, float] = field(default_factory=dict)
    upper: Mapping[str, float] = field(default_factory=dict)
    im_method: str = SEPARABLE
    decouple: bool = False
    smoothing: str = "gcv-spline"
    im_optim: OptimConfig = IM_OPTIM
    nls_optim: OptimConfig = OptimConfig()
    run_nls: bool = True
    gen_obs: ReconstructionHook | None = None
    calc_nll: LikelihoodHook | None = None
    inputs: tuple = ()
    rtol: float = STAGE2_RTOL
    atol: float = STAGE2_ATOL

    def x0_for(self, s: int) -> dict:
        x0 = self.x0[s] if isinstance(self.x0, (list, tuple)) else self.x0
        return dict(x0)


# ---------------------------------------------------------------- stage-2 objective


def _trajectory(integ: Integrator, p_vec, x0_vec, times):
    Y = integ.try_solve(p_vec, x0_vec, times)
    if Y is None or not np.all(np.isfinite(Y)):
        return None
    return Y


def nls_loss(model: OdeModel, theta: Mapping[str, float], x0: Mapping[str, float],
             obs: ObservationSet, inputs: Sequence[ExternalInput] = (), integrator: Integrator | None = None) -> float:
    """Sum of squared residuals over the observed variables; ``inf`` if the solve fails.

    The initial values apply at the earliest observation time.
    """
    integ = integrator or Integrator(model, _merge_inputs(inputs, obs.inputs))
    p = integ.param_vector(theta)
    x = np.array([float(x0[v]) for v in model.variables])
    times = obs.union_times()
    Y = _trajectory(integ, p, x, times)
    if Y is None:
        return np.inf
    total = 0.0
    for var, (t, y) in obs.series.items():
        j = model.variables.index(var)
        r = y - Y[np.searchsorted(times, t), j]
        total += float(r @ r)
    return total


def _merge_inputs(base, extra):
    given = {u.name: u for u in base}
    given.update({u.name: u for u in extra})
    return tuple(given.values())


class Stage2Objective:
    """Stage-2 loss over a flat vector of parameters and per-set initial values."""

    def __init__(self, model, sets, x0_known, x0_est, config):
        self.model = model
        self.sets = list(sets)
        self.config = config
        self.params = tuple(p for p in model.parameters if p in model.free)
        self.x0_est = tuple(x0_est)
        self.x0_known = [dict(k) for k in x0_known]
        self.names = list(self.params)
        for s in range(len(self.sets)):
            self.names += [_x0_label(v, s, len(self.sets)) for v in self.x0_est]
        self.integrators = [Integrator(model, _merge_inputs(config.inputs, o.inputs), config.rtol, config.atol)
                            for o in self.sets]
        self._times = [o.union_times() for o in self.sets]
        self._cols = [[(v, model.variables.index(v), np.searchsorted(tu, t), y) for v, (t, y) in o.series.items()]
                      for o, tu in zip(self.sets, self._times)]
        self.n_obs = sum(o.size for o in self.sets)
        names = list(self.params) + list(self.x0_est) * len(self.sets)
        self.lower = np.array([float(config.lower.get(n, -np.inf)) for n in names])
        self.upper = np.array([float(config.upper.get(n, np.inf)) for n in names])
        self.likelihood = config.calc_nll is not None

    def unpack(self, vec):
        vec = np.asarray(vec, dtype=float)
        k = len(self.params)
        theta = dict(zip(self.params, vec[:k]))
        m = len(self.x0_est)
        x0s = []
        for s in range(len(self.sets)):
            x = dict(self.x0_known[s])
            x.update(zip(self.x0_est, vec[k + s * m:k + (s + 1) * m]))
            x0s.append(x)
        return theta, x0s

    def pack(self, theta, x0s):
        vals = [float(theta[p]) for p in self.params]
        for x in x0s:
            vals += [float(x[v]) for v in self.x0_est]
        return np.array(vals)

    def per_set(self, vec):
        theta, x0s = self.unpack(vec)
        out = []
        for s, integ in enumerate(self.integrators):
            p = integ.param_vector(theta)
            x = np.array([float(x0s[s][v]) for v in self.model.variables])
            Y = _trajectory(integ, p, x, self._times[s])
            if Y is None:
                out.append(np.inf)
                continue
            if self.likelihood:
                traj = {v: Y[idx, j] for v, j, idx, _ in self._cols[s]}
                obs = {v: y for v, _, _, y in self._cols[s]}
                bind = dict(self.model.fixed)
                bind.update(theta)
                val = float(self.config.calc_nll(bind, self._times[s], obs, traj))
            else:
                val = 0.0
                # huge trajectories overflow to inf, which the caller rejects
                with np.errstate(over="ignore", invalid="ignore"):
                    for _, j, idx, y in self._cols[s]:
                        r = y - Y[idx, j]
                        val += float(r @ r)
            out.append(val if np.isfinite(val) else np.inf)
        return out

    def __call__(self, vec) -> float:
        return float(sum(self.per_set(vec)))

    def trajectories(self, vec, times=None):
        theta, x0s = self.unpack(vec)
        res = []
        for s, integ in enumerate(self.integrators):
            t = self._times[s] if times is None else np.asarray(times, float)
            x = np.array([float(x0s[s][v]) for v in self.model.variables])
            res.append(integ.solve(integ.param_vector(theta), x, t))
        return res


def _x0_label(v, s, n):
    return v if n == 1 else f"{v}[{s + 1}]"


# ---------------------------------------------------------------- results


@dataclass
class FitResult:
    """Estimates from both stages.

    ``params`` lists the non-fixed parameters; ``types`` gives their role
    label. ``im_theta`` holds ``nan`` for likelihood-only parameters.
    ``x0_estimated`` names the initial values that were estimated; the
    ``*_x0`` lists hold every initial value per set.
    """

    model: OdeModel
    params: tuple
    types: dict
    start: dict
    lower: dict
    upper: dict
    x0_estimated: tuple
    im: ImEstimate
    im_theta: dict
    im_x0: list
    im_loss: float
    loss_at_im: float
    nls_theta: dict | None = None
    nls_x0: list | None = None
    nls_loss: float | None = None
    nls_optim: OptimResult | None = None
    objective: Stage2Objective | None = None
    matrix: dict | None = None
    set_index: int | None = None

    @property
    def n_sets(self) -> int:
        return len(self.im_x0)

    @property
    def final_theta(self) -> dict:
        return self.nls_theta if self.nls_theta is not None else self.im_theta

    @property
    def final_x0(self) -> list:
        return self.nls_x0 if self.nls_x0 is not None else self.im_x0

    @property
    def final_loss(self) -> float:
        return self.nls_loss if self.nls_loss is not None else self.loss_at_im

    def final_vector(self) -> np.ndarray:
        return self.objective.pack(self.final_theta, self.final_x0)

    def estimate_names(self) -> list:
        return list(self.params) + list(self.x0_estimated)

    def estimates(self, stage: str = "nls", s: int = 0) -> dict:
        """Parameter and estimated initial values of one set from ``stage`` ('im' or 'nls')."""
        theta, x0 = (self.im_theta, self.im_x0) if stage == "im" else (self.nls_theta, self.nls_x0)
        if theta is None:
            raise ValueError("stage 2 was not run")
        out = {p: theta[p] for p in self.params}
        out.update({v: x0[s][v] for v in self.x0_estimated})
        return out

    def for_set(self, s: int) -> "FitResult":
        """View holding only set ``s``'s initial values (shared parameters unchanged)."""
        return replace(self, im_x0=[self.im_x0[s]],
                       nls_x0=None if self.nls_x0 is None else [self.nls_x0[s]], set_index=s)


@dataclass(frozen=True)
class FitFailure:
    """Placeholder for a set whose fit raised."""

    set_index: int
    error: Exception

    def __str__(self):
        return f"set {self.set_index + 1}: {type(self.error).__name__}: {self.error}"


# ---------------------------------------------------------------- pipeline


def _x0_routes(model, config, n_sets):
    known, lin = [], set()
    nl = tuple(config.x0_nonlinear)
    for s in range(n_sets):
        spec = config.x0_for(s)
        k = {}
        for v in model.variables:
            val = spec.get(v, ESTIMATE)
            if v in nl:
                continue
            if isinstance(val, str):
                if val != ESTIMATE:
                    raise ModelError(f"x0 for {v}: expected a number or {ESTIMATE!r}, got {val!r}")
                lin.add(v)
            else:
                k[v] = float(val)
        known.append(k)
    lin_t = tuple(v for v in model.variables if v in lin)
    for s, k in enumerate(known):
        clash = [v for v in lin_t if v in k]
        if clash:
            raise ModelError(f"initial values {clash} are known in some sets and estimated in others")
    return known, lin_t, nl


def _check_starts(model, config):
    missing = [p for p in model.nonlinear + model.likelihood if p not in config.start]
    missing += [v for v in config.x0_nonlinear if v not in config.start]
    if missing:
        raise ModelError(f"start values required for {missing}")
    for name, x in config.start.items():
        lo, hi = config.lower.get(name, -np.inf), config.upper.get(name, np.inf)
        if not lo <= x <= hi:
            raise ModelError(f"start for {name} ({x}) outside bounds [{lo}, {hi}]")


def _stage1_paths(model, sets, config, known, nl_x0):
    """Smoothed paths per set, and a path hook when observations are reconstructed."""
    paths, recon = [], []
    for s, o in enumerate(sets):
        series = dict(o.series)
        missing = [v for v in model.variables if v not in series]
        rec = ()
        if config.gen_obs is not None:
            bind = dict(model.fixed)
            bind.update({p: config.start[p] for p in model.nonlinear if p in config.start})
            x0 = dict(known[s])
            x0.update({v: config.start[v] for v in nl_x0})
            full = config.gen_obs(model, bind, x0, series)
            rec = tuple(v for v in model.variables if v not in o.series)
            series = {v: full[v] for v in model.variables}
        elif missing:
            raise ModelError(f"no observations for {missing}; a reconstruction hook is needed")
        recon.append(rec)
        paths.append(smooth_all(series, model.variables, config.smoothing))
    if config.gen_obs is None:
        return tuple(paths), None
    base = tuple(paths)

    def hook(bind, x0s):
        out = []
        for s, o in enumerate(sets):
            if not recon[s]:
                out.append(base[s])
                continue
            full = config.gen_obs(model, dict(bind), dict(x0s[s]), dict(o.series))
            out.append(base[s].resmooth({v: full[v][1] for v in recon[s]}))
        return out

    return base, hook


def _fit_joint(model: OdeModel, sets: Sequence[ObservationSet], config: FitConfig) -> FitResult:
    diags = validate_roles(model)
    if diags:
        raise RoleError(diags)
    _check_starts(model, config)
    n_sets = len(sets)
    for o in sets:
        stray = [v for v in o.series if v not in model.variables]
        if stray:
            raise ModelError(f"observations for unknown variables {stray}")
    known, lin_x0, nl_x0 = _x0_routes(model, config, n_sets)
    paths, hook = _stage1_paths(model, sets, config, known, nl_x0)
    inputs = tuple(_merge_inputs(config.inputs, o.inputs) for o in sets)
    problem = ImProblem(
        model, paths, tuple(known), lin_x0, nl_x0,
        start={p: config.start[p] for p in model.nonlinear},
        x0_start=tuple({v: config.start[v] for v in nl_x0} for _ in range(n_sets)),
        lower=config.lower, upper=config.upper, inputs=inputs, path_hook=hook,
    )
    if config.decouple:
        im = fit_im_decoupled(problem, config.im_method, config.im_optim)
    else:
        im = fit_im(problem, config.im_method, config.im_optim)

    params = model.free
    im_theta = {p: float(im.theta.get(p, np.nan)) for p in params}
    x0_est = tuple(v for v in model.variables if v in lin_x0 or v in nl_x0)
    im_x0 = [{v: float(x[v]) for v in model.variables} for x in im.x0]
    objective = Stage2Objective(model, sets, known, x0_est, config)
    start_theta = dict(im_theta)
    for p in model.likelihood:
        start_theta[p] = float(config.start[p])
    v0 = np.clip(objective.pack(start_theta, im_x0), objective.lower, objective.upper)
    loss_at_im = objective(v0)
    result = FitResult(
        model=model, params=params,
        types={p: TYPE_LABELS[model.roles[p]] for p in params},
        start={n: config.start.get(n) for n in list(params) + list(x0_est)},
        lower={n: float(config.lower.get(n, -np.inf)) for n in list(params) + list(x0_est)},
        upper={n: float(config.upper.get(n, np.inf)) for n in list(params) + list(x0_est)},
        x0_estimated=x0_est, im=im, im_theta=im_theta, im_x0=im_x0, im_loss=im.loss,
        loss_at_im=loss_at_im, objective=objective, matrix=im.matrix,
    )
    if not config.run_nls:
        return result
    if not np.isfinite(loss_at_im):
        raise SolverError("stage-2 objective is not finite at the integral-matching estimates", None)
    res = minimize(objective, v0, objective.lower, objective.upper, config.nls_optim)
    theta, x0s = objective.unpack(res.x)
    result.nls_theta = {p: float(theta[p]) for p in params}
    result.nls_x0 = [{v: float(x[v]) for v in model.variables} for x in x0s]
    result.nls_loss = float(res.fun)
    result.nls_optim = res
    return result


def fit(model: OdeModel, obs: ObservationSet, config: FitConfig = FitConfig()) -> FitResult:
    """Two-stage fit of one observation set.

    Raises
    ------
    RoleError
        If the declared linear parameters are not separable; raised before
        any numerical work, carrying the diagnostics.
    """
    return _fit_joint(model, [obs], config)


def _workers(parallel, n):
    if not parallel:
        return 1
    cap = os.environ.get("ODESEP_THREADS")
    limit = int(cap) if cap and cap.strip().isdigit() and int(cap) > 0 else (os.cpu_count() or 1)
    return max(1, min(limit, n))


def fit_sets(model: OdeModel, sets: Sequence[ObservationSet], mode: str = SEPARATE,
             config: FitConfig = FitConfig(), parallel: bool = False) -> list:
    """Fit several observation sets.

    ``separate`` fits each set on its own; a failing set yields a
    :class:`FitFailure` in its slot. With ``parallel`` the fits run on a
    thread pool capped by ``ODESEP_THREADS``; results keep input order.
    ``separate_x0`` shares every parameter across sets, gives each set its
    own initial values and minimises the summed losses in both stages; the
    returned list holds one per-set view of the joint fit.
    """
    sets = list(sets)
    if not sets:
        raise ValueError("no observation sets")
    names = {tuple(sorted(o.series)) for o in sets}
    if len(names) > 1:
        raise ValueError("observation sets observe different variables")
    if mode == SEPARATE_X0:
        joint = _fit_joint(model, sets, config)
        return [joint.for_set(s) for s in range(len(sets))]
    if mode != SEPARATE:
        raise ValueError(f"unknown multi-set mode {mode!r}")

    def one(s):
        try:
            cfg = replace(config, x0=config.x0_for(s))
            r = fit(model, sets[s], cfg)
            r.set_index = s
            return r
        except (OdesepError, ValueError, ArithmeticError) as exc:
            return FitFailure(s, exc)

    n = _workers(parallel, len(sets))
    if n == 1:
        return [one(s) for s in range(len(sets))]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(one, range(len(sets))))


# ---------------------------------------------------------------- Monte Carlo summary


@dataclass(frozen=True)
class McSummary:
    """Per-parameter summary columns across repeated fits."""

    names: tuple
    columns: dict

    def row(self, name) -> dict:
        i = self.names.index(name)
        return {k: v[i] for k, v in self.columns.items()}

    def as_rows(self) -> list:
        return [dict(par=n, **self.row(n)) for n in self.names]


def mc_summary(results: Sequence[FitResult], truth: Mapping[str, float] | None = None) -> McSummary:
    """Mean, sample sd and (with ``truth``) bias and rmse of both stages' estimates."""
    ok = [r for r in results if isinstance(r, FitResult)]
    if len(ok) < 2:
        raise ValueError("a summary needs at least two successful fits")
    names = tuple(ok[0].estimate_names())
    cols = {}
    if truth is not None:
        missing = [n for n in names if n not in truth]
        if missing:
            raise ValueError(f"no true value for {missing}")
        cols["true"] = np.array([float(truth[n]) for n in names])
    stages = ["im"] + (["nls"] if all(r.nls_theta is not None for r in ok) else [])
    for stage in stages:
        E = np.array([[r.estimates(stage)[n] for n in names] for r in ok])
        cols[f"{stage}_mean"] = E.mean(axis=0)
        cols[f"{stage}_sd"] = E.std(axis=0, ddof=1)
        if truth is not None:
            err = E - cols["true"]
            cols[f"{stage}_bias"] = err.mean(axis=0)
            cols[f"{stage}_rmse"] = np.sqrt(np.mean(err**2, axis=0))
    return McSummary(names, cols)
