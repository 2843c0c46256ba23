"""Profile-likelihood curves and the confidence intervals read off them."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import chi2

from .fitpipe import FitResult
from .nlopt import OptimConfig, minimize

CAP_LEVEL = 0.999
DEFAULT_MAX_STEPS = 100


def chi2_half(level: float) -> float:
    """Half the 1-dof chi-square quantile: the nll rise marking a ``level`` interval."""
    if not 0 <= level < 1:
        raise ValueError("level must lie in [0, 1)")
    return 0.5 * float(chi2.ppf(level, 1))


@dataclass(frozen=True)
class ProfileCurve:
    """Profiled negative log-likelihood of one parameter, sorted by value."""

    name: str
    values: np.ndarray
    nll: np.ndarray
    estimate: float
    nll_min: float
    step: float


@dataclass(frozen=True)
class ProfileResult:
    curves: Mapping[str, ProfileCurve]
    sigma2: float | None

    def __getitem__(self, name) -> ProfileCurve:
        return self.curves[name]


@dataclass(frozen=True)
class ConfInt:
    parameter: str
    estimate: float
    lower: float
    upper: float
    level: float
    lower_open: bool = False
    upper_open: bool = False


def _nll_function(fit: FitResult):
    obj = fit.objective
    if obj.likelihood:
        return obj, None
    # Gaussian errors with the ML variance fixed at the fit
    sigma2 = fit.final_loss / obj.n_obs
    return (lambda v: obj(v) / (2.0 * sigma2)), sigma2


def _walk(nll, v_hat, i, step, lo, hi, cap, max_steps, config, nll_min, warm=True):
    """Points on one side of the estimate: walk until the rise exceeds ``cap``."""
    free = np.array([j for j in range(v_hat.size) if j != i], dtype=int)
    vals, out = [], []
    guess = v_hat[free].copy()
    for k in range(1, max_steps + 1):
        x = v_hat[i] + k * step
        if x < lo[i] or x > hi[i]:
            break
        full = v_hat.copy()
        full[i] = x

        def f(z, full=full):
            full = full.copy()
            full[free] = z
            return nll(full)

        start = np.clip(guess if warm else v_hat[free], lo[free], hi[free])
        try:
            res = minimize(f, start, lo[free], hi[free], config) if free.size else None
            val = res.fun if res is not None else f(start)
            if res is not None:
                guess = res.x
        except (ArithmeticError, RuntimeError, ValueError):
            val = np.inf
        vals.append(x)
        out.append(val)
        if np.isfinite(val) and val - nll_min > cap:
            break
    return vals, out


def profile(fit: FitResult, names: Sequence[str] | None = None, step_size: Mapping[str, float] | None = None,
            max_steps: int = DEFAULT_MAX_STEPS, config: OptimConfig | None = None, warm: bool = True,
            parallel: bool = False) -> ProfileResult:
    """Profile each named parameter (default: all estimated ones) of a finished fit.

    Without a likelihood hook the criterion is the Gaussian negative
    log-likelihood with ``sigma^2 = loss / n_obs`` held fixed. Each side is
    walked in ``step_size`` increments, re-optimising the other unknowns
    from the previous point, until the rise passes half the 0.999
    chi-square quantile or ``max_steps`` is reached. ``step_size``
    defaults to 1% of each estimate.
    """
    obj = fit.objective
    if obj is None:
        raise ValueError("the fit carries no stage-2 objective")
    nll, sigma2 = _nll_function(fit)
    v_hat = fit.final_vector()
    all_names = list(obj.names)
    names = all_names if names is None else list(names)
    unknown = [n for n in names if n not in all_names]
    if unknown:
        raise ValueError(f"cannot profile {unknown}; estimated unknowns are {all_names}")
    config = config or fit.objective.config.nls_optim
    cap = chi2_half(CAP_LEVEL)
    nll_min = float(nll(v_hat))
    lo, hi = obj.lower, obj.upper

    def one(name):
        i = all_names.index(name)
        step = (step_size or {}).get(name, 0.01 * abs(v_hat[i]) or 0.01)
        if not step > 0:
            raise ValueError(f"step size for {name} must be positive")
        up_v, up_n = _walk(nll, v_hat, i, step, lo, hi, cap, max_steps, config, nll_min, warm)
        dn_v, dn_n = _walk(nll, v_hat, i, -step, lo, hi, cap, max_steps, config, nll_min, warm)
        values = np.array(dn_v[::-1] + [v_hat[i]] + up_v)
        curve = np.array(dn_n[::-1] + [nll_min] + up_n)
        return ProfileCurve(name, values, curve, float(v_hat[i]), nll_min, float(step))

    if parallel and len(names) > 1:
        with ThreadPoolExecutor(max_workers=len(names)) as pool:
            curves = list(pool.map(one, names))
    else:
        curves = [one(n) for n in names]
    return ProfileResult({c.name: c for c in curves}, sigma2)


def confint(prof: ProfileResult, level: float = 0.95) -> list:
    """Intervals where the profile stays below ``nll_min + chi2_1(level) / 2``.

    Ends are linearly interpolated between the bracketing grid points; a
    side that never crosses the threshold reports its last finite point and
    is flagged open.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    out = []
    for name, c in prof.curves.items():
        thr = c.nll_min + chi2_half(level)
        i_hat = int(np.argmin(np.abs(c.values - c.estimate)))
        vals, nll = c.values, c.nll
        lo, lo_open = _side(vals, nll, i_hat, thr, -1)
        hi, hi_open = _side(vals, nll, i_hat, thr, +1)
        out.append(ConfInt(name, c.estimate, lo, hi, level, lo_open, hi_open))
    return out


def _side(vals, nll, i_hat, thr, direction):
    prev = i_hat
    j = i_hat + direction
    while 0 <= j < vals.size:
        if np.isfinite(nll[j]):
            if nll[j] > thr:
                x0, x1, y0, y1 = vals[prev], vals[j], nll[prev], nll[j]
                if y1 <= y0:
                    return float(x1), False
                t = min(max((thr - y0) / (y1 - y0), 0.0), 1.0)
                return float(x0 + t * (x1 - x0)), False
            prev = j
        j += direction
    return float(vals[prev]), True
