"""Bound-constrained local minimisation used by both estimation stages.

Two deterministic methods are provided: a projected quasi-Newton (BFGS)
method with finite-difference gradients that never leave the box, and a
Nelder-Mead simplex whose trial points are clamped into the box. A
non-finite objective value is treated as ``+inf``, which the line search
and simplex both handle as a rejected trial.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import OptimizationError

METHODS = ("bfgs", "nelder-mead")


@dataclass(frozen=True)
class OptimConfig:
    """Optimizer settings.

    Parameters
    ----------
    method : {'bfgs', 'nelder-mead'}
    maxit : int
        Iteration limit.
    reltol : float
        Stop when the objective's relative decrease falls below this.
    fd_step : float
        Forward-difference step is ``fd_step * (1 + |x|)`` in scaled units.
    trace : bool
        Record the best value seen after every iteration.
    """

    method: str = "bfgs"
    maxit: int = 500
    reltol: float = 1e-8
    fd_step: float = 1e-6
    trace: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.maxit < 1 or self.reltol <= 0 or self.fd_step <= 0:
            raise ValueError("maxit, reltol and fd_step must be positive")


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    converged: bool
    iterations: int
    evaluations: int
    message: str = ""
    trace: list = field(default_factory=list)


class _Objective:
    """Wraps ``f`` in scaled coordinates, counting calls and keeping the best point."""

    def __init__(self, f, scale):
        self.f = f
        self.scale = scale
        self.calls = 0
        self.best_x = None
        self.best_f = np.inf

    def __call__(self, z):
        self.calls += 1
        x = z * self.scale
        try:
            v = float(self.f(x))
        except (ArithmeticError, ValueError, RuntimeError):
            v = np.inf
        if not np.isfinite(v):
            v = np.inf
        if v < self.best_f:
            self.best_f, self.best_x = v, x.copy()
        return v


def _bounds(n, lower, upper):
    lo = np.full(n, -np.inf) if lower is None else np.broadcast_to(np.asarray(lower, float), (n,)).copy()
    hi = np.full(n, np.inf) if upper is None else np.broadcast_to(np.asarray(upper, float), (n,)).copy()
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    return lo, hi


def minimize(
    f: Callable[[np.ndarray], float],
    x0: Sequence[float],
    lower=None,
    upper=None,
    config: OptimConfig = OptimConfig(),
    scale=None,
) -> OptimResult:
    """Minimise ``f`` over the box ``[lower, upper]`` starting from ``x0``.

    ``scale`` (default: ``|x0|``, or 1 where that is zero) sets the typical
    magnitude of each coordinate; the search runs in ``x / scale``.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    n = x0.size
    lo, hi = _bounds(n, lower, upper)
    if np.any(x0 < lo) or np.any(x0 > hi):
        raise ValueError("starting point lies outside the bounds")
    if scale is None:
        scale = np.where(np.abs(x0) > 0, np.abs(x0), 1.0)
    scale = np.asarray(scale, dtype=float)
    if np.any(scale <= 0):
        raise ValueError("scale must be positive")
    obj = _Objective(f, scale)
    zlo, zhi = lo / scale, hi / scale
    z0 = x0 / scale
    if n == 0:
        v = obj(z0)
        return OptimResult(x0, v, np.isfinite(v), 0, 1, "no free parameters")
    if config.method == "bfgs":
        z, fz, conv, it, msg, trace = _bfgs(obj, z0, zlo, zhi, config)
    else:
        z, fz, conv, it, msg, trace = _nelder_mead(obj, z0, zlo, zhi, config)
    x = obj.best_x if obj.best_x is not None else z * scale
    fun = obj.best_f
    if not np.isfinite(fun):
        raise OptimizationError("objective was never finite", x0, np.inf)
    return OptimResult(x, fun, conv, it, obj.calls, msg, trace)


def _fd_grad(obj, z, fz, lo, hi, h0):
    g = np.zeros_like(z)
    for i in range(z.size):
        h = h0 * (1.0 + abs(z[i]))
        if z[i] + h > hi[i]:
            h = -h
        zz = z.copy()
        zz[i] += h
        fi = obj(zz)
        if not np.isfinite(fi):
            zz[i] = z[i] - h
            if lo[i] <= zz[i] <= hi[i]:
                fi = obj(zz)
                h = -h
        g[i] = (fi - fz) / h if np.isfinite(fi) else 0.0
    return g


def _binding(z, g, lo, hi):
    return ((z <= lo) & (g > 0)) | ((z >= hi) & (g < 0))


def _bfgs(obj, z, lo, hi, cfg):
    n = z.size
    fz = obj(z)
    if not np.isfinite(fz):
        raise OptimizationError("objective is not finite at the starting point", z * obj.scale, fz)
    g = _fd_grad(obj, z, fz, lo, hi, cfg.fd_step)
    Hinv = np.eye(n)
    fresh = True
    trace = [(0, fz)] if cfg.trace else []
    it = 0
    while it < cfg.maxit:
        it += 1
        act = _binding(z, g, lo, hi)
        pg = np.where(act, 0.0, g)
        if not np.any(pg):
            return z, fz, True, it, "projected gradient vanished", trace
        d = -Hinv @ pg
        d[act] = 0.0
        slope = float(pg @ d)
        if slope >= 0:
            Hinv, fresh = np.eye(n), True
            d = -pg
            slope = float(pg @ d)
        alpha, accepted = 1.0, False
        while alpha > 1e-14:
            zn = np.clip(z + alpha * d, lo, hi)
            fn = obj(zn)
            if fn < fz and fn <= fz + 1e-4 * float(g @ (zn - z)):
                accepted = True
                break
            alpha *= 0.2
        if not accepted:
            if fresh:
                return z, fz, True, it, "no further descent along the gradient", trace
            Hinv, fresh = np.eye(n), True
            continue
        gn = _fd_grad(obj, zn, fn, lo, hi, cfg.fd_step)
        s, y = zn - z, gn - g
        small = abs(fz - fn) <= cfg.reltol * (abs(fz) + cfg.reltol)
        z, fz, g = zn, fn, gn
        if cfg.trace:
            trace.append((it, obj.best_f))
        if small:
            if fresh:
                return z, fz, True, it, "relative reduction below reltol", trace
            # a stalled quasi-Newton step may just mean a stale metric
            Hinv, fresh = np.eye(n), True
            continue
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            if fresh:
                Hinv = np.eye(n) * (sy / float(y @ y))
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
            fresh = False
    return z, fz, False, it, "iteration limit reached", trace


def _nelder_mead(obj, z0, lo, hi, cfg):
    n = z0.size
    pts = [z0.copy()]
    for i in range(n):
        p = z0.copy()
        step = 0.1 * max(1.0, abs(z0[i]))
        p[i] = z0[i] + step if z0[i] + step <= hi[i] else z0[i] - step
        pts.append(np.clip(p, lo, hi))
    simplex = np.array(pts)
    vals = np.array([obj(p) for p in simplex])
    trace = [(0, obj.best_f)] if cfg.trace else []
    it = 0
    while it < cfg.maxit:
        it += 1
        order = np.argsort(vals, kind="stable")
        simplex, vals = simplex[order], vals[order]
        if np.isfinite(vals[-1]) and vals[-1] - vals[0] <= cfg.reltol * (abs(vals[0]) + cfg.reltol):
            return simplex[0], vals[0], True, it, "simplex values converged", trace
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = np.clip(centroid + (centroid - worst), lo, hi)
        fr = obj(xr)
        if fr < vals[0]:
            xe = np.clip(centroid + 2.0 * (centroid - worst), lo, hi)
            fe = obj(xe)
            simplex[-1], vals[-1] = (xe, fe) if fe < fr else (xr, fr)
        elif fr < vals[-2]:
            simplex[-1], vals[-1] = xr, fr
        else:
            if fr < vals[-1]:
                xc = np.clip(centroid + 0.5 * (xr - centroid), lo, hi)
            else:
                xc = np.clip(centroid + 0.5 * (worst - centroid), lo, hi)
            fc = obj(xc)
            if fc < min(fr, vals[-1]):
                simplex[-1], vals[-1] = xc, fc
            else:
                for k in range(1, n + 1):
                    simplex[k] = simplex[0] + 0.5 * (simplex[k] - simplex[0])
                    vals[k] = obj(simplex[k])
        if cfg.trace:
            trace.append((it, obj.best_f))
    order = np.argsort(vals, kind="stable")
    return simplex[order[0]], vals[order[0]], False, it, "iteration limit reached", trace
