"""Nonparametric trajectory estimates and the quadrature objects built on them.

The smoother is the cubic smoothing spline in Reinsch form: with knots at
the sample times, fitted values ``f = y - lam * Q @ gamma`` where
``(R + lam * Q.T @ Q) gamma = Q.T @ y``. The trace of the hat matrix comes
from the band of the inverse of the pentadiagonal system, computed with the
Hutchinson & de Hoog (1985) recursion, so each GCV evaluation is O(n).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import cho_solve_banded, cholesky_banded

from .errors import DomainError
from .expr import ClampCounter, eval_array
from .model import TIME

N_LAMBDA = 60
MIN_SAMPLES = 8


def grid_size(n: int) -> int:
    return max(4 * n, 200)


def cum_trapz(t, y) -> np.ndarray:
    """Cumulative trapezoidal integral along the first axis, starting at 0."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.shape[0] != t.shape[0]:
        raise ValueError(f"length mismatch: {t.shape[0]} times, {y.shape[0]} values")
    dt = np.diff(t).reshape((-1,) + (1,) * (y.ndim - 1))
    out = np.zeros_like(y)
    out[1:] = np.cumsum(dt * (y[1:] + y[:-1]) * 0.5, axis=0)
    return out


def trapz_weights(t) -> np.ndarray:
    """Weights ``w`` with ``w @ y`` equal to the trapezoid rule on ``t``."""
    t = np.asarray(t, dtype=float)
    w = np.zeros_like(t)
    dt = np.diff(t)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return w


# ---------------------------------------------------------------- smoothing spline


class _Reinsch:
    """Banded pieces of the smoothing spline for one set of (scaled) knots."""

    def __init__(self, u):
        n = u.size
        h = np.diff(u)
        m = n - 2
        # Q is n x m with three nonzeros per column
        self.q0 = 1.0 / h[:-1]  # Q[j, j]
        self.q1 = -1.0 / h[:-1] - 1.0 / h[1:]  # Q[j+1, j]
        self.q2 = 1.0 / h[1:]  # Q[j+2, j]
        # R: tridiagonal, diag (h_j + h_{j+1})/3, off-diag h_{j+1}/6
        self.r_diag = (h[:-1] + h[1:]) / 3.0
        self.r_off = h[1:-1] / 6.0
        # Q^T Q bands
        q0, q1, q2 = self.q0, self.q1, self.q2
        self.qq0 = q0**2 + q1**2 + q2**2
        self.qq1 = q1[:-1] * q0[1:] + q2[:-1] * q1[1:]
        self.qq2 = q2[:-2] * q0[2:]
        self.n, self.m = n, m

    def qt(self, y):
        """``Q.T @ y`` for a vector or column-stacked matrix."""
        return (
            self.q0[:, None] * y[:-2] + self.q1[:, None] * y[1:-1] + self.q2[:, None] * y[2:]
            if y.ndim == 2
            else self.q0 * y[:-2] + self.q1 * y[1:-1] + self.q2 * y[2:]
        )

    def q(self, g):
        """``Q @ g``."""
        out = np.zeros((self.n,) + g.shape[1:])
        out[:-2] += (self.q0[:, None] * g) if g.ndim == 2 else self.q0 * g
        out[1:-1] += (self.q1[:, None] * g) if g.ndim == 2 else self.q1 * g
        out[2:] += (self.q2[:, None] * g) if g.ndim == 2 else self.q2 * g
        return out

    def banded(self, lam):
        """Upper banded storage of ``R + lam * Q.T Q`` for LAPACK."""
        m = self.m
        ab = np.zeros((3, m))
        ab[2] = self.r_diag + lam * self.qq0
        ab[1, 1:] = self.r_off + lam * self.qq1
        ab[0, 2:] = lam * self.qq2
        return ab

    def trace_hat(self, lam, chol):
        """Exact ``tr A(lam) = n - lam * tr(M^{-1} Q^T Q)`` from the Cholesky factor."""
        m = self.m
        s = chol[2]
        d = s * s
        l1 = np.zeros(m)
        l2 = np.zeros(m)
        l1[:-1] = chol[1, 1:] / s[:-1]  # L[i+1, i]
        l2[:-2] = chol[0, 2:] / s[:-2]  # L[i+2, i]
        S0 = np.zeros(m)  # Sigma[i, i]
        S1 = np.zeros(m)  # Sigma[i, i+1]
        S2 = np.zeros(m)  # Sigma[i, i+2]
        for i in range(m - 1, -1, -1):
            a = l1[i] if i + 1 < m else 0.0
            b = l2[i] if i + 2 < m else 0.0
            s11 = S0[i + 1] if i + 1 < m else 0.0
            s21 = S1[i + 1] if i + 2 < m else 0.0
            s22 = S0[i + 2] if i + 2 < m else 0.0
            s1 = -a * s11 - b * s21
            s2 = -a * s21 - b * s22
            S1[i] = s1
            S2[i] = s2
            S0[i] = 1.0 / d[i] - a * s1 - b * s2
        tr = S0 @ self.qq0 + 2.0 * (S1[:-1] @ self.qq1) + 2.0 * (S2[:-2] @ self.qq2)
        return self.n - lam * tr

    def solve(self, lam, y):
        chol = cholesky_banded(self.banded(lam), lower=False)
        gamma = cho_solve_banded((chol, False), self.qt(y))
        return y - lam * self.q(gamma), chol


@dataclass(frozen=True)
class SplineFit:
    """Result of a GCV-selected smoothing spline for one series."""

    t: np.ndarray
    fitted: np.ndarray
    lam: float
    gcv: float
    df: float

    def __call__(self, x):
        return _natural_eval(self.t, self.fitted, np.asarray(x, dtype=float))

    def operator(self, x) -> np.ndarray:
        """Matrix mapping raw samples to smoothed values at ``x`` (fixed lambda)."""
        return smoother_matrix(self.t, self.lam, x)


def _natural_eval(t, f, x):
    """Evaluate the natural interpolating spline through ``(t, f)``; linear beyond the ends."""
    cs = CubicSpline(t, f, bc_type="natural", axis=0)
    d = cs.derivative()
    xc = np.clip(x, t[0], t[-1])
    dx = (x - xc).reshape((-1,) + (1,) * (np.ndim(f) - 1))
    return cs(xc) + dx * d(xc)


def _check_series(t, y):
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise ValueError("t and y must be 1-d arrays of equal length")
    if t.size < MIN_SAMPLES:
        raise ValueError(f"smoothing needs at least {MIN_SAMPLES} samples, got {t.size}")
    dt = np.diff(t)
    if np.any(dt == 0):
        raise ValueError("duplicate sample times")
    if np.any(dt < 0):
        raise ValueError("sample times must be increasing")
    return t, y


def _scaled(t):
    return (t - t[0]) / (t[-1] - t[0])


def _log_lambda_for_df(rs, target):
    lo, hi = -14.0, 14.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        chol = cholesky_banded(rs.banded(10.0**mid), lower=False)
        if rs.trace_hat(10.0**mid, chol) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def smooth_spline_gcv(t, y, n_lambda: int = N_LAMBDA) -> SplineFit:
    """Cubic smoothing spline with the penalty chosen by generalised cross-validation.

    ``GCV(lam) = n * RSS(lam) / (n - tr A(lam))**2`` is minimised over a
    log-spaced grid of ``n_lambda`` values whose effective degrees of freedom
    run from about ``n - 1`` down to about 2. Ties go to the smoothest fit.
    """
    t, y = _check_series(t, y)
    n = t.size
    rs = _Reinsch(_scaled(t))
    lo = _log_lambda_for_df(rs, n - 1.0)
    hi = _log_lambda_for_df(rs, 2.0 + 1e-3)
    lams = 10.0 ** np.linspace(lo, hi, n_lambda)
    scores = np.empty(n_lambda)
    dfs = np.empty(n_lambda)
    fits = []
    for i, lam in enumerate(lams):
        f, chol = rs.solve(lam, y)
        df = rs.trace_hat(lam, chol)
        rss = float(np.sum((y - f) ** 2))
        scores[i] = n * rss / (n - df) ** 2
        dfs[i] = df
        fits.append(f)
    tol = 1e-12 * float(np.mean(y**2)) + 1e-300
    best = np.flatnonzero(scores <= scores.min() + tol)[-1]
    return SplineFit(t, fits[best], float(lams[best]), float(scores[best]), float(dfs[best]))


def smoother_matrix(t, lam, x=None) -> np.ndarray:
    """Hat matrix of the spline with penalty ``lam`` (scaled time), optionally evaluated at ``x``."""
    t = np.asarray(t, dtype=float)
    rs = _Reinsch(_scaled(t))
    A, _ = rs.solve(lam, np.eye(t.size))
    if x is None:
        return A
    return _natural_eval(t, A, np.asarray(x, dtype=float))


def linear_interp_matrix(t, x) -> np.ndarray:
    """Matrix ``W`` with ``W @ y == np.interp(x, t, y)``."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    W = np.zeros((x.size, t.size))
    idx = np.clip(np.searchsorted(t, x, side="right") - 1, 0, t.size - 2) if t.size > 1 else np.zeros(x.size, int)
    if t.size == 1:
        W[:, 0] = 1.0
        return W
    w = np.clip((x - t[idx]) / (t[idx + 1] - t[idx]), 0.0, 1.0)
    W[np.arange(x.size), idx] = 1.0 - w
    W[np.arange(x.size), idx + 1] += w
    return W


# ---------------------------------------------------------------- smoothed paths


@dataclass(frozen=True)
class SmoothedPath:
    """Estimated trajectory ``x_hat`` on a common grid, one column per variable.

    ``operators[var]`` maps that variable's raw samples to its grid column,
    which lets reconstructed series be re-smoothed with the penalty fixed.
    """

    grid: np.ndarray
    values: np.ndarray
    variables: tuple
    source: Mapping[str, dict] = field(default_factory=dict)
    operators: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, var):
        return self.values[:, self.variables.index(var)]

    @property
    def span(self) -> float:
        return float(self.grid[-1] - self.grid[0])

    def resmooth(self, series: Mapping[str, np.ndarray]) -> "SmoothedPath":
        """Copy with some columns recomputed from new raw samples (same times, same penalty)."""
        vals = self.values.copy()
        for var, y in series.items():
            vals[:, self.variables.index(var)] = self.operators[var] @ np.asarray(y, dtype=float)
        return SmoothedPath(self.grid, vals, self.variables, self.source, self.operators)


def smooth_all(
    series: Mapping[str, tuple],
    variables: Sequence[str],
    method: str = "gcv-spline",
    lambdas: Mapping[str, float] | None = None,
) -> SmoothedPath:
    """Smooth every variable's ``(times, values)`` onto a shared grid.

    ``method='gcv-spline'`` uses :func:`smooth_spline_gcv` on a uniform grid
    of ``max(4n, 200)`` points; ``lambdas`` pins the penalty per variable
    instead of running GCV. ``method='none'`` uses the union of the sample
    times as the grid and linear interpolation between samples.
    """
    missing = [v for v in variables if v not in series]
    if missing:
        raise ValueError(f"no observations for {missing}")
    times = {v: np.asarray(series[v][0], dtype=float) for v in variables}
    ys = {v: np.asarray(series[v][1], dtype=float) for v in variables}
    t0 = min(tt[0] for tt in times.values())
    t1 = max(tt[-1] for tt in times.values())
    if method == "none":
        grid = np.unique(np.concatenate(list(times.values())))
        ops = {}
        for v in variables:
            if np.any(np.diff(times[v]) <= 0):
                raise ValueError(f"sample times for {v} must be strictly increasing")
            ops[v] = linear_interp_matrix(times[v], grid)
        vals = np.column_stack([ops[v] @ ys[v] for v in variables])
        return SmoothedPath(grid, vals, tuple(variables), {v: {"method": "none"} for v in variables}, ops)
    if method != "gcv-spline":
        raise ValueError(f"unknown smoothing method {method!r}")
    n = max(tt.size for tt in times.values())
    grid = np.linspace(t0, t1, grid_size(n))
    cols, ops, source = [], {}, {}
    for v in variables:
        if lambdas and v in lambdas:
            lam = float(lambdas[v])
            _check_series(times[v], ys[v])
            info = {"method": "gcv-spline", "lambda": lam, "gcv": None, "df": None}
        else:
            fit = smooth_spline_gcv(times[v], ys[v])
            lam = fit.lam
            info = {"method": "gcv-spline", "lambda": fit.lam, "gcv": fit.gcv, "df": fit.df}
        ops[v] = smoother_matrix(times[v], lam, grid)
        cols.append(ops[v] @ ys[v])
        source[v] = info
    return SmoothedPath(grid, np.column_stack(cols), tuple(variables), source, ops)


# ---------------------------------------------------------------- quadrature cache


@dataclass(frozen=True)
class QuadCache:
    """Integrals of the decomposed vector field along a smoothed path.

    ``G_hat[t, j, k]`` is the running integral of coefficient ``g_jk``,
    ``F0[t, j]`` that of the offset; ``A_hat = int G_hat dt`` and
    ``B_hat = int G_hat^T G_hat dt`` over the grid by the trapezoid rule.
    """

    grid: np.ndarray
    weights: np.ndarray
    G_hat: np.ndarray
    F0: np.ndarray
    A_hat: np.ndarray
    B_hat: np.ndarray
    clamped: int = 0

    @property
    def span(self) -> float:
        return float(self.grid[-1] - self.grid[0])


def grid_env(path: SmoothedPath, bindings: Mapping[str, float], inputs=()) -> dict:
    env = dict(bindings)
    for j, v in enumerate(path.variables):
        env[v] = path.values[:, j]
    env[TIME] = path.grid
    for u in inputs:
        env[u.name] = u(path.grid)
    return env


def _first_failure(node, env, grid, clamp):
    """Earliest grid time at which ``node`` fails (slow path, errors only)."""
    if node is None:
        return None
    for i in range(grid.size):
        pt = {k: (v[i] if isinstance(v, np.ndarray) and v.shape == grid.shape else v) for k, v in env.items()}
        try:
            eval_array(node, pt, ClampCounter())
        except DomainError:
            return float(grid[i])
    return None


def build_quad(path: SmoothedPath, decomp, bindings: Mapping[str, float], inputs=(),
               rows: Sequence[int] | None = None) -> QuadCache:
    """Integrate the decomposition's coefficients and offsets along ``path``.

    ``bindings`` must hold every non-linear and fixed parameter the
    coefficients use. Fractional powers, logs and square roots of values
    below ``1e-8`` are evaluated at ``1e-8`` and counted in ``clamped``.
    ``rows`` restricts to a subset of equations.
    """
    rows = range(len(decomp.offsets)) if rows is None else rows
    env = grid_env(path, bindings, inputs)
    G = path.grid.size
    clamp = ClampCounter()
    p = decomp.p_linear
    g = np.zeros((G, len(rows), p))
    f0 = np.zeros((G, len(rows)))
    try:
        for r, j in enumerate(rows):
            f0[:, r] = eval_array(decomp.offsets[j], env, clamp)
            for k in range(p):
                c = decomp.coefficients[j][k]
                if not (getattr(c, "value", None) == 0.0):
                    g[:, r, k] = eval_array(c, env, clamp)
    except DomainError as exc:
        t_bad = _first_failure(exc.node, env, path.grid, clamp)
        where = f" at t={t_bad:.10g}" if t_bad is not None else ""
        err = DomainError(f"{exc} along the smoothed path{where}")
        err.node = exc.node
        err.time = t_bad
        raise err from exc
    w = trapz_weights(path.grid)
    G_hat = cum_trapz(path.grid, g)
    F0 = cum_trapz(path.grid, f0)
    A_hat = np.einsum("t,tjk->jk", w, G_hat)
    B = np.einsum("t,tjk,tjl->kl", w, G_hat, G_hat)
    B_hat = 0.5 * (B + B.T)
    return QuadCache(path.grid, w, G_hat, F0, A_hat, B_hat, clamp.count)
