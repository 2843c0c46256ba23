"""Bound-constrained convex quadratic programs by a primal active-set method."""

from __future__ import annotations

import numpy as np

from .errors import OptimizationError


def box_qp(H, c, lower, upper, tol: float = 1e-12, max_iter: int | None = None) -> np.ndarray:
    """Minimise ``0.5 z'Hz - c'z`` subject to ``lower <= z <= upper``.

    ``H`` must be symmetric positive definite. Bounds may be infinite.
    When several constraints block or several multipliers have the wrong
    sign, the smallest index is chosen, so the path is deterministic.
    """
    H = np.asarray(H, dtype=float)
    c = np.asarray(c, dtype=float)
    n = c.size
    lo = np.broadcast_to(np.asarray(lower, dtype=float), (n,)).copy()
    hi = np.broadcast_to(np.asarray(upper, dtype=float), (n,)).copy()
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    max_iter = max_iter or 10 * n + 20
    z = np.clip(np.linalg.solve(H, c), lo, hi)
    # +1 at upper, -1 at lower, 0 free
    state = np.where(z >= hi, 1, np.where(z <= lo, -1, 0))
    state[lo == hi] = -1
    scale = max(1.0, float(np.abs(c).max(initial=0.0)), float(np.abs(H).max(initial=0.0)))
    for _ in range(max_iter):
        free = state == 0
        target = z.copy()
        if np.any(free):
            fixed = ~free
            rhs = c[free] - H[np.ix_(free, fixed)] @ z[fixed]
            target[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        step = target - z
        alpha, block = 1.0, -1
        for i in np.flatnonzero(free):
            if step[i] > 0 and np.isfinite(hi[i]):
                a = (hi[i] - z[i]) / step[i]
            elif step[i] < 0 and np.isfinite(lo[i]):
                a = (lo[i] - z[i]) / step[i]
            else:
                continue
            if a < alpha:
                alpha, block = a, i
        z = z + alpha * step
        if block >= 0:
            state[block] = 1 if step[block] > 0 else -1
            z[block] = hi[block] if state[block] == 1 else lo[block]
            continue
        grad = H @ z - c
        mult = np.where(state == -1, grad, np.where(state == 1, -grad, 0.0))
        mult[lo == hi] = 0.0
        wrong = np.flatnonzero(mult < -tol * scale)
        if wrong.size == 0:
            return z
        state[wrong[np.argmin(mult[wrong])]] = 0
    raise OptimizationError("active-set iteration limit reached", z, None)
