import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odesep.boxls import box_qp
from odesep.errors import OptimizationError
from odesep.nlopt import OptimConfig, minimize


def rosen(x):
    return 100.0 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2


# ---------------------------------------------------------------- box QP


def test_box_qp_interior_matches_solve():
    H = np.array([[4.0, 1.0], [1.0, 3.0]])
    c = np.array([1.0, 2.0])
    assert box_qp(H, c, -10, 10) == pytest.approx(np.linalg.solve(H, c), abs=1e-14)


def test_box_qp_active_bound():
    z = box_qp(np.eye(2), [2.0, -1.0], [0.0, 0.0], [1.0, 5.0])
    assert z == pytest.approx([1.0, 0.0])


def test_box_qp_equal_bounds_pin_value():
    z = box_qp(np.array([[2.0, 1.0], [1.0, 2.0]]), [1.0, 1.0], [0.3, -np.inf], [0.3, np.inf])
    assert z[0] == 0.3
    assert z[1] == pytest.approx((1.0 - 0.3) / 2)


def test_box_qp_rejects_crossed_bounds():
    with pytest.raises(ValueError):
        box_qp(np.eye(1), [0.0], [1.0], [0.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_box_qp_kkt(n, seed):
    r = np.random.default_rng(seed)
    M = r.normal(size=(n, n))
    H = M @ M.T + n * np.eye(n)
    c = r.normal(size=n) * 3
    lo = r.uniform(-1, 0, n)
    hi = lo + r.uniform(0, 1.5, n)
    z = box_qp(H, c, lo, hi)
    assert np.all(z >= lo) and np.all(z <= hi)
    g = H @ z - c
    tol = 1e-9 * (1 + np.abs(c).max() + np.abs(H).max())
    free = (z > lo) & (z < hi)
    assert np.all(np.abs(g[free]) <= tol)
    assert np.all(g[(z == lo) & ~free] >= -tol)
    assert np.all(g[(z == hi) & ~free] <= tol)


# ---------------------------------------------------------------- minimize


def test_rosenbrock_nelder_mead():
    res = minimize(rosen, [-1.2, 1.0], config=OptimConfig(method="nelder-mead", maxit=500))
    assert res.x == pytest.approx([1.0, 1.0], abs=1e-3)
    assert res.iterations <= 500 and res.fun < 1e-6


@pytest.mark.parametrize("fd_step, tol", [(1e-6, 2e-3), (1.5e-8, 1e-4)])
def test_rosenbrock_bfgs(fd_step, tol):
    # forward differences limit accuracy to about fd_step times the curvature
    res = minimize(rosen, [-1.2, 1.0], config=OptimConfig(fd_step=fd_step))
    assert res.x == pytest.approx([1.0, 1.0], abs=tol)
    assert res.converged


@pytest.mark.parametrize("method", ["bfgs", "nelder-mead"])
def test_bound_active_at_solution(method):
    cfg = OptimConfig(method=method, maxit=2000, reltol=1e-12)
    res = minimize(lambda x: (x[0] - 3) ** 2 + (x[1] + 1) ** 2, [0.5, 0.5], [0, 0], [2, 2], cfg)
    assert res.x == pytest.approx([2.0, 0.0], abs=1e-5)


def test_iterates_stay_in_box():
    seen = []

    def f(x):
        seen.append(x.copy())
        return (x[0] + 5) ** 2 + x[1] ** 2

    minimize(f, [0.5, 0.2], [0, -1], [1, 1])
    seen = np.array(seen)
    assert np.all(seen[:, 0] >= 0) and np.all(seen[:, 1] >= -1) and np.all(seen <= 1)


def test_non_finite_values_are_rejected_trials():
    res = minimize(lambda x: np.sqrt(x[0] - 1) + (x[0] - 3) ** 2 if x[0] >= 1 else np.nan, [2.0])
    assert res.x[0] == pytest.approx(2.86, abs=0.05)


def test_never_finite_raises():
    with pytest.raises(OptimizationError):
        minimize(lambda x: np.inf, [1.0])


def test_start_outside_bounds():
    with pytest.raises(ValueError):
        minimize(rosen, [3.0, 0.0], [0, 0], [1, 1])


def test_unknown_method():
    with pytest.raises(ValueError):
        OptimConfig(method="lbfgs")


@pytest.mark.parametrize("method", ["bfgs", "nelder-mead"])
def test_deterministic(method):
    cfg = OptimConfig(method=method, maxit=300, trace=True)
    a = minimize(rosen, [-1.2, 1.0], config=cfg)
    b = minimize(rosen, [-1.2, 1.0], config=cfg)
    assert np.array_equal(a.x, b.x) and a.trace == b.trace and a.evaluations == b.evaluations


def test_trace_is_monotone():
    res = minimize(rosen, [-1.2, 1.0], config=OptimConfig(trace=True, maxit=200))
    vals = [v for _, v in res.trace]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_iteration_limit_reported():
    res = minimize(rosen, [-1.2, 1.0], config=OptimConfig(maxit=3))
    assert not res.converged and res.iterations == 3


def test_no_free_parameters():
    res = minimize(lambda x: 4.0, np.zeros(0))
    assert res.fun == 4.0 and res.x.size == 0
