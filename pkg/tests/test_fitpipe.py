import numpy as np
import pytest

from odesep import fixtures as fx, hooks
from odesep.errors import RoleError
from odesep.fitpipe import (SEPARATE, SEPARATE_X0, FitConfig, FitFailure, ObservationSet, fit, fit_sets,
                            mc_summary, nls_loss)
from odesep.model import OdeModel
from odesep.nlopt import OptimConfig
from odesep.odesolve import solve_ode


@pytest.fixture(scope="module")
def bio_fit():
    ref = fx.biochemical(50)
    m = ref.model(fixed={k: ref.theta[k] for k in fx.BIOCHEMICAL_KINETIC})
    obs, _ = fx.simulate(m, ref.theta, ref.x0, ref.times, sigma=0.05, seed=1)
    return ref, m, obs, fit(m, obs, FitConfig(x0=ref.x0))


def test_stage_two_never_worse_than_stage_one(bio_fit):
    _, _, _, r = bio_fit
    assert r.nls_loss <= r.loss_at_im
    assert r.nls_optim.converged


def test_loss_at_truth_is_noise_sized(bio_fit):
    ref, m, obs, r = bio_fit
    at_truth = nls_loss(m, ref.theta, ref.x0, obs)
    assert r.nls_loss <= at_truth
    # 100 residuals of sd 0.05
    assert at_truth == pytest.approx(100 * 0.05**2, rel=0.5)


def test_estimates_near_truth(bio_fit):
    ref, _, _, r = bio_fit
    for p in ("alpha1", "beta1", "alpha2", "beta2"):
        assert r.nls_theta[p] == pytest.approx(ref.theta[p], rel=0.15)
        assert r.im_theta[p] == pytest.approx(ref.theta[p], rel=0.15)


def test_nls_loss_zero_on_exact_data():
    ref = fx.lotka_volterra(40)
    m = ref.model()
    obs, _ = fx.simulate(m, ref.theta, ref.x0, ref.times)
    assert nls_loss(m, ref.theta, ref.x0, obs) < 1e-14


def test_variables_may_have_their_own_times():
    ref = fx.lotka_volterra(40)
    m = ref.model()
    traj = solve_ode(m, ref.theta, ref.x0, ref.times)
    keep = np.arange(ref.times.size) != 5
    obs = ObservationSet({"X": (ref.times[keep], traj["X"][keep]), "Y": (ref.times, traj["Y"])})
    assert obs.size == 79
    assert nls_loss(m, ref.theta, ref.x0, obs) < 1e-14


def test_role_error_before_numerics():
    ref = fx.biochemical(50)
    obs, _ = fx.simulate(ref.model(nonlinear=fx.BIOCHEMICAL_KINETIC), ref.theta, ref.x0, ref.times)
    with pytest.raises(RoleError) as info:
        fit(ref.model(), obs, FitConfig(x0=ref.x0))
    assert len(info.value.diagnostics) == 4


def test_im_only_run():
    ref = fx.lotka_volterra(100)
    m = ref.model()
    obs, _ = fx.simulate(m, ref.theta, ref.x0, ref.times, sigma=0.05, seed=4)
    r = fit(m, obs, FitConfig(x0=ref.x0, run_nls=False))
    assert r.nls_theta is None and r.final_theta is r.im_theta


def test_estimated_initial_values():
    ref = fx.lotka_volterra(100)
    m = ref.model()
    obs, _ = fx.simulate(m, ref.theta, ref.x0, ref.times, sigma=0.02, seed=4)
    r = fit(m, obs, FitConfig(x0={"X": "estimate", "Y": ref.x0["Y"]}))
    assert r.x0_estimated == ("X",)
    assert r.nls_x0[0]["X"] == pytest.approx(ref.x0["X"], rel=0.05)
    assert r.nls_x0[0]["Y"] == ref.x0["Y"]


def test_likelihood_hook_estimates_sigma():
    ref = fx.fitzhugh_nagumo(40)
    m = ref.model(nonlinear=("c",), likelihood=("sigma",))
    obs, _ = fx.simulate(m, ref.theta, ref.x0, ref.times, sigma=0.05, seed=0)
    cfg = FitConfig(x0=ref.x0, start={"c": 3.35, "sigma": 0.1}, lower={"sigma": 1e-4},
                    calc_nll=hooks.gaussian_nll())
    r = fit(m, obs, cfg)
    assert np.isnan(r.im_theta["sigma"])
    assert r.nls_theta["sigma"] == pytest.approx(0.05, rel=0.3)
    assert r.nls_theta["c"] == pytest.approx(3.0, rel=0.1)
    # the reported loss is the likelihood value
    assert r.nls_loss < 0


def test_separate_x0_shares_parameters():
    ref = fx.lotka_volterra(100)
    m = ref.model()
    x0s = [ref.x0, {"X": 0.8, "Y": 1.5}]
    sets = [fx.simulate(m, ref.theta, x0, ref.times, sigma=0.02, seed=s)[0] for s, x0 in enumerate(x0s)]
    res = fit_sets(m, sets, SEPARATE_X0, FitConfig(x0=x0s))
    assert len(res) == 2
    assert res[0].nls_theta == res[1].nls_theta
    assert res[1].nls_x0 == [x0s[1]]
    for p in m.parameters:
        assert res[0].nls_theta[p] == pytest.approx(ref.theta[p], rel=0.1)


def test_failed_set_keeps_its_slot():
    ref = fx.lotka_volterra(40)
    m = ref.model()
    good, _ = fx.simulate(m, ref.theta, ref.x0, ref.times, sigma=0.02, seed=0)
    t = ref.times
    flat = ObservationSet({"X": (t, np.zeros_like(t)), "Y": (t, np.zeros_like(t))})
    res = fit_sets(m, [good, flat], SEPARATE, FitConfig(x0=ref.x0, run_nls=False))
    assert res[0].set_index == 0
    assert isinstance(res[1], FitFailure) and res[1].set_index == 1


def test_parallel_fits_identical():
    ref = fx.lotka_volterra(60)
    m = ref.model()
    g = fx.Xoshiro256(9)
    sets = [fx.simulate(m, ref.theta, ref.x0, ref.times, sigma=0.05, rng=g)[0] for _ in range(3)]
    cfg = FitConfig(x0=ref.x0)
    a = fit_sets(m, sets, config=cfg)
    b = fit_sets(m, sets, config=cfg, parallel=True)
    for ra, rb in zip(a, b):
        assert ra.nls_theta == rb.nls_theta


def test_mc_summary_identical_sets_have_zero_sd(bio_fit):
    ref, _, _, r = bio_fit
    s = mc_summary([r, r, r], truth=ref.theta)
    assert np.all(s.columns["nls_sd"] == 0) and np.all(s.columns["im_sd"] == 0)
    bias = s.row("alpha1")["nls_bias"]
    assert bias == pytest.approx(r.nls_theta["alpha1"] - 2.0)
    assert s.row("alpha1")["nls_rmse"] == pytest.approx(abs(bias))


def test_mc_summary_without_truth_omits_error_columns(bio_fit):
    _, _, _, r = bio_fit
    s = mc_summary([r, r])
    assert set(s.columns) == {"im_mean", "im_sd", "nls_mean", "nls_sd"}


def test_mc_summary_needs_two_fits(bio_fit):
    with pytest.raises(ValueError):
        mc_summary([bio_fit[3]])


def test_unlisted_initial_values_are_estimated():
    m = OdeModel.build({"x": "-k*x"})
    t = np.linspace(0, 1, 10)
    obs = ObservationSet({"x": (t, np.exp(-t))})
    r = fit(m, obs, FitConfig(run_nls=False))
    assert r.x0_estimated == ("x",)


def test_duplicated_set_leaves_joint_argmin_unchanged():
    ref = fx.lotka_volterra(100)
    m = ref.model()
    obs, _ = fx.simulate(m, ref.theta, ref.x0, ref.times, sigma=0.05, seed=6)
    # a tight stopping rule so both runs resolve the argmin itself
    cfg = FitConfig(nls_optim=OptimConfig(reltol=1e-14, fd_step=1e-7))
    one = fit(m, obs, cfg)
    two = fit_sets(m, [obs, obs], SEPARATE_X0, cfg)
    assert two[0].nls_loss == pytest.approx(2 * one.nls_loss, rel=1e-6)
    for p in m.parameters:
        assert two[0].nls_theta[p] == pytest.approx(one.nls_theta[p], abs=1e-6)
    for s in (0, 1):
        for v in m.variables:
            assert two[s].nls_x0[0][v] == pytest.approx(one.nls_x0[0][v], abs=1e-6)
