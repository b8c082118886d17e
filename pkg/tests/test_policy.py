import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import wagepath as wp
from conftest import make_config, small_config
from wagepath.validate import random_states


@pytest.fixture(scope="module")
def setup(cal06):
    tg, lg = wp.grids_for(cal06, 50)
    tbl = wp.solve_weights(cal06, tg, lg)
    return cal06, tbl, wp.FeedbackPolicy(cal06, tbl)


def flat_state(cfg, tbl, t=0.0, w=1.0, y=1.0, level=None):
    hist = wp.HistoryBuffer.flat(y if level is None else level, tbl.lg)
    return wp.StateSnapshot(t=t, w=w, y_now=y, hist=hist)


# -- total wealth ------------------------------------------------------------


def test_total_wealth_post_retirement_is_w(setup):
    cfg, tbl, pol = setup
    s = flat_state(cfg, tbl, t=cfg.income.tau_R + 1.0, w=7.3, y=2.0)
    assert pol.total_wealth(s) == 7.3
    s = flat_state(cfg, tbl, t=cfg.income.tau_R, w=7.3, y=2.0)
    assert pol.total_wealth(s) == 7.3


def test_total_wealth_zero_income(setup):
    cfg, tbl, pol = setup
    s = flat_state(cfg, tbl, t=3.0, w=5.0, y=0.0, level=0.0)
    assert pol.total_wealth(s) == pytest.approx(5.0, abs=1e-15)


def test_total_wealth_boundary_construction():
    cfg = small_config(phi=wp.DelayKernel.zero())
    tg, lg = wp.grids_for(cfg, 50)
    tbl = wp.solve_weights(cfg, tg, lg)
    pol = wp.FeedbackPolicy(cfg, tbl)
    t = 0.48
    g_t = float(wp.eval_g(tbl, t))
    s = wp.StateSnapshot(t=t, w=-g_t, y_now=1.0, hist=wp.HistoryBuffer.flat(1.0, lg))
    assert pol.total_wealth(s) == pytest.approx(0.0, abs=1e-12)


# -- feedback controls ---------------------------------------------------------


def test_feedback_at_boundary_is_pure_hedge(setup):
    cfg, tbl, pol = setup
    t, y = 5.0, 1.3
    hist = wp.HistoryBuffer.flat(y, tbl.lg)
    hc = wp.human_capital(tbl, t, y, hist)
    s = wp.StateSnapshot(t=t, w=-hc, y_now=y, hist=hist)
    ctrl = pol.feedback_controls(s)
    assert ctrl.c == 0.0 and ctrl.B == 0.0
    g_t = float(wp.eval_g(tbl, t))
    expected = -np.linalg.solve(cfg.market.sigma.T, cfg.income.sigma_y) * g_t * y
    assert np.allclose(ctrl.theta, expected, rtol=1e-12)


def test_feedback_post_retirement_merton(setup):
    cfg, tbl, pol = setup
    ds = cfg.derived
    w = 9.0
    s = flat_state(cfg, tbl, t=cfg.income.tau_R + 2.0, w=w, y=1.7)
    ctrl = pol.feedback_controls(s)
    assert ctrl.c == pytest.approx(cfg.prefs.K ** (-ds.b) / ds.eta_hat * w, rel=1e-12)
    assert ctrl.B == pytest.approx(cfg.prefs.k ** (-ds.b) / ds.eta_hat * w, rel=1e-12)
    merton = np.linalg.solve(cfg.market.sigma.T, ds.kappa) * w / cfg.prefs.gamma
    assert np.allclose(ctrl.theta, merton, rtol=1e-12)
    # f(tau_R) = eta_hat, so the same comes out of the unified map at tau_R
    assert wp.f_factor(cfg, cfg.income.tau_R) == pytest.approx(ds.eta_hat, rel=1e-14)


def test_feedback_merton_reduction_single_asset():
    cfg = make_config(sigma_y=(0.0,), phi=wp.DelayKernel.zero(), d=1.0, tau_R=5.0)
    tg, lg = wp.grids_for(cfg, 50)
    tbl = wp.solve_weights(cfg, tg, lg)
    pol = wp.FeedbackPolicy(cfg, tbl)
    s = flat_state(cfg, tbl, t=1.0, w=2.0, y=1.0)
    gamma_tw = pol.total_wealth(s)
    ctrl = pol.feedback_controls(s)
    kappa = cfg.derived.kappa[0]
    assert ctrl.theta[0] == pytest.approx(
        kappa * gamma_tw / (cfg.prefs.gamma * cfg.market.sigma[0, 0]), rel=1e-12)


def test_feedback_inadmissible_raises(setup):
    cfg, tbl, pol = setup
    s = flat_state(cfg, tbl, t=cfg.income.tau_R + 1.0, w=-1.0, y=0.0)
    with pytest.raises(wp.InadmissibleState):
        pol.feedback_controls(s)


def test_consumption_jump_factor_at_retirement(setup):
    # B and theta are continuous across tau_R; c jumps by exactly K^{-b}
    cfg, tbl, pol = setup
    ds = cfg.derived
    w, y = 4.0, 1.2
    eps = tbl.tg.dt / 8
    before = pol.feedback_controls(flat_state(cfg, tbl, t=cfg.income.tau_R - eps, w=w, y=y))
    at = pol.feedback_controls(flat_state(cfg, tbl, t=cfg.income.tau_R, w=w, y=y))
    assert at.B == pytest.approx(before.B, rel=1e-3)
    assert np.allclose(at.theta, before.theta, rtol=1e-3, atol=1e-6)
    assert at.c / before.c == pytest.approx(cfg.prefs.K ** (-ds.b), rel=1e-3)


def test_controls_monotone_in_total_wealth(setup):
    cfg, tbl, pol = setup
    t, y = 11.0, 1.0
    cs = []
    for w in (0.0, 1.0, 5.0, 20.0):
        ctrl = pol.feedback_controls(flat_state(cfg, tbl, t=t, w=w, y=y))
        cs.append((ctrl.c, ctrl.B))
    assert all(a[0] < b[0] and a[1] < b[1] for a, b in zip(cs, cs[1:]))


@settings(max_examples=25, deadline=None)
@given(lam=st.floats(min_value=0.05, max_value=20.0))
def test_controls_homogeneous_degree_one(lam):
    cfg = make_config(tau_R=5.0, d=1.0)
    tg, lg = wp.grids_for(cfg, 25)
    tbl = wp.solve_weights(cfg, tg, lg)
    pol = wp.FeedbackPolicy(cfg, tbl)
    hist = wp.HistoryBuffer.from_array(np.linspace(0.8, 1.1, lg.n_z + 1), lg)
    s1 = wp.StateSnapshot(t=2.0, w=3.0, y_now=1.1, hist=hist)
    s2 = wp.StateSnapshot(t=2.0, w=lam * 3.0, y_now=lam * 1.1,
                          hist=wp.HistoryBuffer.from_array(
                              lam * hist.values_in_lag_order(), lg))
    c1, c2 = pol.feedback_controls(s1), pol.feedback_controls(s2)
    assert c2.c == pytest.approx(lam * c1.c, rel=1e-10)
    assert c2.B == pytest.approx(lam * c1.B, rel=1e-10)
    assert np.allclose(c2.theta, lam * c1.theta, rtol=1e-10)


# -- value function ------------------------------------------------------------


def test_value_at_retirement_is_merton(setup):
    cfg, tbl, pol = setup
    ds = cfg.derived
    gamma = cfg.prefs.gamma
    w = 3.0
    v = pol.value_function(flat_state(cfg, tbl, t=cfg.income.tau_R, w=w, y=1.0))
    expected = (math.exp(-(cfg.prefs.rho + cfg.market.delta) * cfg.income.tau_R)
                * ds.eta_hat ** gamma * w ** (1 - gamma) / (1 - gamma))
    assert v == pytest.approx(expected, rel=1e-12)


def test_value_boundary_sentinels():
    # rho = 0.05 keeps the finiteness condition satisfied at gamma = 0.5
    for gamma, expected in ((0.5, 0.0), (2.0, float("-inf"))):
        cfg = make_config(gamma=gamma, rho=0.05, tau_R=5.0, d=1.0)
        assert wp.validate_hypotheses(cfg).ok
        tg, lg = wp.grids_for(cfg, 25)
        tbl = wp.solve_weights(cfg, tg, lg)
        pol = wp.FeedbackPolicy(cfg, tbl)
        hist = wp.HistoryBuffer.flat(1.0, lg)
        hc = wp.human_capital(tbl, 1.0, 1.0, hist)
        s = wp.StateSnapshot(t=1.0, w=-hc, y_now=1.0, hist=hist)
        assert pol.value_function(s) == expected
    # sign: V > 0 iff gamma < 1
    cfg5 = make_config(gamma=0.5, rho=0.05, tau_R=5.0, d=1.0)
    tg, lg = wp.grids_for(cfg5, 25)
    tbl5 = wp.solve_weights(cfg5, tg, lg)
    assert wp.FeedbackPolicy(cfg5, tbl5).value_function(
        flat_state(cfg5, tbl5, w=2.0, y=1.0)) > 0


def test_value_requires_hypotheses():
    cfg = make_config(r=0.1, mu=(0.1,), delta=0.0, gamma=0.5, rho=1e-9,
                      mu_y=0.0, sigma_y=(0.0,), tau_R=2.0, d=0.5,
                      phi=wp.DelayKernel.zero())
    tg, lg = wp.grids_for(cfg, 20)
    # the solver itself has no nu dependence; the value function must refuse
    tbl = wp.solve_weights(cfg, tg, lg)
    pol = wp.FeedbackPolicy(cfg, tbl)
    with pytest.raises(wp.HypothesisViolated):
        pol.value_function(flat_state(cfg, tbl, w=1.0, y=1.0))


@settings(max_examples=25, deadline=None)
@given(lam=st.floats(min_value=0.1, max_value=10.0))
def test_value_homogeneous_degree_one_minus_gamma(lam, cal06):
    tg, lg = wp.grids_for(cal06, 25)
    tbl = wp.solve_weights(cal06, tg, lg)
    pol = wp.FeedbackPolicy(cal06, tbl)
    hist = wp.HistoryBuffer.flat(1.0, lg)
    s1 = wp.StateSnapshot(t=7.0, w=2.0, y_now=1.0, hist=hist)
    s2 = wp.StateSnapshot(t=7.0, w=lam * 2.0, y_now=lam,
                          hist=wp.HistoryBuffer.flat(lam, lg))
    v1, v2 = pol.value_function(s1), pol.value_function(s2)
    assert v2 == pytest.approx(lam ** (1 - cal06.prefs.gamma) * v1, rel=1e-10)


def test_feedback_equals_hamiltonian_maximizers(setup):
    # the analytic maximizers evaluated at the closed-form derivatives must
    # reproduce the feedback map at interior states
    cfg, tbl, pol = setup
    ds = cfg.derived
    gamma = cfg.prefs.gamma
    for s in random_states(cfg, tbl, 40, seed=4, allow_boundary=False):
        gamma_tw = pol.total_wealth(s)
        Ft = wp.F_factor(cfg, s.t)
        g_t = float(wp.eval_g(tbl, s.t))
        p0 = Ft ** gamma * gamma_tw ** (-gamma)
        P11 = -gamma * Ft ** gamma * gamma_tw ** (-gamma - 1.0)
        P12 = P11 * g_t
        disc = math.exp(-(cfg.prefs.rho + cfg.market.delta) * s.t / gamma)
        c_star = disc * p0 ** (-1.0 / gamma)
        B_star = cfg.prefs.k ** (-ds.b) * c_star
        rhs = ((cfg.market.mu - cfg.market.r) * p0
               + (cfg.market.sigma @ cfg.income.sigma_y) * (s.y_now * P12))
        theta_star = -np.linalg.solve(cfg.market.sigma @ cfg.market.sigma.T, rhs) / P11
        ctrl = pol.feedback_controls(s)
        assert ctrl.c == pytest.approx(c_star, rel=1e-10)
        assert ctrl.B == pytest.approx(B_star, rel=1e-10)
        assert np.allclose(ctrl.theta, theta_star, rtol=1e-10, atol=1e-12)


# -- hedging demand ------------------------------------------------------------


@pytest.fixture(scope="module")
def table_pair(cal06):
    tg, lg = wp.grids_for(cal06, 50)
    tbl_phi = wp.solve_weights(cal06, tg, lg)
    d0 = cal06.to_dict()
    d0["income"]["phi"] = {"kind": "zero"}
    cfg0 = wp.ModelConfig.from_dict(d0)
    tbl_zero = wp.solve_weights(cfg0, tg, lg)
    return cal06, tbl_phi, tbl_zero


def test_hedging_delta_equals_feedback_difference(table_pair):
    cfg, tbl_phi, tbl_zero = table_pair
    pol_phi = wp.FeedbackPolicy(cfg, tbl_phi)
    pol_zero = wp.FeedbackPolicy(cfg, tbl_zero)
    for s in random_states(cfg, tbl_phi, 30, seed=9, allow_boundary=False):
        delta = wp.hedging_demand_delta(cfg, s, tbl_phi, tbl_zero)
        diff = pol_phi.feedback_controls(s).theta - pol_zero.feedback_controls(s).theta
        scale = max(np.abs(diff).max(), 1.0)
        assert np.abs(delta - diff).max() <= 1e-12 * scale


def test_hedging_delta_zero_for_identical_tables(table_pair):
    cfg, _, tbl_zero = table_pair
    s = wp.StateSnapshot(t=3.0, w=1.0, y_now=1.0,
                         hist=wp.HistoryBuffer.flat(1.0, tbl_zero.lg))
    assert np.allclose(wp.hedging_demand_delta(cfg, s, tbl_zero, tbl_zero), 0.0)


def test_hedging_delta_sigma_y_cancellation():
    # sigma_y = kappa/gamma kills the g2 term: only the past component remains
    cfg = make_config(sigma_y=(0.2 / 3.0,))
    tg, lg = wp.grids_for(cfg, 25)
    tbl_phi = wp.solve_weights(cfg, tg, lg)
    d0 = cfg.to_dict()
    d0["income"]["phi"] = {"kind": "zero"}
    tbl_zero = wp.solve_weights(wp.ModelConfig.from_dict(d0), tg, lg)
    hist = wp.HistoryBuffer.flat(1.0, lg)
    s = wp.StateSnapshot(t=4.0, w=1.0, y_now=1.0, hist=hist)
    delta = wp.hedging_demand_delta(cfg, s, tbl_phi, tbl_zero)
    row = tbl_phi.row_at_time(4.0)
    wz = tbl_phi.lg.trapezoid_weights()
    hpart = float(np.sum(wz * row * hist.values_in_lag_order())) * lg.dz
    expected = (cfg.derived.kappa / cfg.prefs.gamma) * hpart / cfg.market.sigma[0, 0]
    assert np.allclose(delta, expected, rtol=1e-10)


def test_hedging_delta_config_mismatch(table_pair):
    cfg, tbl_phi, tbl_zero = table_pair
    s = wp.StateSnapshot(t=1.0, w=1.0, y_now=1.0,
                         hist=wp.HistoryBuffer.flat(1.0, tbl_phi.lg))
    with pytest.raises(wp.ConfigMismatch):
        wp.hedging_demand_delta(cfg, s, tbl_phi, tbl_phi)  # second table has phi != 0
    tg2, lg2 = wp.grids_for(cfg, 25)
    other = wp.solve_weights(cfg, tg2, lg2)
    with pytest.raises(wp.ConfigMismatch):
        wp.hedging_demand_delta(cfg, s, other, tbl_zero)


# -- merton fractions ----------------------------------------------------------


def test_merton_fractions_symmetric_weights():
    cfg = make_config(k=1.0, K=1.0)
    c_frac, b_frac, _ = wp.merton_fractions(cfg)
    assert c_frac == pytest.approx(1.0 / cfg.derived.eta_hat, rel=1e-14)
    assert b_frac == pytest.approx(c_frac, rel=1e-14)


def test_merton_fractions_identity_and_limit():
    cfg = make_config()
    ds = cfg.derived
    c_frac, _, theta_frac = wp.merton_fractions(cfg)
    assert c_frac * ds.eta_hat * cfg.prefs.K ** ds.b == pytest.approx(1.0, rel=1e-14)
    big = make_config(gamma=200.0)
    _, _, theta_big = wp.merton_fractions(big)
    assert np.all(np.abs(theta_big) < np.abs(theta_frac))
    assert np.abs(theta_big).max() < 1e-2
