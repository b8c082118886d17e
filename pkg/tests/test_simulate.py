import math

import numba
import numpy as np
import pytest

import wagepath as wp
from conftest import make_config, small_config
from wagepath.simulate import (gamma_drift_integral, gamma_exact_terminal,
                               mean_income_path, pair_reduce,
                               simulate_lifecycle_with_noise)


# -- history buffer ------------------------------------------------------------


def test_history_buffer_read_identity():
    lg = wp.LagGrid(n_z=6, dz=0.1)
    buf = wp.HistoryBuffer.from_array(np.arange(7.0), lg)
    assert buf.current == 6.0
    assert buf.read_lag_steps(2) == 4.0
    for k in range(1, 11):
        buf.push(100.0 + k)
    # after k pushes, lag -m dz is the value recorded m steps ago
    for m in range(0, 7):
        expected = 100.0 + (10 - m) if 10 - m >= 1 else float(6 - m + 10)
        assert buf.read_lag_steps(m) == expected
    assert buf.values_in_lag_order()[-1] == buf.current


def test_history_buffer_trapezoid_sum():
    lg = wp.LagGrid(n_z=4, dz=0.25)
    buf = wp.HistoryBuffer.from_array([1.0, 2.0, 3.0, 4.0, 5.0], lg)
    assert buf.trapezoid_sum() == pytest.approx(np.trapezoid([1, 2, 3, 4, 5], dx=0.25))


# -- reference step operations ---------------------------------------------------


def test_step_income_one_step_hand_value():
    cfg = small_config(phi=wp.DelayKernel.constant(0.05), sigma_y=(0.0,))
    _, lg = wp.grids_for(cfg, 50)
    state = wp.PathState.create(cfg, lg, w0=0.0, hist=wp.HistoryBuffer.flat(1.0, lg),
                                dt=1.0 / 50)
    y1 = wp.step_income(cfg, state, np.zeros(1))
    expected = 1.0 + (cfg.income.mu_y + 0.05 * cfg.income.d) * state.dt
    assert y1 == pytest.approx(expected, rel=1e-15)
    assert state.buffer.current == y1


def test_step_income_deterministic_exponential():
    cfg = small_config(phi=wp.DelayKernel.zero(), sigma_y=(0.0,), mu_y=0.04)
    _, lg = wp.grids_for(cfg, 200)
    state = wp.PathState.create(cfg, lg, w0=0.0, hist=wp.HistoryBuffer.flat(1.0, lg),
                                dt=1.0 / 200)
    for _ in range(400):  # two years
        wp.step_income(cfg, state, np.zeros(1))
    exact = math.exp(0.04 * 2.0)
    assert state.buffer.current == pytest.approx(exact, rel=5e-5)  # O(dt)


def test_step_income_strong_self_convergence():
    # shared Brownian path, refine dt by 4: strong error at least halves
    cfg = small_config(phi=wp.DelayKernel.constant(0.05), sigma_y=(0.12,))
    rng = np.random.default_rng(21)
    T, Nf = 2.0, 800
    n_paths = 256
    zf = rng.standard_normal((n_paths, int(T * Nf)))
    terminal = {}
    for N in (50, 200, 800):
        k = Nf // N
        z = zf.reshape(n_paths, -1, k).sum(axis=2) * math.sqrt(1.0 / Nf)
        _, lg = wp.grids_for(cfg, N)
        vals = np.empty(n_paths)
        for p in range(n_paths):
            state = wp.PathState.create(cfg, lg, w0=0.0,
                                        hist=wp.HistoryBuffer.flat(1.0, lg), dt=1.0 / N)
            for i in range(z.shape[1]):
                wp.step_income(cfg, state, z[p, i: i + 1])
            vals[p] = state.buffer.current
        terminal[N] = vals
    err_coarse = np.mean(np.abs(terminal[50] - terminal[800]))
    err_fine = np.mean(np.abs(terminal[200] - terminal[800]))
    assert err_fine <= 0.5 * err_coarse


def test_step_wealth_pure_drift():
    cfg = small_config()
    _, lg = wp.grids_for(cfg, 50)
    state = wp.PathState.create(cfg, lg, w0=2.0, hist=wp.HistoryBuffer.flat(0.0, lg),
                                dt=0.02)
    ctrl = wp.ControlTriple(c=0.0, B=0.0, theta=np.zeros(1))
    w1 = wp.step_wealth(cfg, state, ctrl, np.zeros(1))
    assert w1 == pytest.approx(2.0 * (1.0 + cfg.r_plus_delta * 0.02), rel=1e-15)


def test_step_wealth_retirement_switch():
    cfg = small_config()
    _, lg = wp.grids_for(cfg, 50)
    ctrl = wp.ControlTriple(c=0.0, B=0.0, theta=np.zeros(1))
    pre = wp.PathState.create(cfg, lg, w0=0.0, hist=wp.HistoryBuffer.flat(5.0, lg), dt=0.02)
    wp.step_wealth(cfg, pre, ctrl, np.zeros(1))
    assert pre.W == pytest.approx(5.0 * 0.02, rel=1e-12)  # income flows in
    post = wp.PathState.create(cfg, lg, w0=0.0, hist=wp.HistoryBuffer.flat(5.0, lg), dt=0.02)
    post.t = cfg.income.tau_R
    wp.step_wealth(cfg, post, ctrl, np.zeros(1))
    assert post.W == 0.0  # income term absent from tau_R on


def test_step_wealth_annuity_cancellation():
    # consuming the annuity income delta (W - B) leaves drift r W + theta'(mu-r) + y
    cfg = small_config()
    _, lg = wp.grids_for(cfg, 50)
    w0, B, y = 3.0, 1.0, 5.0
    theta = np.array([0.7])
    state = wp.PathState.create(cfg, lg, w0=w0, hist=wp.HistoryBuffer.flat(y, lg), dt=0.02)
    c = cfg.market.delta * (w0 - B)
    wp.step_wealth(cfg, state, wp.ControlTriple(c=c, B=B, theta=theta), np.zeros(1))
    excess = float(theta @ (cfg.market.mu - cfg.market.r))
    expected = w0 + (cfg.market.r * w0 + excess + y) * 0.02
    assert state.W == pytest.approx(expected, rel=1e-13)


def test_step_state_price():
    cfg = make_config(mu=(0.02,))  # kappa = 0
    _, lg = wp.grids_for(cfg, 50)
    state = wp.PathState.create(cfg, lg, w0=0.0, hist=wp.HistoryBuffer.flat(1.0, lg), dt=0.1)
    for _ in range(10):
        wp.step_state_price(cfg, state, np.array([0.3]))  # kappa = 0: noise ignored
    assert state.xi == pytest.approx(math.exp(-cfg.r_plus_delta * 1.0), rel=1e-12)

    cfg2 = make_config()
    state2 = wp.PathState.create(cfg2, lg, w0=0.0, hist=wp.HistoryBuffer.flat(1.0, lg), dt=0.1)
    wp.step_state_price(cfg2, state2, np.zeros(1))
    k2 = cfg2.derived.kappa_sq
    assert state2.xi == pytest.approx(math.exp(-(cfg2.r_plus_delta + 0.5 * k2) * 0.1),
                                      rel=1e-14)
    assert state2.xi > 0


def test_state_price_martingale_after_discount():
    cfg = make_config()
    kappa = cfg.derived.kappa[0]
    rd = cfg.r_plus_delta
    rng = np.random.default_rng(5)
    n, steps, dt = 100_000, 50, 0.02
    lxi = np.zeros(n)
    for _ in range(steps):
        dw = rng.standard_normal(n) * math.sqrt(dt)
        lxi += -(rd + 0.5 * kappa ** 2) * dt - kappa * dw
    xi = np.exp(lxi)
    se = xi.std(ddof=1) / math.sqrt(n)
    assert abs(xi.mean() - math.exp(-rd * 1.0)) <= 3 * se


# -- kernel vs reference ---------------------------------------------------------


def reference_closed_loop(cfg, tbl, pc, w0, y0, hist, z, c_scale=1.0):
    """Pure-python replica of the lifecycle kernel semantics (one + leg)."""
    dt = pc.dt
    n_steps = z.shape[0]
    n_ret = round(cfg.income.tau_R / dt)
    ds = cfg.derived
    lg = tbl.lg
    state = wp.PathState.create(cfg, lg, w0=w0, hist=hist, dt=dt)
    pol = wp.FeedbackPolicy(cfg, tbl, consumption_scale=c_scale)
    G = pol.total_wealth(wp.StateSnapshot(0.0, w0, y0, hist))
    kappa = ds.kappa
    sy = cfg.income.sigma_y
    util = 0.0
    gamma = cfg.prefs.gamma
    vals = []
    for i in range(n_steps):
        t = i * dt
        retired = i >= n_ret
        ft = wp.f_factor(cfg, t)
        kswitch = cfg.prefs.K ** (-ds.b) if retired else 1.0
        c = c_scale * kswitch * G / ft
        B = cfg.prefs.k ** (-ds.b) * G / ft
        g_t = 0.0 if i >= tbl.tg.n_t else tbl.g[i]
        rhs = kappa * (G / gamma) - sy * (g_t * state.buffer.current)
        theta = np.linalg.solve(cfg.market.sigma.T, rhs)
        dW = z[i: i + 1] * math.sqrt(dt)
        # co-evolved total wealth, same noise
        hedge = float(theta @ (cfg.market.sigma @ dW)) + g_t * state.buffer.current * float(sy @ dW)
        G = G + (cfg.r_plus_delta * G - c - cfg.market.delta * B
                 + (float(theta @ (cfg.market.mu - cfg.market.r))
                    + g_t * state.buffer.current * float(sy @ kappa))) * dt + hedge
        state.t = t
        wp.step_wealth(cfg, state, wp.ControlTriple(c=c, B=B, theta=theta), dW)
        wp.step_income(cfg, state, dW)
    return state.W, state.buffer.current, G


def test_lifecycle_kernel_matches_reference_ops():
    cfg = small_config(phi=wp.DelayKernel.constant(0.05), sigma_y=(0.12,))
    tg, lg = wp.grids_for(cfg, 20)
    tbl = wp.solve_weights(cfg, tg, lg)
    hist = wp.HistoryBuffer.flat(1.0, lg)
    init = wp.StateSnapshot(t=0.0, w=1.5, y_now=1.0, hist=hist)
    pc = wp.PathConfig(dt=tg.dt, horizon=cfg.income.tau_R, n_paths=3, seed=0,
                       antithetic=False)
    rng = np.random.default_rng(77)
    z = rng.standard_normal((3, pc.n_steps))
    out = simulate_lifecycle_with_noise(cfg, tbl, wp.FeedbackPolicy(cfg, tbl), pc,
                                        init, z)
    for p in range(3):
        w_ref, y_ref, g_ref = reference_closed_loop(cfg, tbl, pc, 1.5, 1.0, hist, z[p])
        assert out[p, 4] == pytest.approx(w_ref, rel=1e-11)
        assert out[p, 6] == pytest.approx(y_ref, rel=1e-11)
        assert out[p, 5] == pytest.approx(g_ref, rel=1e-11)


def test_hc_kernel_matches_reference_ops():
    cfg = small_config(phi=wp.DelayKernel.constant(0.05), sigma_y=(0.12,))
    _, lg = wp.grids_for(cfg, 20)
    hist = wp.HistoryBuffer.flat(1.0, lg)
    pc = wp.PathConfig(dt=1.0 / 20, horizon=2.0, n_paths=2, seed=3,
                       antithetic=False, value_stride=1)
    sim = wp.simulate_deflated_income_integral(cfg, lg, hist, pc)
    # reference: step ops with the same chunked noise
    rng = np.random.default_rng(np.random.SeedSequence(entropy=3, spawn_key=(0,)))
    z = rng.standard_normal((2, pc.n_steps))
    for p in range(2):
        state = wp.PathState.create(cfg, lg, w0=0.0, hist=hist, dt=pc.dt)
        acc, prev = 0.0, 1.0  # xi(0) * y(0)
        for i in range(pc.n_steps):
            dW = z[p, i: i + 1] * math.sqrt(pc.dt)
            wp.step_income(cfg, state, dW)
            wp.step_state_price(cfg, state, dW)
            cur = state.xi * state.buffer.current
            acc += 0.5 * (prev + cur) * pc.dt
            prev = cur
        assert sim.per_path["integral"][p] == pytest.approx(acc, rel=1e-11)


# -- determinism ------------------------------------------------------------------


def test_bit_identical_reruns_and_thread_independence():
    cfg = small_config()
    tg, lg = wp.grids_for(cfg, 20)
    tbl = wp.solve_weights(cfg, tg, lg)
    hist = wp.HistoryBuffer.flat(1.0, lg)
    init = wp.StateSnapshot(t=0.0, w=1.0, y_now=1.0, hist=hist)
    pc = wp.PathConfig(dt=tg.dt, horizon=cfg.income.tau_R, n_paths=600, seed=42)
    pol = wp.FeedbackPolicy(cfg, tbl)
    old = numba.get_num_threads()
    try:
        numba.set_num_threads(2)
        a = wp.simulate_lifecycle(cfg, tbl, pol, pc, init)
        numba.set_num_threads(1)
        b = wp.simulate_lifecycle(cfg, tbl, pol, pc, init)
    finally:
        numba.set_num_threads(old)
    assert a.mean == b.mean and a.standard_error == b.standard_error
    assert np.array_equal(a.per_path["utility"], b.per_path["utility"])
    assert np.array_equal(a.per_path["W_final"], b.per_path["W_final"])
    c = wp.simulate_lifecycle(cfg, tbl, pol, pc, init)
    assert np.array_equal(a.per_path["utility"], c.per_path["utility"])


def test_path_prefix_stable_under_n_paths():
    # fixed chunking: path p's draw does not depend on the total path count
    cfg = small_config()
    tg, lg = wp.grids_for(cfg, 20)
    tbl = wp.solve_weights(cfg, tg, lg)
    init = wp.StateSnapshot(t=0.0, w=1.0, y_now=1.0, hist=wp.HistoryBuffer.flat(1.0, lg))
    pol = wp.FeedbackPolicy(cfg, tbl)
    small = wp.simulate_lifecycle(cfg, tbl, pol,
                                  wp.PathConfig(dt=tg.dt, horizon=2.0, n_paths=8, seed=9),
                                  init)
    big = wp.simulate_lifecycle(cfg, tbl, pol,
                                wp.PathConfig(dt=tg.dt, horizon=2.0, n_paths=64, seed=9),
                                init)
    assert np.array_equal(small.per_path["utility"], big.per_path["utility"][:8])


def test_pair_reduce_counts_pairs_as_one_draw():
    vals = np.array([1.0, 3.0, 2.0, 6.0])
    mean, se, n = pair_reduce(vals, antithetic=True)
    assert n == 2 and mean == 3.0
    assert se == pytest.approx(np.std([2.0, 4.0], ddof=1) / math.sqrt(2))
    assert pair_reduce(vals, antithetic=False)[2] == 4


def test_antithetic_requires_even_paths():
    cfg = small_config()
    tg, lg = wp.grids_for(cfg, 20)
    tbl = wp.solve_weights(cfg, tg, lg)
    init = wp.StateSnapshot(t=0.0, w=1.0, y_now=1.0, hist=wp.HistoryBuffer.flat(1.0, lg))
    with pytest.raises(ValueError):
        wp.simulate_lifecycle(cfg, tbl, wp.FeedbackPolicy(cfg, tbl),
                              wp.PathConfig(dt=tg.dt, horizon=2.0, n_paths=7, seed=1),
                              init)


# -- exact total wealth ------------------------------------------------------------


def test_gamma_exact_from_zero_stays_zero():
    cfg = small_config()
    pc = wp.PathConfig(dt=0.05, horizon=4.0, n_paths=64, seed=2)
    sim = wp.simulate_gamma_exact(cfg, pc, gamma0=0.0)
    assert np.all(sim.series["gamma"] == 0.0)


def test_gamma_exact_deterministic_when_kappa_zero():
    cfg = small_config(mu=(0.02,))  # kappa = 0
    pc = wp.PathConfig(dt=0.05, horizon=4.0, n_paths=16, seed=2, antithetic=False)
    sim = wp.simulate_gamma_exact(cfg, pc, gamma0=2.0)
    times = np.arange(pc.n_steps + 1) * pc.dt
    A = gamma_drift_integral(cfg, times)
    for o, t in enumerate(sim.series["t"]):
        expected = 2.0 * math.exp(A[round(t / pc.dt)])
        assert np.allclose(sim.series["gamma"][:, o], expected, rtol=1e-12)


def test_gamma_exact_positive_and_mean_matches():
    cfg = small_config()
    pc = wp.PathConfig(dt=0.02, horizon=4.0, n_paths=4000, seed=12)
    sim = wp.simulate_gamma_exact(cfg, pc, gamma0=1.0)
    assert sim.meta["min_over_paths"] > 0.0
    mean_exact = wp.gamma_exact_mean(cfg, 4.0, 1.0, dt=pc.dt)
    assert abs(sim.mean - mean_exact) <= 3 * sim.standard_error


def test_gamma_exact_mean_extremes():
    cfg = small_config()
    assert wp.gamma_exact_mean(cfg, 0.0, 3.3) == 3.3
    assert wp.gamma_exact_mean(cfg, 1.0, 0.0) == 0.0


# -- closed loop behavior ----------------------------------------------------------


def test_lifecycle_merton_degenerate_income():
    # phi = 0, sigma_y = 0, y = 0: reduces to the Merton wealth dynamics
    cfg = small_config(phi=wp.DelayKernel.zero(), sigma_y=(0.0,))
    tg, lg = wp.grids_for(cfg, 100)
    tbl = wp.solve_weights(cfg, tg, lg)
    init = wp.StateSnapshot(t=0.0, w=2.0, y_now=0.0,
                            hist=wp.HistoryBuffer.flat(0.0, lg))
    pol = wp.FeedbackPolicy(cfg, tbl)
    pc = wp.PathConfig(dt=tg.dt, horizon=cfg.income.tau_R, n_paths=4000, seed=31)
    sim = wp.simulate_lifecycle(cfg, tbl, pol, pc, init)
    mean, se, _ = pair_reduce(sim.per_path["W_final"], pc.antithetic)
    expected = wp.gamma_exact_mean(cfg, cfg.income.tau_R, 2.0, dt=pc.dt)
    assert abs(mean - expected) <= 3 * se + 1e-3 * expected  # 3 SE plus Euler bias room


def test_lifecycle_gamma_mean_matches_exact(cal06):
    tg, lg = wp.grids_for(cal06, 50)
    tbl = wp.solve_weights(cal06, tg, lg)
    hist = wp.HistoryBuffer.flat(1.0, lg)
    init = wp.StateSnapshot(t=0.0, w=1.0, y_now=1.0, hist=hist)
    pol = wp.FeedbackPolicy(cal06, tbl)
    pc = wp.PathConfig(dt=tg.dt, horizon=cal06.income.tau_R, n_paths=4000, seed=8)
    sim = wp.simulate_lifecycle(cal06, tbl, pol, pc, init)
    gamma0 = sim.meta["gamma0"]
    mean, se, _ = pair_reduce(sim.per_path["gamma_final"], pc.antithetic)
    expected = wp.gamma_exact_mean(cal06, cal06.income.tau_R, gamma0, dt=pc.dt)
    assert abs(mean - expected) <= 3 * se + 2e-3 * expected


def test_lifecycle_boundary_strategy_small():
    cfg = small_config()
    tg, lg = wp.grids_for(cfg, 50)
    tbl = wp.solve_weights(cfg, tg, lg)
    hist = wp.HistoryBuffer.flat(1.0, lg)
    hc = wp.human_capital(tbl, 0.0, 1.0, hist)
    init = wp.StateSnapshot(t=0.0, w=-hc, y_now=1.0, hist=hist)
    pol = wp.FeedbackPolicy(cfg, tbl)
    pc = wp.PathConfig(dt=tg.dt, horizon=cfg.income.tau_R, n_paths=64, seed=17)
    sim = wp.simulate_lifecycle(cfg, tbl, pol, pc, init, record=True)
    assert np.all(sim.series["c"] == 0.0)
    assert np.all(sim.series["B"] == 0.0)
    y_scale = sim.meta["y_scale"]
    assert np.abs(sim.series["gamma"]).max() <= 10 * pc.dt * y_scale


def test_admissibility_breach_detected():
    # a wildly overconsuming policy drives total wealth negative in one step
    cfg = small_config()
    tg, lg = wp.grids_for(cfg, 20)
    tbl = wp.solve_weights(cfg, tg, lg)
    init = wp.StateSnapshot(t=0.0, w=1.0, y_now=1.0,
                            hist=wp.HistoryBuffer.flat(1.0, lg))
    greedy = wp.FeedbackPolicy(cfg, tbl, consumption_scale=800.0)
    pc = wp.PathConfig(dt=tg.dt, horizon=2.0, n_paths=8, seed=2)
    with pytest.raises(wp.AdmissibilityBreach):
        wp.simulate_lifecycle(cfg, tbl, greedy, pc, init)


def test_negative_initial_wealth_rejected():
    cfg = small_config()
    tg, lg = wp.grids_for(cfg, 20)
    tbl = wp.solve_weights(cfg, tg, lg)
    init = wp.StateSnapshot(t=0.0, w=-100.0, y_now=1.0,
                            hist=wp.HistoryBuffer.flat(1.0, lg))
    with pytest.raises(wp.InadmissibleState):
        wp.simulate_lifecycle(cfg, tbl, wp.FeedbackPolicy(cfg, tbl),
                              wp.PathConfig(dt=tg.dt, horizon=2.0, n_paths=4, seed=0),
                              init)


def test_dt_mismatch_rejected():
    cfg = small_config()
    tg, lg = wp.grids_for(cfg, 20)
    tbl = wp.solve_weights(cfg, tg, lg)
    init = wp.StateSnapshot(t=0.0, w=1.0, y_now=1.0,
                            hist=wp.HistoryBuffer.flat(1.0, lg))
    with pytest.raises(wp.GridMismatch):
        wp.simulate_lifecycle(cfg, tbl, wp.FeedbackPolicy(cfg, tbl),
                              wp.PathConfig(dt=0.01, horizon=2.0, n_paths=4, seed=0),
                              init)


def test_exact_vs_euler_strong_consistency():
    # shared increments: Euler total wealth converges to the exact lognormal
    cfg = small_config(phi=wp.DelayKernel.constant(0.05), sigma_y=(0.12,))
    rng = np.random.default_rng(40)
    n_paths, Nf = 200, 320
    T = cfg.income.tau_R
    zf = rng.standard_normal((n_paths, int(T * Nf)))
    errs = {}
    for N in (80, 320):
        k = Nf // N
        z = np.ascontiguousarray(zf.reshape(n_paths, -1, k).sum(axis=2) / math.sqrt(k))
        tg, lg = wp.grids_for(cfg, N)
        tbl = wp.solve_weights(cfg, tg, lg)
        hist = wp.HistoryBuffer.flat(1.0, lg)
        init = wp.StateSnapshot(t=0.0, w=1.0, y_now=1.0, hist=hist)
        pol = wp.FeedbackPolicy(cfg, tbl)
        pc = wp.PathConfig(dt=1.0 / N, horizon=T, n_paths=n_paths, seed=1,
                           antithetic=False)
        out = simulate_lifecycle_with_noise(cfg, tbl, pol, pc, init, z)
        exact = gamma_exact_terminal(cfg, T, pol.total_wealth(init), out[:, 7], 1.0 / N)
        errs[N] = np.mean(np.abs(out[:, 1] - exact))
    assert errs[320] <= 0.55 * errs[80]  # strong order >= 0.5 over a 4x refinement


def test_theta_series_formula(cal06):
    tg, lg = wp.grids_for(cal06, 50)
    tbl = wp.solve_weights(cal06, tg, lg)
    init = wp.StateSnapshot(t=0.0, w=1.0, y_now=1.0,
                            hist=wp.HistoryBuffer.flat(1.0, lg))
    pc = wp.PathConfig(dt=tg.dt, horizon=cal06.income.tau_R, n_paths=4, seed=1,
                       antithetic=False)
    sim = wp.simulate_lifecycle(cal06, tbl, wp.FeedbackPolicy(cal06, tbl), pc, init,
                                record=True)
    th = wp.theta_series(cal06, sim)
    assert th.shape == (4, sim.series["t"].size, 1)
    Avec = cal06.derived.kappa[0] / cal06.market.sigma[0, 0]
    Bvec = cal06.income.sigma_y[0] / cal06.market.sigma[0, 0]
    o = 3
    manual = (Avec * sim.series["gamma"][:, o] / cal06.prefs.gamma
              - Bvec * sim.series["g_at_obs"][o] * sim.series["y"][:, o])
    assert np.allclose(th[:, o, 0], manual, rtol=1e-12)


def test_mean_income_path_matches_deterministic_sim():
    cfg = small_config(phi=wp.DelayKernel.constant(0.05), sigma_y=(0.0,))
    _, lg = wp.grids_for(cfg, 50)
    hist = wp.HistoryBuffer.flat(1.0, lg)
    m = mean_income_path(cfg, lg, hist, 100, 1.0 / 50)
    state = wp.PathState.create(cfg, lg, w0=0.0, hist=hist, dt=1.0 / 50)
    for i in range(100):
        wp.step_income(cfg, state, np.zeros(1))
        assert m[i + 1] == pytest.approx(state.buffer.current, rel=1e-13)
