"""Independent oracles verifying the closed forms.

Each oracle is deliberately independent of the code path it checks: the
human-capital oracle only simulates the raw income/deflator pair, the
policy-evaluation oracle only drives the simulator with the feedback map, and
the scalar identities evaluate analytic derivatives. Monte Carlo checks pass
at |z| <= 3 standard errors; deterministic identities carry their tolerance
as an equivalent standard error (tolerance / 3), so the pass rule is uniform.

Perturbation probes run deliberately broken inputs and count as passed only
when the underlying check fails, guarding against vacuous passes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import HypothesisViolated
from .params import ModelConfig, f_factor, validate_hypotheses
from .policy import FeedbackPolicy, StateSnapshot
from .simulate import (HistoryBuffer, PathConfig, gamma_exact_mean, pair_reduce,
                       simulate_deflated_income_integral, simulate_gamma_exact,
                       simulate_lifecycle)
from .weights import LagGrid, WeightTable, eval_g, human_capital

_SE_FLOOR_REL = 1e-12


@dataclass
class OracleReport:
    """Outcome of one check.

    kind 'oracle': passed iff |closed_form - estimate| <= 3 SE.
    kind 'probe' : passed iff the deliberately broken input was detected.
    """

    name: str
    closed_form_value: float
    mc_estimate: float
    standard_error: float
    z_score: float
    passed: bool
    runtime: float
    seed: Optional[int] = None
    kind: str = "oracle"
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "closed_form_value": self.closed_form_value,
            "mc_estimate": self.mc_estimate,
            "standard_error": self.standard_error,
            "z_score": self.z_score,
            "pass": self.passed,
            "runtime_seconds": self.runtime,
            "seed": self.seed,
            **{f"extra_{k}": v for k, v in self.extras.items()},
        }

    def __str__(self):
        tag = "PASS" if self.passed else "FAIL"
        return (f"[{tag}] {self.name}: closed={self.closed_form_value:.8g} "
                f"estimate={self.mc_estimate:.8g} se={self.standard_error:.3g} "
                f"z={self.z_score:+.3f} ({self.runtime:.2f}s)")


def _report(name, closed, est, se, t0, seed=None, kind="oracle", **extras):
    se_eff = max(se, _SE_FLOOR_REL * max(abs(closed), 1.0))
    z = (est - closed) / se_eff
    return OracleReport(name=name, closed_form_value=closed, mc_estimate=est,
                        standard_error=se, z_score=z, passed=abs(z) <= 3.0,
                        runtime=time.perf_counter() - t0, seed=seed, kind=kind,
                        extras=extras)


# ---------------------------------------------------------------------------
# Monte Carlo oracles
# ---------------------------------------------------------------------------


def oracle_human_capital(cfg: ModelConfig, tbl: WeightTable,
                         initial: StateSnapshot, pc: PathConfig) -> OracleReport:
    """E[int_0^tau_R xi y du] vs g(0) y0 + <h(0), x1> at the t = 0 snapshot."""
    t0 = time.perf_counter()
    if initial.t != 0.0:
        raise ValueError("human-capital oracle runs from t = 0")
    hist = initial.hist if isinstance(initial.hist, HistoryBuffer) \
        else HistoryBuffer.from_array(initial.hist, tbl.lg)
    closed = human_capital(tbl, 0.0, initial.y_now, hist)
    sim = simulate_deflated_income_integral(cfg, tbl.lg, hist, pc)
    return _report("human_capital_identity", closed, sim.mean, sim.standard_error,
                   t0, seed=pc.seed, n_paths=pc.n_paths, dt=pc.dt,
                   neg_income_steps=sim.meta["neg_income_steps"])


def _terminal_value(cfg: ModelConfig, w_ret: np.ndarray) -> np.ndarray:
    """Discounted post-retirement continuation e^{-(rho+delta) tau_R}
    eta_hat^gamma W^{1-gamma} / (1-gamma), with the boundary convention at W <= 0."""
    gamma = cfg.prefs.gamma
    disc = math.exp(-(cfg.prefs.rho + cfg.market.delta) * cfg.income.tau_R)
    coef = disc * cfg.derived.eta_hat ** gamma / (1.0 - gamma)
    out = np.where(w_ret > 0.0, coef * np.where(w_ret > 0.0, w_ret, 1.0) ** (1.0 - gamma), 0.0)
    if gamma > 1.0:
        out = np.where(w_ret > 0.0, out, -np.inf)
    return out


def oracle_value_consistency(cfg: ModelConfig, tbl: WeightTable,
                             initial: StateSnapshot, pc: PathConfig,
                             consumption_scale: float = 1.0) -> OracleReport:
    """Monte Carlo policy evaluation of the feedback strategy vs V(0, w, x).

    With consumption_scale != 1 this is the suboptimality probe: the estimate
    must then fall below the closed-form value by more than 3 SE.
    """
    t0 = time.perf_counter()
    policy = FeedbackPolicy(cfg, tbl, consumption_scale=consumption_scale)
    ref = FeedbackPolicy(cfg, tbl)
    v_closed = ref.value_function(initial)
    run_pc = PathConfig(dt=pc.dt, horizon=cfg.income.tau_R, n_paths=pc.n_paths,
                        seed=pc.seed, antithetic=pc.antithetic,
                        obs_stride=pc.obs_stride, value_stride=pc.value_stride)
    sim = simulate_lifecycle(cfg, tbl, policy, run_pc, initial)
    j = sim.per_path["utility"] + _terminal_value(cfg, sim.per_path["W_ret"])
    mean, se, _ = pair_reduce(j, run_pc.antithetic)
    if consumption_scale == 1.0:
        return _report("value_consistency", v_closed, mean, se, t0, seed=pc.seed,
                       n_paths=pc.n_paths, dt=pc.dt, gamma=cfg.prefs.gamma)
    gap = v_closed - mean
    detected = gap > 3.0 * se
    rep = _report("value_suboptimal_probe", v_closed, mean, se, t0, seed=pc.seed,
                  kind="probe", consumption_scale=consumption_scale,
                  gap=gap, gap_over_se=gap / max(se, 1e-300))
    rep.passed = bool(detected)
    return rep


def oracle_gamma_mean(cfg: ModelConfig, pc: PathConfig, gamma0: float,
                      at: Sequence[float]) -> OracleReport:
    """Sample mean of exact total-wealth paths vs the analytic expectation."""
    t0 = time.perf_counter()
    sim = simulate_gamma_exact(cfg, pc, gamma0, obs_times=at)
    worst_z = 0.0
    worst = (0.0, 0.0, 0.0)
    for o, t in enumerate(sim.series["t"]):
        mean, se, _ = pair_reduce(sim.series["gamma"][:, o], pc.antithetic)
        closed = gamma_exact_mean(cfg, float(t), gamma0, dt=pc.dt)
        z = (mean - closed) / max(se, _SE_FLOOR_REL * max(abs(closed), 1.0))
        if abs(z) >= abs(worst_z):
            worst_z = z
            worst = (closed, mean, se)
    rep = _report("total_wealth_mean", worst[0], worst[1], worst[2], t0, seed=pc.seed,
                  min_over_paths=sim.meta["min_over_paths"], times=list(map(float, at)))
    rep.z_score = worst_z
    rep.passed = abs(worst_z) <= 3.0
    return rep


# ---------------------------------------------------------------------------
# Deterministic identities
# ---------------------------------------------------------------------------


def check_hjb_scalar_identity(cfg: ModelConfig, n_samples: int = 1000,
                              seed: int = 0, eta_scale: float = 1.0) -> float:
    """Max residual of the scalar identity solved by F over random t in [0, tau_R].

    gamma/(1-gamma) F'/F + (r+delta)
      + gamma/(1-gamma) e^{-(rho+delta)t/gamma} F^{-1} (1 + delta k^{-b})
      + kappa'kappa/(2 gamma)

    eta_scale != 1 perturbs eta (probe: the residual must blow past 1e-4).
    """
    ds = cfg.derived
    if not (ds.nu > 0):
        raise HypothesisViolated("HJB identity requires nu > 0")
    gamma = cfg.prefs.gamma
    rho_d = cfg.prefs.rho + cfg.market.delta
    eta = ds.eta * eta_scale
    rng = np.random.default_rng(seed)
    t = np.concatenate([[0.0, cfg.income.tau_R], rng.uniform(0.0, cfg.income.tau_R, n_samples)])
    f = (ds.eta_hat - eta) * np.exp(-(cfg.income.tau_R - t) / ds.nu) + eta
    fp = (f - eta) / ds.nu
    disc = np.exp(-rho_d * t / gamma)
    F = disc * f
    Fp = disc * (fp - rho_d / gamma * f)
    g1g = gamma / (1.0 - gamma)
    resid = (g1g * Fp / F + cfg.r_plus_delta
             + g1g * disc / F * (1.0 + cfg.market.delta * cfg.prefs.k ** (-ds.b))
             + ds.kappa_sq / (2.0 * gamma))
    return float(np.max(np.abs(resid)))


def random_states(cfg: ModelConfig, tbl: WeightTable, n: int, seed: int,
                  allow_boundary: bool = True):
    """Random admissible snapshots with lognormal-ish histories (test fodder)."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        t = float(rng.uniform(0.0, cfg.income.tau_R))
        y = float(rng.lognormal(0.0, 0.4))
        hist_vals = y * np.exp(rng.normal(0.0, 0.2, tbl.lg.n_z + 1).cumsum()[::-1] * 0.05)
        hist_vals[-1] = y
        hist = HistoryBuffer.from_array(hist_vals, tbl.lg)
        if allow_boundary and i % 7 == 0:
            hc = human_capital(tbl, t, y, hist)
            w = -hc  # boundary state: Gamma = 0
        else:
            w = float(rng.uniform(0.0, 5.0))
        out.append(StateSnapshot(t=t, w=w, y_now=y, hist=hist))
    return out


def check_gamma_substitution(cfg: ModelConfig, tbl: WeightTable,
                             n_samples: int = 1000, seed: int = 0) -> float:
    """Max relative residual of theta'sigma + g y sigma_y' = (Gamma/gamma) kappa'.

    This is the identity behind the optimal-total-wealth diffusion coefficient
    (1/gamma) kappa'.
    """
    policy = FeedbackPolicy(cfg, tbl)
    worst = 0.0
    for s in random_states(cfg, tbl, n_samples, seed):
        ctrl = policy.feedback_controls(s)
        gamma_tw = policy.total_wealth(s)
        g_t = float(eval_g(tbl, s.t))
        lhs = ctrl.theta @ cfg.market.sigma + cfg.income.sigma_y * (g_t * s.y_now)
        rhs = cfg.derived.kappa * (max(gamma_tw, 0.0) / cfg.prefs.gamma)
        scale = max(float(np.max(np.abs(rhs))),
                    float(np.max(np.abs(cfg.income.sigma_y * g_t * s.y_now))), 1.0)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))) / scale)
    return worst


def check_merton_limit(cfg: ModelConfig, tbl: WeightTable, seed: int = 0) -> OracleReport:
    """Post-retirement value is the Merton form, independent of x; pre-retirement
    value depends on the state only through (t, Gamma)."""
    t0 = time.perf_counter()
    policy = FeedbackPolicy(cfg, tbl)
    ds = cfg.derived
    gamma = cfg.prefs.gamma
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t_past in (cfg.income.tau_R, cfg.income.tau_R + 1.0, 2.0 * cfg.income.tau_R):
        for w in (0.5, 3.0, 10.0):
            vals = []
            for _ in range(2):  # two different histories, same w
                hist = HistoryBuffer.from_array(rng.lognormal(0, 0.3, tbl.lg.n_z + 1), tbl.lg)
                vals.append(policy.value_function(
                    StateSnapshot(t=t_past, w=w, y_now=float(rng.lognormal()), hist=hist)))
            merton = (math.exp(-(cfg.prefs.rho + cfg.market.delta) * t_past)
                      * ds.eta_hat ** gamma * w ** (1.0 - gamma) / (1.0 - gamma))
            scale = max(abs(merton), 1e-30)
            worst = max(worst, abs(vals[0] - vals[1]) / scale,
                        abs(vals[0] - merton) / scale)
    # pre-retirement: shifting wealth against human capital at fixed Gamma
    for s in random_states(cfg, tbl, 25, seed + 1, allow_boundary=False):
        hc = human_capital(tbl, s.t, s.y_now, s.hist)
        v1 = policy.value_function(s)
        zero_hist = HistoryBuffer.from_array(np.zeros(tbl.lg.n_z + 1), tbl.lg)
        v2 = policy.value_function(StateSnapshot(t=s.t, w=s.w + hc, y_now=0.0, hist=zero_hist))
        worst = max(worst, abs(v1 - v2) / max(abs(v1), 1e-30))
    tol = 1e-10
    return _report("merton_limit", 0.0, worst, tol / 3.0, t0, seed=seed, tolerance=tol)


def deterministic_value_quadrature(cfg: ModelConfig, gamma0: float,
                                   dt: float = 1e-3) -> float:
    """J for the fully deterministic case (kappa = 0, sigma_y = 0) by quadrature.

    The total wealth then follows Gamma' = a(t) Gamma exactly; the objective is
    integrated by trapezoid and closed with the retirement continuation value.
    Independent of the simulator and of the closed-form V.
    """
    ds = cfg.derived
    gamma = cfg.prefs.gamma
    n = round(cfg.income.tau_R / dt)
    times = np.linspace(0.0, cfg.income.tau_R, n + 1)
    from .simulate import gamma_drift_integral

    G = gamma0 * np.exp(gamma_drift_integral(cfg, times))
    f = f_factor(cfg, times)
    c = G / f
    B = cfg.prefs.k ** (-ds.b) * G / f
    disc = np.exp(-(cfg.prefs.rho + cfg.market.delta) * times)
    integrand = disc * (c ** (1.0 - gamma)
                        + cfg.market.delta * (cfg.prefs.k * B) ** (1.0 - gamma)) / (1.0 - gamma)
    J = float(np.trapezoid(integrand, dx=dt))
    w_ret = G[-1]  # g and h vanish at tau_R
    J += float(disc[-1] * ds.eta_hat ** gamma * w_ret ** (1.0 - gamma) / (1.0 - gamma))
    return J


# ---------------------------------------------------------------------------
# Suite runner
# ---------------------------------------------------------------------------

SUITES = ("hypotheses", "hjb", "substitution", "merton", "gamma", "human-capital",
          "value", "bias")
FAST_SUITES = ("hypotheses", "hjb", "substitution", "merton")


TABLE_FREE_SUITES = frozenset({"hypotheses", "hjb", "gamma"})


def run_suite(cfg: ModelConfig, tbl: Optional[WeightTable], suites: Sequence[str],
              n_paths: int = 20_000, seed: int = 20240801,
              initial: Optional[StateSnapshot] = None) -> list:
    """Run the selected oracle suites; returns OracleReports in run order.

    tbl may be None when only table-free suites (hypotheses, hjb, gamma) run.
    """
    reports = []
    chosen = set(suites)
    if "all" in chosen:
        chosen = set(SUITES)
    if "fast" in chosen:
        chosen.update(FAST_SUITES)
        chosen.discard("fast")
    unknown = chosen - set(SUITES)
    if unknown:
        raise ValueError(f"unknown suites: {sorted(unknown)}")
    if tbl is None and chosen - TABLE_FREE_SUITES:
        raise ValueError(f"suites {sorted(chosen - TABLE_FREE_SUITES)} need a solved table")

    if initial is None and tbl is not None:
        hist = HistoryBuffer.flat(1.0, tbl.lg)
        initial = StateSnapshot(t=0.0, w=1.0, y_now=1.0, hist=hist)

    if "hypotheses" in chosen:
        t0 = time.perf_counter()
        rep = validate_hypotheses(cfg)
        r = _report("hypotheses", 1.0, 1.0 if rep.ok else 0.0, 0.0, t0,
                    nu=rep.nu, beta=rep.beta, denominator=rep.denominator)
        r.passed = rep.ok
        reports.append(r)

    if "hjb" in chosen:
        t0 = time.perf_counter()
        res = check_hjb_scalar_identity(cfg, 1000, seed)
        r = _report("hjb_scalar_identity", 0.0, res, 1e-10 / 3.0, t0, seed=seed,
                    tolerance=1e-10)
        reports.append(r)
        t0 = time.perf_counter()
        res_p = check_hjb_scalar_identity(cfg, 1000, seed, eta_scale=1.01)
        probe = _report("hjb_identity_probe", 0.0, res_p, 0.0, t0, seed=seed, kind="probe",
                        threshold=1e-4)
        probe.passed = res_p > 1e-4
        reports.append(probe)

    if "substitution" in chosen:
        t0 = time.perf_counter()
        res = check_gamma_substitution(cfg, tbl, 1000, seed)
        reports.append(_report("gamma_substitution_identity", 0.0, res, 1e-12 / 3.0,
                               t0, seed=seed, tolerance=1e-12))

    if "merton" in chosen:
        reports.append(check_merton_limit(cfg, tbl, seed))

    if "gamma" in chosen:
        dt_g = max(tbl.tg.dt, 1 / 250) if tbl is not None else 1 / 250
        pc = PathConfig(dt=dt_g, horizon=2.0 * cfg.income.tau_R,
                        n_paths=min(n_paths, 10_000), seed=seed, antithetic=False)
        at = [cfg.income.tau_R / 2, cfg.income.tau_R, 2 * cfg.income.tau_R]
        reports.append(oracle_gamma_mean(cfg, pc, gamma0=1.0, at=at))

    if "human-capital" in chosen:
        pc = PathConfig(dt=tbl.tg.dt, horizon=cfg.income.tau_R, n_paths=n_paths,
                        seed=seed, antithetic=True)
        reports.append(oracle_human_capital(cfg, tbl, initial, pc))

    if "value" in chosen:
        pc = PathConfig(dt=tbl.tg.dt, horizon=cfg.income.tau_R, n_paths=n_paths,
                        seed=seed + 1, antithetic=True)
        reports.append(oracle_value_consistency(cfg, tbl, initial, pc))
        reports.append(oracle_value_consistency(cfg, tbl, initial, pc,
                                                consumption_scale=1.2))

    if "bias" in chosen:
        # Euler bias vs Monte Carlo band: the estimate must not move by more
        # than the combined band when the step is halved.
        t0 = time.perf_counter()
        hist = initial.hist if isinstance(initial.hist, HistoryBuffer) \
            else HistoryBuffer.from_array(initial.hist, tbl.lg)
        n_b = min(n_paths, 20_000)
        pc1 = PathConfig(dt=tbl.tg.dt, horizon=cfg.income.tau_R, n_paths=n_b,
                         seed=seed + 2, antithetic=True)
        s1 = simulate_deflated_income_integral(cfg, tbl.lg, hist, pc1)
        lg2 = LagGrid(n_z=2 * tbl.lg.n_z, dz=tbl.lg.dz / 2.0)
        hist2 = HistoryBuffer.from_array(
            np.interp(lg2.points(), tbl.lg.points(), hist.values_in_lag_order()), lg2)
        pc2 = PathConfig(dt=tbl.tg.dt / 2.0, horizon=cfg.income.tau_R, n_paths=n_b,
                         seed=seed + 3, antithetic=True)
        s2 = simulate_deflated_income_integral(cfg, lg2, hist2, pc2)
        se = math.hypot(s1.standard_error, s2.standard_error)
        r = _report("euler_bias_vs_band", s2.mean, s1.mean, se, t0, seed=seed,
                    dt_coarse=pc1.dt, dt_fine=pc2.dt)
        reports.append(r)

    return reports
