"""Closed-form value function, optimal feedback controls and hedging demands.

All maps are pure functions of the state (t, w, y, history) through the total
wealth Gamma = w + g(t) y + <h(t), history>; the only model inputs are the
solved weight table and the derived scalars.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigMismatch, HypothesisViolated, InadmissibleState
from .params import F_factor, ModelConfig, f_factor, require_hypotheses
from .weights import WeightTable, eval_g, human_capital

NEG_INF = float("-inf")  # boundary sentinel for gamma > 1 (never an overflow artifact)


@dataclass(frozen=True)
class StateSnapshot:
    """State (t, w, x) with x = (current income, trailing income window)."""

    t: float
    w: float
    y_now: float
    hist: object  # HistoryBuffer or array on the table's lag grid

    def __post_init__(self):
        if self.t < 0:
            raise InadmissibleState("t must be >= 0")


@dataclass(frozen=True)
class ControlTriple:
    """Consumption rate, bequest target, risky-asset dollar allocations."""

    c: float
    B: float
    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", np.atleast_1d(np.asarray(self.theta, float)))
        if self.c < 0 or self.B < 0:
            raise InadmissibleState("consumption and bequest must be nonnegative")


@dataclass(frozen=True)
class FeedbackPolicy:
    """Optimal feedback map bound to a configuration and a solved table.

    mode selects the retirement indicator handling: 'unified' switches at
    tau_R (closed there), 'pre_retirement' forces the working-life map,
    'post_retirement' forces the Merton map (state reduces to w).
    consumption_scale != 1 yields the deliberately suboptimal probe policy.
    """

    cfg: ModelConfig
    table: WeightTable
    mode: str = "unified"
    consumption_scale: float = 1.0

    def __post_init__(self):
        if self.mode not in ("unified", "pre_retirement", "post_retirement"):
            raise ValueError(f"unknown policy mode {self.mode!r}")
        if abs(self.table.tau_R - self.cfg.income.tau_R) > 1e-9 * max(self.cfg.income.tau_R, 1.0):
            raise ConfigMismatch("weight table horizon does not match the configuration")

    # -- state functionals ------------------------------------------------

    def retired(self, t: float) -> bool:
        if self.mode == "post_retirement":
            return True
        if self.mode == "pre_retirement":
            return False
        return t >= self.cfg.income.tau_R

    def total_wealth(self, s: StateSnapshot) -> float:
        """Gamma(t, w, x) = w + g(t) x0 + <h(t), x1>; just w from tau_R on."""
        if self.retired(s.t) or s.t >= self.cfg.income.tau_R:
            return s.w
        return s.w + human_capital(self.table, s.t, s.y_now, s.hist)

    def feedback_controls(self, s: StateSnapshot, atol: float = 1e-9) -> ControlTriple:
        """Optimal (c, B, theta) at the state; the unique admissible one at Gamma = 0.

        Raises:
            InadmissibleState: if Gamma < -atol * scale.
        """
        cfg = self.cfg
        ds = cfg.derived
        gamma_tw = self.total_wealth(s)
        scale = max(abs(s.w), abs(s.y_now), 1.0)
        if gamma_tw < -atol * scale:
            raise InadmissibleState(f"total wealth {gamma_tw:.6g} < 0")
        gamma_tw = max(gamma_tw, 0.0)
        ft = f_factor(cfg, s.t)
        kswitch = cfg.prefs.K ** (-ds.b) if self.retired(s.t) else 1.0
        c = self.consumption_scale * kswitch * gamma_tw / ft
        B = (cfg.prefs.k ** (-ds.b)) * gamma_tw / ft
        g_t = 0.0 if self.retired(s.t) else float(eval_g(self.table, s.t))
        rhs = ds.kappa * (gamma_tw / cfg.prefs.gamma) - cfg.income.sigma_y * (g_t * s.y_now)
        theta = np.linalg.solve(cfg.market.sigma.T, rhs)
        return ControlTriple(c=c, B=B, theta=theta)

    def value_function(self, s: StateSnapshot) -> float:
        """V = F(t)^gamma Gamma^(1-gamma) / (1-gamma); boundary values at Gamma = 0.

        Returns 0 at the boundary for gamma in (0,1) and the -inf sentinel for
        gamma > 1; consumers must branch on it.

        Raises:
            HypothesisViolated: if the finiteness condition fails.
            InadmissibleState: if Gamma < 0.
        """
        require_hypotheses(self.cfg)
        gamma = self.cfg.prefs.gamma
        gamma_tw = self.total_wealth(s)
        scale = max(abs(s.w), abs(s.y_now), 1.0)
        if gamma_tw < -1e-9 * scale:
            raise InadmissibleState(f"total wealth {gamma_tw:.6g} < 0")
        if gamma_tw <= 0.0:
            return 0.0 if gamma < 1.0 else NEG_INF
        Ft = F_factor(self.cfg, s.t)
        return Ft ** gamma * gamma_tw ** (1.0 - gamma) / (1.0 - gamma)


def total_wealth(cfg: ModelConfig, tbl: WeightTable, s: StateSnapshot) -> float:
    return FeedbackPolicy(cfg, tbl).total_wealth(s)


def feedback_controls(cfg: ModelConfig, tbl: WeightTable, s: StateSnapshot) -> ControlTriple:
    return FeedbackPolicy(cfg, tbl).feedback_controls(s)


def value_function(cfg: ModelConfig, tbl: WeightTable, s: StateSnapshot) -> float:
    return FeedbackPolicy(cfg, tbl).value_function(s)


def hedging_demand_delta(cfg: ModelConfig, s: StateSnapshot,
                         tbl_phi: WeightTable, tbl_zero: WeightTable) -> np.ndarray:
    """Allocation difference between the delayed and the no-delay feedback maps.

    Equals (sigma')^-1 [ (kappa/gamma - sigma_y) (g - g_nodelay)(t) y_now
    + (kappa/gamma) <h(t), hist> ], using the no-delay table's own discrete
    annuity so the identity with two feedback_controls calls is exact.

    Raises:
        ConfigMismatch: if the two tables differ in anything but phi.
    """
    _check_pair(tbl_phi, tbl_zero)
    ds = cfg.derived
    if s.t >= tbl_phi.tau_R:
        return np.zeros(cfg.n)
    g2 = float(eval_g(tbl_phi, s.t)) - float(eval_g(tbl_zero, s.t))
    row = tbl_phi.row_at_time(s.t)
    w = tbl_phi.lg.trapezoid_weights()
    hpart = float(np.sum(w * row * _hist_values(s.hist))) * tbl_phi.lg.dz
    kg = ds.kappa / cfg.prefs.gamma
    rhs = (kg - cfg.income.sigma_y) * (g2 * s.y_now) + kg * hpart
    return np.linalg.solve(cfg.market.sigma.T, rhs)


def _hist_values(hist) -> np.ndarray:
    if hasattr(hist, "values_in_lag_order"):
        return np.asarray(hist.values_in_lag_order(), float)
    return np.asarray(hist, dtype=float)


def _check_pair(tbl_phi: WeightTable, tbl_zero: WeightTable) -> None:
    same = (
        tbl_phi.tg == tbl_zero.tg
        and tbl_phi.lg == tbl_zero.lg
        and abs(tbl_phi.beta - tbl_zero.beta) < 1e-12 * max(abs(tbl_phi.beta), 1.0)
        and abs(tbl_phi.r_plus_delta - tbl_zero.r_plus_delta) < 1e-12
    )
    if not same:
        raise ConfigMismatch("tables differ in grid or non-phi parameters")
    if np.any(tbl_zero.phi_grid != 0.0):
        raise ConfigMismatch("second table must be solved with phi = 0")


def merton_fractions(cfg: ModelConfig):
    """Post-retirement constant fractions of financial wealth: (c, B, theta).

    Raises:
        HypothesisViolated: if nu <= 0.
    """
    require_hypotheses(cfg)
    ds = cfg.derived
    c_frac = cfg.prefs.K ** (-ds.b) / ds.eta_hat
    b_frac = cfg.prefs.k ** (-ds.b) / ds.eta_hat
    theta_frac = np.linalg.solve(cfg.market.sigma.T, ds.kappa) / cfg.prefs.gamma
    return c_frac, b_frac, theta_frac
