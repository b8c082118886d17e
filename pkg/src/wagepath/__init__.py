"""Lifecycle portfolio/consumption/bequest engine with path-dependent wages.

Closed-form optimal policy for an agent whose labor income adjusts to market
shocks with a distributed delay, retiring at a finite date; every closed form
is backed by independent Monte Carlo and residual oracles in ``validate``.
"""

__version__ = "0.1.0"

from .errors import (AdmissibilityBreach, BoundaryViolation, ConfigError,
                     ConfigMismatch, GridMismatch, HypothesisViolated,
                     InadmissibleState, NoConvergence, OutOfRange, SingularSigma,
                     WagepathError)
from .params import (DelayKernel, DerivedScalars, F_factor, IncomeParams,
                     MarketParams, ModelConfig, PreferenceParams,
                     ValidationReport, derive_scalars, f_factor,
                     validate_hypotheses)
from .policy import (ControlTriple, FeedbackPolicy, StateSnapshot,
                     feedback_controls, hedging_demand_delta, merton_fractions,
                     total_wealth, value_function)
from .simulate import (HistoryBuffer, PathConfig, PathState, SimOutput,
                       gamma_exact_mean, simulate_deflated_income_integral,
                       simulate_gamma_exact, simulate_lifecycle, step_income,
                       step_state_price, step_wealth, theta_series)
from .validate import (OracleReport, check_gamma_substitution,
                       check_hjb_scalar_identity, check_merton_limit,
                       oracle_human_capital, oracle_value_consistency, run_suite)
from .weights import (LagGrid, ResidualReport, TimeGrid, WeightTable,
                      adjoint_apply, aligned_grids, decompose_g, eval_g, eval_h,
                      grids_for, human_capital, residual_check, solve_weights,
                      write_weights_csv)

__all__ = [name for name in dir() if not name.startswith("_")]
