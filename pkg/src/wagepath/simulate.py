"""Monte Carlo engine.

Euler-Maruyama for the delayed income equation and for wealth under arbitrary
controls; exact lognormal updates for the state-price density and for the
optimal total-wealth process. The per-step reference operations
(step_income / step_wealth / step_state_price) define the scheme; the numba
kernels in ``_kernels`` replicate them for throughput and are pinned to the
reference by tests.

Reproducibility contract: identical (seed, PathConfig, ModelConfig) produce
bit-identical output for any worker/thread count. Noise is generated in fixed
chunks whose streams derive from SeedSequence(seed, spawn_key=(chunk,)), and
all reductions run in path order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .errors import AdmissibilityBreach, GridMismatch, InadmissibleState
from .params import ModelConfig, f_factor
from .policy import ControlTriple, FeedbackPolicy, StateSnapshot
from .weights import LagGrid, WeightTable

CHUNK_ROWS = 512  # fixed: part of the reproducibility contract


# ---------------------------------------------------------------------------
# History buffer
# ---------------------------------------------------------------------------


class HistoryBuffer:
    """Circular buffer of income samples on the lag grid over [t-d, t].

    Logical order is oldest (lag -d) to newest (lag 0); pushing drops the
    oldest sample. With dt == dz, reading lag -m dz returns the value recorded
    exactly m steps ago.
    """

    def __init__(self, values: Sequence[float], dz: float):
        vals = np.asarray(values, dtype=float).copy()
        if vals.ndim != 1 or vals.size < 2:
            raise GridMismatch("history needs at least two samples (lags -d and 0)")
        self._vals = vals
        self._head = 0
        self.dz = float(dz)

    @classmethod
    def flat(cls, level: float, lg: LagGrid) -> "HistoryBuffer":
        return cls(np.full(lg.n_z + 1, float(level)), lg.dz)

    @classmethod
    def from_array(cls, values, lg: LagGrid) -> "HistoryBuffer":
        vals = np.asarray(values, dtype=float)
        if vals.shape[0] != lg.n_z + 1:
            raise GridMismatch(f"history needs {lg.n_z + 1} samples on this lag grid")
        return cls(vals, lg.dz)

    @classmethod
    def from_callable(cls, fn, lg: LagGrid) -> "HistoryBuffer":
        return cls(np.asarray([fn(z) for z in lg.points()], dtype=float), lg.dz)

    @property
    def n_z(self) -> int:
        return self._vals.size - 1

    @property
    def current(self) -> float:
        """Income at lag 0."""
        return float(self._vals[(self._head + self.n_z) % self._vals.size])

    def read_lag_steps(self, m: int) -> float:
        """Income recorded m steps ago (lag -m dz)."""
        if not 0 <= m <= self.n_z:
            raise GridMismatch(f"lag {m} steps outside the window")
        return float(self._vals[(self._head + self.n_z - m) % self._vals.size])

    def values_in_lag_order(self) -> np.ndarray:
        """Window as an array indexed by lag node, oldest first."""
        n = self._vals.size
        idx = (self._head + np.arange(n)) % n
        return self._vals[idx]

    def push(self, y_new: float) -> None:
        self._vals[self._head] = float(y_new)
        self._head = (self._head + 1) % self._vals.size

    def trapezoid_sum(self) -> float:
        """dz-weighted trapezoid of the window (used by the constant-kernel drift)."""
        v = self.values_in_lag_order()
        return float(np.trapezoid(v, dx=self.dz))

    def copy(self) -> "HistoryBuffer":
        out = HistoryBuffer(self.values_in_lag_order(), self.dz)
        return out


# ---------------------------------------------------------------------------
# Path configuration and state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathConfig:
    """Simulation run settings.

    obs_stride and value_stride are in steps: observables (state-recomputed
    total wealth, recorded series) are taken every obs_stride steps; the
    transcendental integrands (xi * y, utility) are sampled every value_stride
    steps with trapezoid weights. Both default to sane values for the dt.
    """

    dt: float
    horizon: float
    n_paths: int
    seed: int
    antithetic: bool = True
    obs_stride: Optional[int] = None
    value_stride: Optional[int] = None

    def __post_init__(self):
        if self.dt <= 0 or self.horizon <= 0 or self.n_paths < 1:
            raise ValueError("dt, horizon and n_paths must be positive")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")

    @property
    def n_steps(self) -> int:
        n = round(self.horizon / self.dt)
        if abs(n * self.dt - self.horizon) > 1e-9 * max(self.horizon, 1.0):
            raise GridMismatch("horizon must be a whole number of steps")
        return n

    def default_obs_stride(self) -> int:
        return self.obs_stride or max(1, round(0.25 / self.dt))

    def default_value_stride(self, n_ret: int) -> int:
        if self.value_stride:
            s = self.value_stride
        else:
            s = min(10, max(1, round(0.02 / self.dt)))
        while n_ret % s:
            s -= 1
        return max(s, 1)


@dataclass
class PathState:
    """Mutable per-path state for the reference step operations."""

    t: float
    W: float
    buffer: HistoryBuffer
    xi: float
    dt: float
    phi_grid: np.ndarray

    @classmethod
    def create(cls, cfg: ModelConfig, lg: LagGrid, w0: float, hist: HistoryBuffer,
               dt: float, xi: float = 1.0) -> "PathState":
        phi_grid = cfg.income.phi.on_grid(lg.points(), lg.dz)
        return cls(t=0.0, W=float(w0), buffer=hist.copy(), xi=float(xi),
                   dt=float(dt), phi_grid=phi_grid)

    @property
    def y(self) -> float:
        return self.buffer.current


def income_drift_integral(state: PathState) -> float:
    """Trapezoid of phi(zeta) y(t + zeta) over the trailing window."""
    w = np.ones(state.phi_grid.shape[0])
    w[0] = w[-1] = 0.5
    vals = state.buffer.values_in_lag_order()
    return float(np.sum(w * state.phi_grid * vals)) * state.buffer.dz


def step_income(cfg: ModelConfig, state: PathState, dW: np.ndarray) -> float:
    """Euler step of the delayed income equation; rotates the buffer.

    dW components have variance dt. Income may go negative on extreme draws;
    it is recorded, not clamped.
    """
    y = state.buffer.current
    integ = income_drift_integral(state)
    dvol = float(cfg.income.sigma_y @ np.atleast_1d(dW))
    y_new = y + (y * cfg.income.mu_y + integ) * state.dt + y * dvol
    state.buffer.push(y_new)
    return y_new


def step_wealth(cfg: ModelConfig, state: PathState, controls: ControlTriple,
                dW: np.ndarray) -> float:
    """Euler step of wealth under the given controls (pre-death dynamics)."""
    dW = np.atleast_1d(dW)
    excess = cfg.market.mu - cfg.market.r
    retired = state.t >= cfg.income.tau_R
    inc = 0.0 if retired else state.buffer.current
    drift = (cfg.r_plus_delta * state.W + float(controls.theta @ excess) + inc
             - controls.c - cfg.market.delta * controls.B)
    diff = float(controls.theta @ (cfg.market.sigma @ dW))
    state.W = state.W + drift * state.dt + diff
    return state.W


def step_state_price(cfg: ModelConfig, state: PathState, dW: np.ndarray) -> float:
    """Exact lognormal update of the state-price density (always positive)."""
    dW = np.atleast_1d(dW)
    k2 = cfg.derived.kappa_sq
    state.xi *= math.exp(-(cfg.r_plus_delta + 0.5 * k2) * state.dt
                         - float(cfg.derived.kappa @ dW))
    return state.xi


def advance(cfg: ModelConfig, state: PathState, controls: ControlTriple,
            dW: np.ndarray) -> None:
    """One full step in the reference order: wealth and income read the
    start-of-step state, then the clock moves."""
    step_wealth(cfg, state, controls, dW)
    step_income(cfg, state, dW)
    step_state_price(cfg, state, dW)
    state.t += state.dt


# ---------------------------------------------------------------------------
# Output container and reductions
# ---------------------------------------------------------------------------


@dataclass
class SimOutput:
    """Aggregated Monte Carlo results with reproducibility metadata."""

    mean: float
    standard_error: float
    n_paths: int
    n_draws: int            # antithetic pairs counted as one draw
    seed: int
    meta: dict = field(default_factory=dict)
    per_path: dict = field(default_factory=dict)
    series: Optional[dict] = None

    def summary_lines(self):
        lines = [
            f"mean = {self.mean:.10g}",
            f"standard_error = {self.standard_error:.6g}",
            f"n_paths = {self.n_paths}",
            f"n_draws = {self.n_draws}",
            f"seed = {self.seed}",
        ]
        lines += [f"{k} = {v}" for k, v in sorted(self.meta.items())]
        return lines


def pair_reduce(values: np.ndarray, antithetic: bool):
    """Mean and standard error, counting antithetic pairs as one draw.

    Infinite values (the gamma > 1 boundary) propagate to the mean; the
    standard error is then meaningless and reported as nan.
    """
    vals = np.asarray(values, dtype=float)
    if antithetic:
        vals = 0.5 * (vals[0::2] + vals[1::2])
    n = vals.shape[0]
    with np.errstate(invalid="ignore"):
        mean = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return mean, se, n


# ---------------------------------------------------------------------------
# Noise plumbing
# ---------------------------------------------------------------------------


def _noise_coeffs(cfg: ModelConfig):
    """Coefficients mapping iid normals to (kappa' dW, sigma_y' dW) per unit sqrt(dt)."""
    kappa = cfg.derived.kappa
    sy = cfg.income.sigma_y
    a = float(np.linalg.norm(kappa))
    if a > 0.0:
        cu1 = a
        cv1 = float(sy @ kappa) / a
        cv2sq = float(sy @ sy) - cv1 * cv1
        cv2 = math.sqrt(max(cv2sq, 0.0))
    else:
        cu1 = 0.0
        cv1 = float(np.linalg.norm(sy))
        cv2 = 0.0
    has_z2 = cv2 > 1e-14 * max(1.0, float(np.linalg.norm(sy)))
    return cu1, cv1, (cv2 if has_z2 else 0.0), has_z2


def _noise_chunks(seed: int, n_rows: int, n_steps: int, has_z2: bool):
    for ci, start in enumerate(range(0, n_rows, CHUNK_ROWS)):
        size = min(CHUNK_ROWS, n_rows - start)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(ci,)))
        z1 = rng.standard_normal((size, n_steps))
        z2 = rng.standard_normal((size, n_steps)) if has_z2 else z1
        yield start, size, z1, z2


def _income_setup(cfg: ModelConfig, lg: LagGrid, hist: HistoryBuffer):
    phi = cfg.income.phi
    phi_grid = np.ascontiguousarray(phi.on_grid(lg.points(), lg.dz))
    const_phi = phi.kind in ("zero", "constant")
    level = phi.level if phi.kind == "constant" else 0.0
    wz = lg.trapezoid_weights()
    ring0 = np.ascontiguousarray(hist.values_in_lag_order())
    s0 = hist.trapezoid_sum()
    return phi_grid, const_phi, level, wz, ring0, s0


def mean_income_path(cfg: ModelConfig, lg: LagGrid, hist: HistoryBuffer,
                     n_steps: int, dt: float) -> np.ndarray:
    """Deterministic mean income E[y(t_i)] on the step grid.

    The mean of the bilinear delayed equation closes on itself, so this is the
    delayed ODE integrated with the same trapezoid drift as the simulator.
    """
    phi_grid, const_phi, level, wz, ring0, s0 = _income_setup(cfg, lg, hist)
    ring = ring0.copy()
    head = 0
    n = ring.size
    y = hist.current
    s = s0
    out = np.empty(n_steps + 1)
    out[0] = y
    mu_y = cfg.income.mu_y
    for i in range(n_steps):
        if const_phi:
            integ = level * s
        else:
            idx = (head + np.arange(n)) % n
            integ = float(np.sum(wz * phi_grid * ring[idx])) * dt
        y_new = y + (mu_y * y + integ) * dt
        oldest = ring[head]
        second = ring[(head + 1) % n]
        s += 0.5 * dt * (y_new + y) - 0.5 * dt * (oldest + second)
        ring[head] = y_new
        head = (head + 1) % n
        y = y_new
        out[i + 1] = y
    return out


# ---------------------------------------------------------------------------
# Closed-loop lifecycle simulation
# ---------------------------------------------------------------------------


def _lifecycle_arrays(cfg: ModelConfig, tbl: WeightTable, policy: FeedbackPolicy,
                      n_steps: int, n_ret: int, dt: float):
    times = np.arange(n_steps + 1) * dt
    g_arr = np.zeros(n_steps + 1)
    upto = min(n_steps, tbl.tg.n_t)
    g_arr[: upto + 1] = tbl.g[: upto + 1]
    if n_ret <= n_steps:
        g_arr[n_ret:] = 0.0
    inv_f = 1.0 / f_factor(cfg, times)
    ds = cfg.derived
    idx = np.arange(n_steps + 1)
    kswitch = np.where(idx >= n_ret, cfg.prefs.K ** (-ds.b), 1.0)
    c_mult = policy.consumption_scale * kswitch
    b_coef = cfg.prefs.k ** (-ds.b)
    one_m_gamma = 1.0 - cfg.prefs.gamma
    disc = np.exp(-(cfg.prefs.rho + cfg.market.delta) * times)
    # utility nodes integrate [0, tau_R): the node at tau_R takes the left
    # limit of the integrand (no consumption-weight switch)
    c_mult_util = policy.consumption_scale * np.where(idx > n_ret,
                                                      cfg.prefs.K ** (-ds.b), 1.0)
    w_util = disc * ((c_mult_util * inv_f) ** one_m_gamma
                     + cfg.market.delta * (cfg.prefs.k * b_coef * inv_f) ** one_m_gamma
                     ) / one_m_gamma
    return times, g_arr, inv_f, np.ascontiguousarray(c_mult), b_coef, w_util


def _obs_indices(pc: PathConfig, n_steps: int, n_ret: int,
                 obs_times: Optional[Sequence[float]]) -> np.ndarray:
    if obs_times is not None:
        idx = []
        for t in obs_times:
            k = round(t / pc.dt)
            if abs(k * pc.dt - t) > 1e-9 * max(abs(t), 1.0) or not 0 <= k <= n_steps:
                raise GridMismatch(f"observation time {t} not on the step grid")
            idx.append(k)
        return np.unique(np.asarray(idx, dtype=np.int64))
    stride = pc.default_obs_stride()
    idx = set(range(0, n_steps + 1, stride))
    idx.update((0, min(n_ret, n_steps), n_steps))
    return np.asarray(sorted(idx), dtype=np.int64)


def simulate_lifecycle(cfg: ModelConfig, tbl: WeightTable, policy: FeedbackPolicy,
                       pc: PathConfig, initial: StateSnapshot,
                       record: bool = False,
                       obs_times: Optional[Sequence[float]] = None,
                       raise_on_breach: bool = True) -> SimOutput:
    """Simulate the closed loop under the feedback policy.

    Wealth and income advance by Euler; the control-driving total wealth
    advances by the Euler step of its own SDE under the same noise, and the
    state-recomputed total wealth W + g y + <h, window> is recorded at the
    observation times. The primary estimator is the realized utility integral
    over [0, tau_R].

    Raises:
        AdmissibilityBreach: if total wealth falls below the discretization
            allowance 10 dt max(|Gamma(0)|, |y(0)|) on any path/step.
    """
    dt = pc.dt
    if abs(dt - tbl.tg.dt) > 1e-12 * dt:
        raise GridMismatch("PathConfig.dt must equal the weight-table dt")
    if initial.t != 0.0:
        raise InadmissibleState("lifecycle runs start at t = 0")
    n_steps = pc.n_steps
    n_ret = round(cfg.income.tau_R / dt)
    if abs(n_ret * dt - cfg.income.tau_R) > 1e-9:
        raise GridMismatch("tau_R must be a whole number of steps")
    n_ret = min(n_ret, n_steps)

    hist = initial.hist if isinstance(initial.hist, HistoryBuffer) \
        else HistoryBuffer.from_array(initial.hist, tbl.lg)
    if hist.n_z != tbl.lg.n_z:
        raise GridMismatch("history window does not match the table lag grid")
    gamma0 = policy.total_wealth(StateSnapshot(0.0, initial.w, initial.y_now, hist))
    if gamma0 < -1e-9 * max(abs(gamma0), abs(initial.y_now), 1.0):
        raise InadmissibleState(f"Gamma(0) = {gamma0:.6g} < 0")
    gamma0 = max(gamma0, 0.0)
    # discretization allowance: the exact total wealth never goes negative, so
    # a breach beyond O(dt) times the scale of the run signals a grid too
    # coarse; income grows, so its scale is the mean path's maximum
    y_scale = float(np.max(mean_income_path(cfg, tbl.lg, hist, n_steps, dt)))
    tol_breach = 10.0 * dt * max(abs(gamma0), y_scale, 1e-12)

    times, g_arr, inv_f, c_mult, b_coef, w_util = _lifecycle_arrays(
        cfg, tbl, policy, n_steps, n_ret, dt)
    obs_idx = _obs_indices(pc, n_steps, n_ret, obs_times)
    wz = tbl.lg.trapezoid_weights()
    hw_rows = np.zeros((obs_idx.shape[0], tbl.lg.n_z + 1))
    for o, i in enumerate(obs_idx):
        if i < tbl.tg.n_t:
            hw_rows[o] = tbl.lg.dz * wz * tbl.h_row(int(i))

    phi_grid, const_phi, level, wz_arr, ring0, s0 = _income_setup(cfg, tbl.lg, hist)
    cu1, cv1, cv2, has_z2 = _noise_coeffs(cfg)
    ds = cfg.derived

    n_legs = 2 if pc.antithetic else 1
    if pc.antithetic and pc.n_paths % 2:
        raise ValueError("antithetic runs need an even n_paths")
    n_rows = pc.n_paths // n_legs

    out = np.empty((pc.n_paths, _kernels.N_SCALAR_OUT))
    series = np.empty((pc.n_paths, obs_idx.shape[0], 6)) if record else None
    for start, size, z1, z2 in _noise_chunks(pc.seed, n_rows, n_steps, has_z2):
        o, s_chunk = _kernels.lifecycle_chunk(
            z1, z2, has_z2, n_legs, cu1, cv1, cv2,
            initial.w, gamma0, initial.y_now, ring0, s0,
            const_phi, level, phi_grid, wz_arr,
            g_arr, inv_f, c_mult, b_coef, w_util,
            cfg.income.mu_y, cfg.r_plus_delta, cfg.market.delta,
            ds.kappa_sq, float(cfg.income.sigma_y @ ds.kappa),
            1.0 / cfg.prefs.gamma, 1.0 - cfg.prefs.gamma,
            dt, n_ret, pc.default_value_stride(n_ret),
            obs_idx, hw_rows, record)
        lo = start * n_legs
        out[lo: lo + size * n_legs] = o.reshape(size * n_legs, -1)
        if record:
            series[lo: lo + size * n_legs] = s_chunk.reshape(size * n_legs, obs_idx.shape[0], 6)

    per_path = {
        "utility": out[:, 0],
        "W_ret": out[:, 1],
        "gamma_ret": out[:, 2],
        "min_gamma": out[:, 3],
        "W_final": out[:, 4],
        "gamma_final": out[:, 5],
        "y_final": out[:, 6],
        "kz_ret": out[:, 7],
        "neg_income_steps": out[:, 8],
    }
    worst = float(np.min(per_path["min_gamma"]))
    if record:
        worst = min(worst, float(np.min(series[:, :, 3])))
    if raise_on_breach and worst < -tol_breach:
        raise AdmissibilityBreach(worst, tol_breach)

    mean, se, n_draws = pair_reduce(per_path["utility"], pc.antithetic)
    series_dict = None
    if record:
        series_dict = {
            "t": times[obs_idx],
            "W": series[:, :, 0],
            "y": series[:, :, 1],
            "gamma_ctrl": series[:, :, 2],
            "gamma": series[:, :, 3],
            "c": series[:, :, 4],
            "B": series[:, :, 5],
            "g_at_obs": g_arr[obs_idx],
        }
    return SimOutput(mean=mean, standard_error=se, n_paths=pc.n_paths, n_draws=n_draws,
                     seed=pc.seed,
                     meta={"dt": dt, "horizon": pc.horizon, "antithetic": pc.antithetic,
                           "gamma0": gamma0, "tol_breach": tol_breach,
                           "y_scale": y_scale, "min_gamma": worst,
                           "neg_income_steps": int(np.sum(per_path["neg_income_steps"]))},
                     per_path=per_path, series=series_dict)


def theta_series(cfg: ModelConfig, sim: SimOutput) -> np.ndarray:
    """Risky allocations along recorded paths: theta = A Gamma/gamma - Bv g y.

    Returns an array (n_paths, n_obs, n_assets) built from the recorded
    state total wealth and income.
    """
    if sim.series is None:
        raise ValueError("simulation was run without record=True")
    Avec = np.linalg.solve(cfg.market.sigma.T, cfg.derived.kappa)
    Bvec = np.linalg.solve(cfg.market.sigma.T, cfg.income.sigma_y)
    gam = sim.series["gamma"][..., None] / cfg.prefs.gamma
    gy = (sim.series["g_at_obs"][None, :] * sim.series["y"])[..., None]
    return gam * Avec[None, None, :] - gy * Bvec[None, None, :]


def simulate_lifecycle_with_noise(cfg: ModelConfig, tbl: WeightTable,
                                  policy: FeedbackPolicy, pc: PathConfig,
                                  initial: StateSnapshot, z1: np.ndarray,
                                  z2: Optional[np.ndarray] = None):
    """Single-chunk closed loop driven by caller-supplied normals (one leg per
    row). Returns the raw scalar output matrix; used by shared-noise
    convergence studies and kernel-vs-reference tests."""
    dt = pc.dt
    if abs(dt - tbl.tg.dt) > 1e-12 * dt:
        raise GridMismatch("PathConfig.dt must equal the weight-table dt")
    n_steps = z1.shape[1]
    n_ret = min(round(cfg.income.tau_R / dt), n_steps)
    hist = initial.hist if isinstance(initial.hist, HistoryBuffer) \
        else HistoryBuffer.from_array(initial.hist, tbl.lg)
    gamma0 = max(policy.total_wealth(StateSnapshot(0.0, initial.w, initial.y_now, hist)), 0.0)
    times, g_arr, inv_f, c_mult, b_coef, w_util = _lifecycle_arrays(
        cfg, tbl, policy, n_steps, n_ret, dt)
    phi_grid, const_phi, level, wz_arr, ring0, s0 = _income_setup(cfg, tbl.lg, hist)
    cu1, cv1, cv2, has_z2 = _noise_coeffs(cfg)
    if z2 is None:
        if has_z2:
            raise ValueError("this configuration needs a second noise stream")
        z2 = z1
    ds = cfg.derived
    obs_idx = np.asarray([n_steps], dtype=np.int64)
    hw_rows = np.zeros((1, tbl.lg.n_z + 1))
    o, _ = _kernels.lifecycle_chunk(
        np.ascontiguousarray(z1), np.ascontiguousarray(z2), has_z2, 1, cu1, cv1, cv2,
        initial.w, gamma0, initial.y_now, ring0, s0,
        const_phi, level, phi_grid, wz_arr,
        g_arr, inv_f, c_mult, b_coef, w_util,
        cfg.income.mu_y, cfg.r_plus_delta, cfg.market.delta,
        ds.kappa_sq, float(cfg.income.sigma_y @ ds.kappa),
        1.0 / cfg.prefs.gamma, 1.0 - cfg.prefs.gamma,
        dt, n_ret, pc.default_value_stride(n_ret),
        obs_idx, hw_rows, False)
    return o[:, 0, :]


# ---------------------------------------------------------------------------
# Joint state-price-density / income integral (human-capital oracle input)
# ---------------------------------------------------------------------------


def simulate_deflated_income_integral(cfg: ModelConfig, lg: LagGrid,
                                      hist: HistoryBuffer, pc: PathConfig) -> SimOutput:
    """Monte Carlo estimate of E[int_0^horizon xi(u) y(u) du].

    xi and y share the same Brownian draws; xi updates are exact lognormal,
    y is Euler on the delayed equation. Independent of the weight table.
    """
    n_steps = pc.n_steps
    phi_grid, const_phi, level, wz, ring0, s0 = _income_setup(cfg, lg, hist)
    cu1, cv1, cv2, has_z2 = _noise_coeffs(cfg)
    stride = pc.default_value_stride(n_steps)

    n_legs = 2 if pc.antithetic else 1
    if pc.antithetic and pc.n_paths % 2:
        raise ValueError("antithetic runs need an even n_paths")
    n_rows = pc.n_paths // n_legs

    ests = np.empty(pc.n_paths)
    negs = np.empty(pc.n_paths)
    for start, size, z1, z2 in _noise_chunks(pc.seed, n_rows, n_steps, has_z2):
        e, ng = _kernels.hc_chunk(z1, z2, has_z2, n_legs, cu1, cv1, cv2,
                                  hist.current, ring0, s0, const_phi, level,
                                  phi_grid, wz, cfg.income.mu_y, cfg.r_plus_delta,
                                  0.5 * cfg.derived.kappa_sq, pc.dt, stride)
        lo = start * n_legs
        ests[lo: lo + size * n_legs] = e.reshape(-1)
        negs[lo: lo + size * n_legs] = ng.reshape(-1)

    mean, se, n_draws = pair_reduce(ests, pc.antithetic)
    return SimOutput(mean=mean, standard_error=se, n_paths=pc.n_paths, n_draws=n_draws,
                     seed=pc.seed,
                     meta={"dt": pc.dt, "horizon": pc.horizon,
                           "antithetic": pc.antithetic, "value_stride": stride,
                           "neg_income_steps": int(np.sum(negs))},
                     per_path={"integral": ests})


# ---------------------------------------------------------------------------
# Exact optimal total wealth
# ---------------------------------------------------------------------------


def gamma_drift(cfg: ModelConfig, t, closed: bool = True):
    """Drift rate of the optimal total wealth:
    r + delta + |kappa|^2/gamma - f(t)^-1 (K^{-b R(t)} + delta k^{-b}).

    The retirement indicator is closed at tau_R (closed=True); closed=False
    gives the left limit, which quadratures across the jump need.
    """
    ds = cfg.derived
    tt = np.asarray(t, dtype=float)
    retired = tt >= cfg.income.tau_R if closed else tt > cfg.income.tau_R
    kswitch = np.where(retired, cfg.prefs.K ** (-ds.b), 1.0)
    out = (cfg.r_plus_delta + ds.kappa_sq / cfg.prefs.gamma
           - (kswitch + cfg.market.delta * cfg.prefs.k ** (-ds.b)) / f_factor(cfg, tt))
    return out if out.ndim else float(out)


def gamma_drift_integral(cfg: ModelConfig, times: np.ndarray) -> np.ndarray:
    """Cumulative trapezoid of the drift rate on the given uniform grid.

    The drift has a jump at tau_R; each cell uses the one-sided limits of its
    endpoints, so the step is integrated exactly and the smooth parts keep the
    trapezoid order.
    """
    a_right = np.asarray(gamma_drift(cfg, times, closed=True))
    a_left = np.asarray(gamma_drift(cfg, times, closed=False))
    dt = times[1] - times[0]
    out = np.empty_like(a_right)
    out[0] = 0.0
    np.cumsum(0.5 * dt * (a_right[:-1] + a_left[1:]), out=out[1:])
    return out


def gamma_exact_mean(cfg: ModelConfig, t: float, gamma0: float, dt: float = 1e-3) -> float:
    """Analytic E[Gamma*(t)] = Gamma(0) exp(int_0^t drift), trapezoid at dt."""
    if t <= 0:
        return gamma0
    n = max(1, round(t / dt))
    times = np.linspace(0.0, t, n + 1)
    return gamma0 * math.exp(float(gamma_drift_integral(cfg, times)[-1]))


def gamma_exact_terminal(cfg: ModelConfig, t: float, gamma0: float,
                         kz: np.ndarray, dt: float) -> np.ndarray:
    """Exact Gamma*(t) given realized kappa' Z(t) values (shared-noise oracle)."""
    n = max(1, round(t / dt))
    times = np.linspace(0.0, t, n + 1)
    A = float(gamma_drift_integral(cfg, times)[-1])
    kg2 = cfg.derived.kappa_sq / cfg.prefs.gamma ** 2
    return gamma0 * np.exp(A - 0.5 * kg2 * t + np.asarray(kz) / cfg.prefs.gamma)


def simulate_gamma_exact(cfg: ModelConfig, pc: PathConfig, gamma0: float,
                         obs_times: Optional[Sequence[float]] = None) -> SimOutput:
    """Exact lognormal paths of the optimal total wealth.

    The drift integral is computed by trapezoid at pc.dt resolution; the
    Brownian term is sampled exactly on the observation grid, so paths carry
    no discretization bias. The primary estimator is Gamma at the horizon.
    """
    if gamma0 < 0:
        raise InadmissibleState("gamma0 must be >= 0")
    n_steps = pc.n_steps
    times = np.arange(n_steps + 1) * pc.dt
    A = gamma_drift_integral(cfg, times)
    obs_idx = _obs_indices(pc, n_steps, min(round(cfg.income.tau_R / pc.dt), n_steps),
                           obs_times)
    if obs_idx[0] == 0:
        obs_idx = obs_idx[1:]  # Gamma(0) is not random
    t_obs = times[obs_idx]
    a_cum = A[obs_idx]
    kg = math.sqrt(cfg.derived.kappa_sq) / cfg.prefs.gamma
    half_var = 0.5 * kg * kg * t_obs
    dsq = np.sqrt(np.diff(np.concatenate([[0.0], t_obs])))

    n_legs = 2 if pc.antithetic else 1
    if pc.antithetic and pc.n_paths % 2:
        raise ValueError("antithetic runs need an even n_paths")
    n_rows = pc.n_paths // n_legs

    paths = np.empty((pc.n_paths, t_obs.shape[0]))
    mins = np.empty(pc.n_paths)
    for start, size, z1, _ in _noise_chunks(pc.seed, n_rows, t_obs.shape[0], False):
        lo = start * n_legs
        if pc.antithetic:
            zfull = np.empty((2 * size, t_obs.shape[0]))
            zfull[0::2] = z1
            zfull[1::2] = -z1
        else:
            zfull = z1
        p, m = _kernels.gamma_exact_chunk(zfull, a_cum, half_var, kg, dsq, gamma0)
        paths[lo: lo + size * n_legs] = p
        mins[lo: lo + size * n_legs] = m

    mean, se, n_draws = pair_reduce(paths[:, -1], pc.antithetic)
    return SimOutput(mean=mean, standard_error=se, n_paths=pc.n_paths, n_draws=n_draws,
                     seed=pc.seed,
                     meta={"dt": pc.dt, "horizon": pc.horizon, "gamma0": gamma0,
                           "antithetic": pc.antithetic,
                           "min_over_paths": float(np.min(mins)) if mins.size else gamma0},
                     per_path={"min": mins, "terminal": paths[:, -1]},
                     series={"t": t_obs, "gamma": paths})
