"""Annuity weights (g, h): solver, evaluation, decomposition and residuals.

The pair (g, h) solves the coupled system

    g(t)      = int_t^tau_R e^{-beta (tau - t)} (h(tau, 0) + 1) dtau
    h(t,zeta) = int_0^{(tau_R - t) ^ (zeta + d)} e^{-(r+delta) tau}
                g(t + tau) phi(zeta - tau) dtau

with extension by zero for t >= tau_R. Discretization: uniform grids with
dt == dz so every integrand argument lands on a node; composite trapezoid
everywhere; global fixed-point iteration from (0, 0), with a backward
block-sweep fallback when the full-horizon iteration stalls.

Only h(., 0) feeds back into g, so the iteration runs on the reduced pair
(g, h(., 0)); the interior of h is controlled by the kernel constant
max_j int |phi| e^{-(r+delta) tau} and materialized once from the final g.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._kernels import g_scan, march_h_table
from .errors import GridMismatch, NoConvergence, OutOfRange
from .params import ModelConfig

_ALIGN_RTOL = 1e-9


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, tau_R]; node i sits at i * dt."""

    n_t: int
    dt: float

    def __post_init__(self):
        if self.n_t < 1 or self.dt <= 0:
            raise GridMismatch("need n_t >= 1 and dt > 0")

    @property
    def t_end(self) -> float:
        return self.n_t * self.dt

    def times(self) -> np.ndarray:
        return np.arange(self.n_t + 1) * self.dt


@dataclass(frozen=True)
class LagGrid:
    """Uniform grid on [-d, 0]; node j sits at -d + j * dz."""

    n_z: int
    dz: float

    def __post_init__(self):
        if self.n_z < 1 or self.dz <= 0:
            raise GridMismatch("need n_z >= 1 and dz > 0")

    @property
    def d(self) -> float:
        return self.n_z * self.dz

    def points(self) -> np.ndarray:
        return -self.d + np.arange(self.n_z + 1) * self.dz

    def trapezoid_weights(self) -> np.ndarray:
        w = np.ones(self.n_z + 1)
        w[0] = w[-1] = 0.5
        return w


def aligned_grids(tau_R: float, d: float, steps_per_year: int):
    """Build (TimeGrid, LagGrid) with dt = dz = 1/steps_per_year.

    Requires tau_R and d to be whole multiples of the step.
    """
    if steps_per_year < 1:
        raise GridMismatch("steps_per_year must be >= 1")
    dt = 1.0 / steps_per_year
    n_t = round(tau_R * steps_per_year)
    n_z = round(d * steps_per_year)
    if abs(n_t * dt - tau_R) > _ALIGN_RTOL * max(tau_R, 1.0):
        raise GridMismatch(f"tau_R = {tau_R} is not a multiple of dt = {dt}")
    if abs(n_z * dt - d) > _ALIGN_RTOL * max(d, 1.0):
        raise GridMismatch(f"d = {d} is not a multiple of dz = {dt}")
    return TimeGrid(n_t=n_t, dt=dt), LagGrid(n_z=n_z, dz=dt)


def grids_for(cfg: ModelConfig, steps_per_year: int):
    return aligned_grids(cfg.income.tau_R, cfg.income.d, steps_per_year)


def _check_alignment(tg: TimeGrid, lg: LagGrid) -> None:
    if abs(tg.dt - lg.dz) > _ALIGN_RTOL * tg.dt:
        raise GridMismatch(f"dt = {tg.dt} and dz = {lg.dz} must coincide")


# ---------------------------------------------------------------------------
# Weight table
# ---------------------------------------------------------------------------

# Above this many h entries the table is kept lazy and rows are recomputed
# from g on demand (the march is cheap; storage is not).
DENSE_ENTRY_LIMIT = 32_000_000


class WeightTable:
    """Discretized (g, h) with solver metadata.

    g has n_t + 1 nodes on [0, tau_R]; h rows live on the lag grid. The table
    extends by zero for t >= tau_R. When lazy, rows are recomputed from g.
    """

    def __init__(self, g: np.ndarray, tg: TimeGrid, lg: LagGrid, phi_grid: np.ndarray,
                 beta: float, r_plus_delta: float, iterations: int, final_defect: float,
                 defect_history: Sequence[float], solver_mode: str,
                 h: Optional[np.ndarray] = None):
        self.g = np.asarray(g, float)
        self.tg = tg
        self.lg = lg
        self.phi_grid = np.asarray(phi_grid, float)
        self.beta = beta
        self.r_plus_delta = r_plus_delta
        self.iterations = iterations
        self.final_defect = final_defect
        self.defect_history = tuple(defect_history)
        self.solver_mode = solver_mode
        self._h = h
        for arr in (self.g, self.phi_grid):
            arr.setflags(write=False)
        if h is not None:
            h.setflags(write=False)

    @property
    def tau_R(self) -> float:
        return self.tg.t_end

    @property
    def is_dense(self) -> bool:
        return self._h is not None

    def h_matrix(self) -> np.ndarray:
        if self._h is None:
            raise MemoryError(
                f"h table is lazy ({(self.tg.n_t + 1) * (self.lg.n_z + 1)} entries); "
                "use h_row/row_at_time"
            )
        return self._h

    def h_row(self, i: int) -> np.ndarray:
        """h(t_i, .) on the lag grid (exact trapezoid values)."""
        if not 0 <= i <= self.tg.n_t:
            raise OutOfRange(f"row index {i} outside 0..{self.tg.n_t}")
        if self._h is not None:
            return self._h[i]
        return _h_row_from_g(self.g, self.phi_grid, self.r_plus_delta, self.tg.dt, i)

    def h_col0(self) -> np.ndarray:
        """h(t_i, 0) for all i (the only column feeding back into g)."""
        if self._h is not None:
            return self._h[:, -1]
        return _apply_h_at_zero(self.g, self.phi_grid, self.r_plus_delta, self.tg.dt)

    def row_at_time(self, t: float) -> np.ndarray:
        """h(t, .) by linear interpolation in time; zero for t >= tau_R."""
        if t >= self.tau_R:
            return np.zeros(self.lg.n_z + 1)
        pos = t / self.tg.dt
        i = min(int(pos), self.tg.n_t - 1)
        frac = pos - i
        if frac == 0.0:
            return np.array(self.h_row(i))
        return (1.0 - frac) * self.h_row(i) + frac * self.h_row(i + 1)


# ---------------------------------------------------------------------------
# Discrete operator pieces
# ---------------------------------------------------------------------------


def _h0_kernel(phi_grid: np.ndarray, rd: float, dt: float) -> np.ndarray:
    """Correlation kernel: h(t_i, 0) = sum_l ker[l] g[i + l] (g zero-padded)."""
    n_z = phi_grid.shape[0] - 1
    l = np.arange(n_z + 1)
    w = np.ones(n_z + 1)
    w[0] = w[-1] = 0.5
    return dt * w * np.exp(-rd * l * dt) * phi_grid[n_z - l]


def _apply_h_at_zero(g: np.ndarray, phi_grid: np.ndarray, rd: float, dt: float) -> np.ndarray:
    ker = _h0_kernel(phi_grid, rd, dt)
    gpad = np.concatenate([g, np.zeros(phi_grid.shape[0] - 1)])
    return np.correlate(gpad, ker, mode="valid")


def _h_row_from_g(g: np.ndarray, phi_grid: np.ndarray, rd: float, dt: float, i: int) -> np.ndarray:
    """Single h row via truncated convolution with endpoint-weight correction."""
    n_z = phi_grid.shape[0] - 1
    tail = g[i:]
    a = dt * np.exp(-rd * np.arange(tail.shape[0]) * dt) * tail
    if a.shape[0] < n_z + 1:
        a = np.concatenate([a, np.zeros(n_z + 1 - a.shape[0])])
    else:
        a = a[: n_z + 1]
    conv = np.convolve(a, phi_grid)[: n_z + 1]
    j = np.arange(n_z + 1)
    row = conv - 0.5 * a[0] * phi_grid - 0.5 * a[j] * phi_grid[0]
    row[0] = 0.0
    return row


def _kernel_bound(phi_grid: np.ndarray, rd: float, dt: float) -> float:
    """max_j of the discrete int |phi(zeta - tau)| e^{-rd tau} dtau.

    Bounds the full-table change of h per unit sup-norm change of g.
    """
    n_z = phi_grid.shape[0] - 1
    decay = dt * np.exp(-rd * np.arange(n_z + 1) * dt)
    conv = np.convolve(decay, np.abs(phi_grid))[: n_z + 1]
    j = np.arange(n_z + 1)
    k = conv - 0.5 * decay[0] * np.abs(phi_grid) - 0.5 * decay[j] * abs(phi_grid[0])
    k[0] = 0.0
    return float(np.max(k)) if k.size else 0.0


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


def solve_weights(cfg: ModelConfig, tg: TimeGrid, lg: LagGrid,
                  tol: float = 1e-10, max_iter: int = 10_000,
                  dense: Optional[bool] = None) -> WeightTable:
    """Solve the coupled integral system on aligned grids.

    Iterates the discretized operator from (g, h) = (0, 0) until successive
    iterates differ by at most tol in sup norm, then polishes so that one more
    application of the operator moves the returned pair by at most tol.

    Raises:
        GridMismatch: if dt != dz or the grids do not span (tau_R, d).
        NoConvergence: if the budget is exhausted (carries the last defect).
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    _check_alignment(tg, lg)
    if abs(tg.t_end - cfg.income.tau_R) > _ALIGN_RTOL * max(cfg.income.tau_R, 1.0):
        raise GridMismatch("time grid does not span [0, tau_R]")
    if abs(lg.d - cfg.income.d) > _ALIGN_RTOL * max(cfg.income.d, 1.0):
        raise GridMismatch("lag grid does not span [-d, 0]")

    dt = tg.dt
    n_t, n_z = tg.n_t, lg.n_z
    rd = cfg.r_plus_delta
    beta = cfg.derived.beta
    phi_grid = np.ascontiguousarray(cfg.income.phi.on_grid(lg.points(), lg.dz))
    ker = _h0_kernel(phi_grid, rd, dt)
    kmax = _kernel_bound(phi_grid, rd, dt)

    def h0_of(gv):
        gpad = np.concatenate([gv, np.zeros(n_z)])
        return np.correlate(gpad, ker, mode="valid")

    g = np.zeros(n_t + 1)
    h1 = np.zeros(n_t + 1)
    defects = []
    iterations = 0
    mode = "global"
    # full-table h change between successive iterates is bounded by
    # kmax * (previous g change); g starts at 0 = its fictitious predecessor
    dg_prev = 0.0
    best = math.inf

    while iterations < max_iter:
        g_new = g_scan(h1 + 1.0, beta, dt)
        h1_new = h0_of(g)
        dg = float(np.max(np.abs(g_new - g)))
        dh1 = float(np.max(np.abs(h1_new - h1)))
        defect = max(dg, dh1, kmax * dg_prev)
        defects.append(defect)
        g, h1 = g_new, h1_new
        dg_prev = dg
        iterations += 1
        if defect <= 0.5 * tol:
            break
        if not math.isfinite(defect) or (iterations >= max_iter // 2 and defect >= best):
            mode = "blocks"
            break
        best = min(best, defect)
    else:
        raise NoConvergence(iterations, defects[-1] if defects else math.inf)

    if mode == "blocks":
        # the fallback gets a fresh budget: max_iter bounds each phase
        g, h1, block_its = _solve_blocks(g, h1, ker, kmax, beta, rd, dt, n_t, n_z,
                                         tol, max_iter)
        iterations += block_its

    # polish: make the returned pair self-consistent to tol under one more
    # application of the operator (h side becomes exact by construction).
    while iterations < max_iter:
        h1 = h0_of(g)
        g_next = g_scan(h1 + 1.0, beta, dt)
        moved = float(np.max(np.abs(g_next - g)))
        defects.append(moved)
        iterations += 1
        if moved <= tol:
            break
        g = g_next
    else:
        raise NoConvergence(iterations, defects[-1])

    entries = (n_t + 1) * (n_z + 1)
    want_dense = dense if dense is not None else entries <= DENSE_ENTRY_LIMIT
    h = march_h_table(g, phi_grid, rd, dt) if want_dense else None
    return WeightTable(g=g, tg=tg, lg=lg, phi_grid=phi_grid, beta=beta,
                       r_plus_delta=rd, iterations=iterations,
                       final_defect=defects[-1], defect_history=defects,
                       solver_mode=mode, h=h)


def _solve_blocks(g, h1, ker, kmax, beta, rd, dt, n_t, n_z, tol, budget):
    """Backward block sweep: solve [i0, i1) with everything to the right fixed.

    Block span chosen so the local loop gain kmax * span * e^{|beta| span} is
    comfortably below one, which the contraction argument guarantees to exist.
    """
    span = 0.25 / max(kmax, 1e-300)
    for _ in range(60):
        if kmax * span * math.exp(abs(beta) * span) <= 0.5:
            break
        span *= 0.5
    nodes = max(1, min(n_t, int(span / dt)))
    e = math.exp(-beta * dt)
    gpad = np.concatenate([g, np.zeros(n_z)])
    used = 0
    i1 = n_t  # g[n_t] = 0 fixed
    while i1 > 0:
        i0 = max(0, i1 - nodes)
        for _ in range(max(16, budget // max(1, n_t // nodes))):
            used += 1
            moved = 0.0
            q = h1 + 1.0
            for i in range(i1 - 1, i0 - 1, -1):
                gi = 0.5 * dt * q[i] + e * (0.5 * dt * q[i + 1] + gpad[i + 1])
                moved = max(moved, abs(gi - gpad[i]))
                gpad[i] = gi
            seg = np.correlate(gpad[i0: i1 + n_z], ker, mode="valid")
            moved = max(moved, float(np.max(np.abs(seg - h1[i0:i1]))) if seg.size else 0.0)
            h1[i0:i1] = seg
            if moved <= 0.25 * tol:
                break
            if used >= budget:
                raise NoConvergence(used, moved)
        i1 = i0
    return gpad[: n_t + 1], h1, used


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def eval_g(tbl: WeightTable, t):
    """g(t) by linear interpolation; exactly 0 for t >= tau_R."""
    tt = np.asarray(t, dtype=float)
    if np.any(tt < 0):
        raise OutOfRange("t must be >= 0")
    out = np.where(tt >= tbl.tau_R, 0.0, np.interp(tt, tbl.tg.times(), tbl.g))
    return out if out.ndim else float(out)


def eval_h(tbl: WeightTable, t: float, zeta: float) -> float:
    """h(t, zeta) by bilinear interpolation; exactly 0 for t >= tau_R."""
    if t < 0:
        raise OutOfRange("t must be >= 0")
    d = tbl.lg.d
    if zeta < -d - 1e-12 * d or zeta > 1e-12 * d:
        raise OutOfRange(f"zeta = {zeta} outside [-{d}, 0]")
    if t >= tbl.tau_R:
        return 0.0
    row = tbl.row_at_time(t)
    return float(np.interp(zeta, tbl.lg.points(), row))


def decompose_g(tbl: WeightTable, t: float):
    """Split g = g1 + g2: closed-form no-delay annuity plus the delay channel."""
    if t < 0:
        raise OutOfRange("t must be >= 0")
    rem = max(tbl.tau_R - t, 0.0)
    beta = tbl.beta
    if abs(beta) < 1e-14:
        g1 = rem
    else:
        g1 = (1.0 - math.exp(-beta * rem)) / beta
    if t >= tbl.tau_R:
        return 0.0, 0.0
    return g1, float(eval_g(tbl, t)) - g1


def _window_values(hist) -> np.ndarray:
    if hasattr(hist, "values_in_lag_order"):
        return np.asarray(hist.values_in_lag_order(), float)
    return np.asarray(hist, dtype=float)


def human_capital(tbl: WeightTable, t: float, y_now: float, hist) -> float:
    """Market value of future wages: g(t) y_now + trapezoid <h(t, .), window>.

    ``hist`` is a HistoryBuffer or an array on the lag grid (oldest first).

    Raises:
        GridMismatch: if the window is not sampled on the table's lag grid.
    """
    if t >= tbl.tau_R:
        return 0.0
    vals = _window_values(hist)
    if vals.shape[0] != tbl.lg.n_z + 1:
        raise GridMismatch(
            f"history has {vals.shape[0]} samples, lag grid wants {tbl.lg.n_z + 1}"
        )
    if hasattr(hist, "dz") and abs(hist.dz - tbl.lg.dz) > _ALIGN_RTOL * tbl.lg.dz:
        raise GridMismatch("history dz does not match the table lag grid")
    row = tbl.row_at_time(t)
    w = tbl.lg.trapezoid_weights()
    return float(eval_g(tbl, t)) * y_now + float(np.sum(w * row * vals)) * tbl.lg.dz


def adjoint_apply(cfg: ModelConfig, z0: float, z1, lg: LagGrid,
                  boundary_tol: float = 1e-8):
    """Apply the adjoint generator: (mu_y z0 + z1(0), -z1' + z0 phi) on the grid.

    z1 may be an array on the lag grid or a callable; its derivative is taken
    by central differences (one-sided at the ends).

    Raises:
        BoundaryViolation: if |z1(-d)| exceeds boundary_tol.
    """
    from .errors import BoundaryViolation

    pts = lg.points()
    vals = np.asarray(z1(pts) if callable(z1) else z1, dtype=float)
    if vals.shape[0] != lg.n_z + 1:
        raise GridMismatch("z1 must be sampled on the lag grid")
    if abs(vals[0]) > boundary_tol:
        raise BoundaryViolation(f"z1(-d) = {vals[0]:.3e} violates the domain of the adjoint")
    dz = lg.dz
    dz1 = np.empty_like(vals)
    dz1[1:-1] = (vals[2:] - vals[:-2]) / (2.0 * dz)
    dz1[0] = (vals[1] - vals[0]) / dz
    dz1[-1] = (vals[-1] - vals[-2]) / dz
    phi_grid = cfg.income.phi.on_grid(pts, dz)
    return cfg.income.mu_y * z0 + vals[-1], -dz1 + z0 * phi_grid


# ---------------------------------------------------------------------------
# Residual diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResidualReport:
    """Finite-difference residuals of the ODE/transport system on the grid."""

    ode_max: float
    pde_max: float
    gprime_left: float
    jump_at_retirement: float
    dt: float
    dz: float

    def __str__(self):
        return "\n".join(
            f"{k} = {v:.6e}"
            for k, v in (
                ("ode_residual_max", self.ode_max),
                ("pde_residual_max", self.pde_max),
                ("gprime_left_limit", self.gprime_left),
                ("jump_at_retirement", self.jump_at_retirement),
                ("dt", self.dt),
                ("dz", self.dz),
            )
        )


def _pde_row_residual(row_prev, row, row_next, g_i, phi, rd, dt, dz, one_sided_t):
    """|-(r+d) h + dh/dt - dh/dzeta + g phi| across one time row."""
    if one_sided_t:
        dh_dt = (row_next - row) / dt
    else:
        dh_dt = (row_next - row_prev) / (2.0 * dt)
    dh_dz = np.empty_like(row)
    dh_dz[1:-1] = (row[2:] - row[:-2]) / (2.0 * dz)
    dh_dz[0] = (row[1] - row[0]) / dz
    dh_dz[-1] = (row[-1] - row[-2]) / dz
    return float(np.max(np.abs(-rd * row + dh_dt - dh_dz + g_i * phi)))


def residual_check(tbl: WeightTable) -> ResidualReport:
    """Max |g' - beta g + h(.,0) + 1| and transport residual on the grid.

    Central differences on interior nodes, one-sided at edges; the left limit
    of g' at tau_R is the one-sided difference (the right limit is 0 by the
    zero extension).
    """
    g = tbl.g
    dt = tbl.tg.dt
    n_t = tbl.tg.n_t
    h1 = tbl.h_col0()

    # interior nodes only: the ODE holds on [0, tau_R) and the one-sided
    # endpoint difference would pollute the max with an O(dt) term
    gp = (g[2:] - g[:-2]) / (2.0 * dt)  # g' at i = 1..n_t-1
    ode_max = float(np.max(np.abs(gp - tbl.beta * g[1:n_t] + h1[1:n_t] + 1.0)))

    phi = tbl.phi_grid
    rd = tbl.r_plus_delta
    dz = tbl.lg.dz
    pde_max = 0.0
    if tbl.is_dense:
        H = tbl.h_matrix()
        for i in range(n_t):
            pde_max = max(pde_max, _pde_row_residual(
                H[i - 1] if i > 0 else H[0], H[i], H[i + 1],
                g[i], phi, rd, dt, dz, one_sided_t=(i == 0)))
    else:
        # stream the march backward keeping a 3-row window; residual at time
        # index k needs rows k-1 (produced later) and k+1 (produced earlier)
        e = math.exp(-rd * dt)
        half = 0.5 * dt
        window = {n_t: np.zeros(phi.shape[0])}
        for i in range(n_t - 1, -1, -1):
            row = np.zeros(phi.shape[0])
            above = window[i + 1]
            row[1:] = e * (above[:-1] + half * g[i + 1] * phi[:-1]) + half * g[i] * phi[1:]
            window[i] = row
            if i + 1 <= n_t - 1:
                pde_max = max(pde_max, _pde_row_residual(
                    window[i], window[i + 1], window[i + 2],
                    g[i + 1], phi, rd, dt, dz, one_sided_t=False))
            window.pop(i + 2, None)
        pde_max = max(pde_max, _pde_row_residual(
            window[0], window[0], window[1], g[0], phi, rd, dt, dz, one_sided_t=True))

    gprime_left = (g[n_t] - g[n_t - 1]) / dt
    return ResidualReport(ode_max=ode_max, pde_max=pde_max, gprime_left=gprime_left,
                          jump_at_retirement=abs(0.0 - gprime_left), dt=dt, dz=dz)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def write_weights_csv(tbl: WeightTable, g_path, h_path, header_lines=()):
    """Dump (t, g, g1, g2) and long-format (t, zeta, h) CSV files."""
    times = tbl.tg.times()
    with open(g_path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("t,g,g1,g2\n")
        for i, t in enumerate(times):
            g1, g2 = decompose_g(tbl, float(t))
            fh.write(f"{t:.10g},{tbl.g[i]:.12g},{g1:.12g},{g2:.12g}\n")
    pts = tbl.lg.points()
    with open(h_path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("t,zeta,h\n")
        for i, t in enumerate(times):
            row = tbl.h_row(i)
            for j, z in enumerate(pts):
                fh.write(f"{t:.10g},{z:.10g},{row[j]:.12g}\n")
