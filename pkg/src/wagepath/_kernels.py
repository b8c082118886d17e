"""Numba-compiled inner loops.

Everything here is private plumbing: exact trapezoid marches for the weight
table and tight per-path loops for the Monte Carlo engine. The readable
reference implementations live in ``weights`` and ``simulate``; tests pin the
kernels against them.

Path kernels are driven by at most two scalar noises per step,
u = kappa' dW and v = sigma_y' dW, which is equal in law to the full
n-dimensional drive for every quantity simulated here.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


# ---------------------------------------------------------------------------
# Weight-table fills (exact composite trapezoid via characteristic recursion)
# ---------------------------------------------------------------------------


@njit(cache=True)
def march_h_table(g, phi, rd, dt):
    """Fill h(t_i, zeta_j) = trapz_{l<=min(n_t-i, j)} e^{-rd l dt} g[i+l] phi[j-l] dt.

    Marches backward in time along characteristics; reproduces the composite
    trapezoid rule with the moving upper limit exactly (both limits are
    node-aligned because dt == dz).
    """
    n_t = g.shape[0] - 1
    n_z = phi.shape[0] - 1
    H = np.zeros((n_t + 1, n_z + 1))
    e = np.exp(-rd * dt)
    half = 0.5 * dt
    for i in range(n_t - 1, -1, -1):
        gi = g[i]
        gi1 = g[i + 1]
        for j in range(1, n_z + 1):
            H[i, j] = e * (H[i + 1, j - 1] + half * gi1 * phi[j - 1]) + half * gi * phi[j]
    return H


@njit(cache=True)
def g_scan(q, beta, dt):
    """g[i] = trapz_{l<=n_t-i} e^{-beta l dt} q[i+l] dt via backward recursion."""
    n_t = q.shape[0] - 1
    g = np.zeros(n_t + 1)
    e = np.exp(-beta * dt)
    half = 0.5 * dt
    for i in range(n_t - 1, -1, -1):
        g[i] = half * q[i] + e * (half * q[i + 1] + g[i + 1])
    return g


# ---------------------------------------------------------------------------
# Monte Carlo path kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _income_integral(ring, head, phi, wz, dz):
    """Trapezoid of phi * window over the ring (general-kernel slow path)."""
    n = ring.shape[0]
    acc = 0.0
    for j in range(n):
        acc += wz[j] * phi[j] * ring[(head + j) % n]
    return acc * dz


@njit(cache=True)
def _hc_leg(z1, z2, has_z2, sign, cu1, cv1, cv2,
            y0, ring0, s0, const_phi, phi_level, phi, wz,
            mu_y, rd, half_k2, dt, stride):
    """One antithetic leg of the joint (xi, y) simulation.

    Returns (stride-trapezoid of xi*y over [0, T], negative-income step count).
    """
    nring = ring0.shape[0]
    n_steps = z1.shape[0]
    ring = ring0.copy()
    head = 0
    y = y0
    s = s0
    lxi = 0.0
    sq = np.sqrt(dt)
    acc = 0.0
    prev = y0  # xi(0) = 1
    neg = 0
    c0 = -(rd + half_k2) * dt
    for i in range(n_steps):
        u = cu1 * z1[i] * sq * sign
        if has_z2:
            v = (cv1 * z1[i] + cv2 * z2[i]) * sq * sign
        else:
            v = cv1 * z1[i] * sq * sign
        if const_phi:
            integ = phi_level * s
        else:
            integ = _income_integral(ring, head, phi, wz, dt)
        y_new = y + (mu_y * y + integ) * dt + y * v
        lxi += c0 - u
        if y_new < 0.0:
            neg += 1
        oldest = ring[head]
        second = ring[(head + 1) % nring]
        s += 0.5 * dt * (y_new + y) - 0.5 * dt * (oldest + second)
        ring[head] = y_new
        head = (head + 1) % nring
        y = y_new
        if (i + 1) % stride == 0:
            cur = np.exp(lxi) * y
            acc += 0.5 * (prev + cur) * (dt * stride)
            prev = cur
    return acc, neg


@njit(cache=True, parallel=True)
def hc_chunk(z1m, z2m, has_z2, n_legs, cu1, cv1, cv2,
             y0, ring0, s0, const_phi, phi_level, phi, wz,
             mu_y, rd, half_k2, dt, stride):
    """Human-capital oracle chunk: both antithetic legs per noise row."""
    rows = z1m.shape[0]
    out = np.zeros((rows, n_legs))
    negs = np.zeros((rows, n_legs))
    for p in prange(rows):
        for leg in range(n_legs):
            sign = 1.0 if leg == 0 else -1.0
            est, neg = _hc_leg(z1m[p], z2m[p], has_z2, sign, cu1, cv1, cv2,
                               y0, ring0, s0, const_phi, phi_level, phi, wz,
                               mu_y, rd, half_k2, dt, stride)
            out[p, leg] = est
            negs[p, leg] = neg
    return out, negs


N_SCALAR_OUT = 9
# lifecycle scalar output columns:
# 0 utility integral on [0, tau_R]
# 1 W at the retirement step
# 2 co-evolved total wealth at the retirement step
# 3 min co-evolved total wealth over all steps
# 4 W at the final step
# 5 co-evolved total wealth at the final step
# 6 y at the final step
# 7 kappa' Z at the retirement step (for exact-path comparison)
# 8 count of steps with negative income


@njit(cache=True)
def _lifecycle_leg(z1, z2, has_z2, sign, cu1, cv1, cv2,
                   w0, gamma0, y0, ring0, s0,
                   const_phi, phi_level, phi, wz,
                   g_arr, inv_f, c_mult, b_coef, w_util,
                   mu_y, rd, delta, k2, syk, inv_gamma, one_m_gamma,
                   dt, n_ret, ustride,
                   obs_steps, hw_rows, record, series_out, out):
    """Closed-loop step loop for one path (one antithetic leg).

    W and y advance by Euler. The control-driving total wealth G advances by
    the Euler step of its own SDE under the same noise (its diffusion is
    (G/gamma) kappa' dZ once the feedback allocation is substituted). The
    state-recomputed total wealth W + g y + <h, window> is evaluated at
    observation steps only; series_out rows are
    (W, y, G, state total wealth, c, B).
    """
    nring = ring0.shape[0]
    n_steps = z1.shape[0]
    ring = ring0.copy()
    head = 0
    y = y0
    s = s0
    W = w0
    G = gamma0
    sq = np.sqrt(dt)
    lz = 0.0
    util = 0.0
    if G > 0.0:
        prev_node = w_util[0] * G ** one_m_gamma
    elif one_m_gamma > 0.0:
        prev_node = 0.0
    else:
        prev_node = -np.inf
    minG = G
    neg = 0
    iobs = 0
    n_obs = obs_steps.shape[0]
    for i in range(n_steps + 1):
        if record and iobs < n_obs and obs_steps[iobs] == i:
            dot = 0.0
            for j in range(nring):
                dot += hw_rows[iobs, j] * ring[(head + j) % nring]
            series_out[iobs, 0] = W
            series_out[iobs, 1] = y
            series_out[iobs, 2] = G
            series_out[iobs, 3] = W + g_arr[i] * y + dot
            series_out[iobs, 4] = c_mult[i] * inv_f[i] * G
            series_out[iobs, 5] = b_coef * inv_f[i] * G
            iobs += 1
        if i == n_ret:
            out[1] = W
            out[2] = G
            out[7] = lz
        if i > 0 and i % ustride == 0 and i <= n_ret:
            if G > 0.0:
                node = w_util[i] * G ** one_m_gamma
            elif one_m_gamma > 0.0:
                node = 0.0
            else:
                node = -np.inf
            util += 0.5 * (prev_node + node) * (dt * ustride)
            prev_node = node
        if i == n_steps:
            break
        c = c_mult[i] * inv_f[i] * G
        B = b_coef * inv_f[i] * G
        gy = g_arr[i] * y
        u = cu1 * z1[i] * sq * sign
        if has_z2:
            v = (cv1 * z1[i] + cv2 * z2[i]) * sq * sign
        else:
            v = cv1 * z1[i] * sq * sign
        lz += u
        inc = y if i < n_ret else 0.0
        Gg = G * inv_gamma
        # theta'(mu - r 1) = (G/gamma)|kappa|^2 - g y sigma_y'kappa
        # theta'sigma dZ   = (G/gamma) u       - g y v
        W += (rd * W + Gg * k2 - gy * syk + inc - c - delta * B) * dt + Gg * u - gy * v
        G += (rd * G - c - delta * B + Gg * k2) * dt + Gg * u
        if G < minG:
            minG = G
        if const_phi:
            integ = phi_level * s
        else:
            integ = _income_integral(ring, head, phi, wz, dt)
        y_new = y + (mu_y * y + integ) * dt + y * v
        if y_new < 0.0:
            neg += 1
        oldest = ring[head]
        second = ring[(head + 1) % nring]
        s += 0.5 * dt * (y_new + y) - 0.5 * dt * (oldest + second)
        ring[head] = y_new
        head = (head + 1) % nring
        y = y_new
    out[0] = util
    out[3] = minG
    out[4] = W
    out[5] = G
    out[6] = y
    out[8] = neg


@njit(cache=True, parallel=True)
def lifecycle_chunk(z1m, z2m, has_z2, n_legs, cu1, cv1, cv2,
                    w0, gamma0, y0, ring0, s0,
                    const_phi, phi_level, phi, wz,
                    g_arr, inv_f, c_mult, b_coef, w_util,
                    mu_y, rd, delta, k2, syk, inv_gamma, one_m_gamma,
                    dt, n_ret, ustride,
                    obs_steps, hw_rows, record):
    """Chunk driver: scalar outputs always; per-path series when record."""
    rows = z1m.shape[0]
    n_obs = obs_steps.shape[0]
    out = np.zeros((rows, n_legs, N_SCALAR_OUT))
    if record:
        series = np.zeros((rows, n_legs, n_obs, 6))
    else:
        series = np.zeros((1, 1, 1, 6))
    for p in prange(rows):
        dummy = np.zeros((1, 6))
        for leg in range(n_legs):
            sign = 1.0 if leg == 0 else -1.0
            target = series[p, leg] if record else dummy
            _lifecycle_leg(z1m[p], z2m[p], has_z2, sign, cu1, cv1, cv2,
                           w0, gamma0, y0, ring0, s0,
                           const_phi, phi_level, phi, wz,
                           g_arr, inv_f, c_mult, b_coef, w_util,
                           mu_y, rd, delta, k2, syk, inv_gamma, one_m_gamma,
                           dt, n_ret, ustride,
                           obs_steps, hw_rows, record, target, out[p, leg])
    return out, series


@njit(cache=True, parallel=True)
def gamma_exact_chunk(zm, a_cum_obs, half_var_t, kg, obs_dt_sqrt, gamma0):
    """Exact lognormal total-wealth paths sampled on the observation grid.

    zm: (rows, n_obs) standard normals; a_cum_obs: cumulative drift integral
    at the observation times; half_var_t: |kappa/gamma|^2 t / 2 at those times;
    kg = |kappa|/gamma. Returns (paths at obs times, per-path min).
    """
    rows, n_obs = zm.shape
    out = np.empty((rows, n_obs))
    mins = np.empty(rows)
    for p in prange(rows):
        bz = 0.0
        worst = np.inf
        for o in range(n_obs):
            bz += obs_dt_sqrt[o] * zm[p, o]
            val = gamma0 * np.exp(a_cum_obs[o] - half_var_t[o] + kg * bz)
            out[p, o] = val
            if val < worst:
                worst = val
        mins[p] = worst
    return out, mins
