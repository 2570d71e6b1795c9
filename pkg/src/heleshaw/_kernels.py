"""Compiled inner loops: explicit PME stepping and projected SOR sweeps."""
from __future__ import annotations

import numpy as np
from numba import njit

# indices into the PME statistics vector
ST_STEPS = 0
ST_INFLUX = 1      # time-integrated flux through the inner boundary
ST_OUTFLUX = 2     # time-integrated (signed) flux through the outer boundary
ST_SOURCE = 3      # time-integrated sum q_i lambda_i rho_i
ST_DEFECT = 4      # max per-step relative mass-ledger defect
ST_CLIPPED = 5     # negative undershoots set to zero
ST_MAXP = 6        # max pressure seen
ST_DTMIN = 7
ST_DTMAX = 8
ST_SIZE = 9

STATUS_OK = 0
STATUS_NONFINITE = 1
STATUS_MARGIN = 2


@njit(cache=True)
def mpow(x, m, m_int):
    """x**m with a binary-exponentiation fast path for integer m."""
    if m_int > 0:
        result = 1.0
        base = x
        e = m_int
        while e > 0:
            if e & 1:
                result *= base
            base *= base
            e >>= 1
        return result
    if x <= 0.0:
        return 0.0
    return x ** m


@njit(cache=True)
def support_end(rho):
    for i in range(rho.size - 1, -1, -1):
        if rho[i] > 0.0:
            return i
    return 0


@njit(cache=True)
def pme_advance(rho, cm, cp, q, flux_in_w, flux_out_w, lam, m, m_int, t, t_end,
                f_times, f_vals, inject, cfl, cmax, max_dt, dt_fixed, margin, margin_rho, stats):
    """Advance rho_t = L(rho^m) + lam*rho from t to t_end with lam frozen.

    Returns (t_reached, status).  ``stats`` is accumulated in place.  The
    run stops with STATUS_MARGIN once rho exceeds ``margin_rho`` within
    ``margin`` cells of the outer boundary.
    """
    n = rho.size
    u = np.zeros(n)
    hi = support_end(rho)
    mass = 0.0
    for i in range(1, n - 1):
        mass += q[i] * rho[i]
    inv = 1.0 / (m - 1.0)
    while t < t_end:
        top = min(hi + 1, n - 1)
        dmax = 0.0
        for i in range(0, top + 1):
            ui = mpow(rho[i], m, m_int)
            u[i] = ui
            if rho[i] > 0.0:
                d = m * ui / rho[i]
                if d > dmax:
                    dmax = d
        pmax = dmax * inv
        if pmax > stats[ST_MAXP]:
            stats[ST_MAXP] = pmax
        if dt_fixed > 0.0:
            dt = dt_fixed
        elif dmax > 0.0:
            dt = cfl / (cmax * dmax)
        else:
            dt = max_dt
        if dt > max_dt:
            dt = max_dt
        remaining = t_end - t
        if dt >= remaining or remaining - dt < 1e-12 * max(1.0, t_end):
            dt = remaining
            t_new = t_end
        else:
            t_new = t + dt
        influx = flux_in_w * (u[0] - u[1])
        outflux = flux_out_w * (u[n - 1] - u[n - 2])
        src = 0.0
        dmass = 0.0
        last = min(top, n - 2)
        for i in range(1, last + 1):
            r = rho[i]
            lu = cp[i] * (u[i + 1] - u[i]) - cm[i] * (u[i] - u[i - 1])
            rn = r + dt * (lu + lam[i] * r)
            src += q[i] * lam[i] * r
            if rn < 0.0:
                stats[ST_CLIPPED] += 1.0
                rn = 0.0
            dmass += q[i] * (rn - r)
            rho[i] = rn
        expected = dt * (influx + outflux + src)
        mass += dmass
        defect = abs(dmass - expected) / max(abs(mass), 1e-300)
        if defect > stats[ST_DEFECT]:
            stats[ST_DEFECT] = defect
        if inject:
            fv = np.interp(t_new, f_times, f_vals)
            rho[0] = fv ** inv
        else:
            rho[0] = 0.0
        rho[n - 1] = 0.0
        stats[ST_STEPS] += 1.0
        stats[ST_INFLUX] += dt * influx
        stats[ST_OUTFLUX] += dt * outflux
        stats[ST_SOURCE] += dt * src
        if dt < stats[ST_DTMIN]:
            stats[ST_DTMIN] = dt
        if dt > stats[ST_DTMAX]:
            stats[ST_DTMAX] = dt
        t = t_new
        while hi + 1 < n and rho[hi + 1] > 0.0:
            hi += 1
        for i in range(0, last + 1):
            if not np.isfinite(rho[i]):
                return t, STATUS_NONFINITE
        if hi >= n - 1 - margin:
            for i in range(n - 1 - margin, n - 1):
                if rho[i] > margin_rho:
                    return t, STATUS_MARGIN
    return t, STATUS_OK


@njit(cache=True)
def pme_rate(rho, cm, cp, rate, m, m_int):
    """Right-hand side L(rho^m) + rate*rho on interior nodes (zero at boundaries)."""
    n = rho.size
    u = np.empty(n)
    for i in range(n):
        u[i] = mpow(rho[i], m, m_int)
    out = np.zeros(n)
    for i in range(1, n - 1):
        out[i] = cp[i] * (u[i + 1] - u[i]) - cm[i] * (u[i] - u[i - 1]) + rate[i] * rho[i]
    return out


@njit(cache=True)
def psor_affine(p, free, s0, s1, cm, cp, omega, tol, max_iter):
    """Projected SOR for -L p = s0 + s1*p, p >= 0, on nodes where ``free``.

    Non-free nodes keep their value (Dirichlet data or pinned zeros).
    s1 must be <= 0 so that every nodal equation has a unique root.
    Returns (iterations, last max update).
    """
    n = p.size
    lo = n
    hi = -1
    for i in range(1, n - 1):
        if free[i]:
            if i < lo:
                lo = i
            hi = i
    if hi < 0:
        return 0, 0.0
    delta = 0.0
    for it in range(max_iter):
        delta = 0.0
        for i in range(lo, hi + 1):
            if not free[i]:
                continue
            gs = (cm[i] * p[i - 1] + cp[i] * p[i + 1] + s0[i]) / (cm[i] + cp[i] - s1[i])
            new = p[i] + omega * (gs - p[i])
            if new < 0.0:
                new = 0.0
            d = abs(new - p[i])
            if d > delta:
                delta = d
            p[i] = new
        if delta < tol:
            return it + 1, delta
    return max_iter, delta
