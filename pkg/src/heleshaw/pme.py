"""Explicit finite-m solver for rho_t - div(rho grad p) = lambda rho, p = m/(m-1) rho^(m-1).

The diffusion term is written in conservative form L(rho^m); the scheme is
forward Euler with dt = cfl * h^2 / (2 max m rho^(m-1)), which keeps the update
monotone (order preserving) and non-negative.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K
from .grid import BoundaryData, Field, Grid, SourceCoefficient, integrate, laplacian_values
from .obstacle import unconstrained_solve

log = logging.getLogger(__name__)

#: nodes kept free between the support and the outer truncation boundary
SUPPORT_MARGIN = 5
MARGIN_PRESSURE = 1e-8


class SolverError(RuntimeError):
    """Raised when a run cannot continue (blow-up, support too close to the box)."""


@dataclass(frozen=True)
class PMEParams:
    m: float
    t_end: float
    cfl_safety: float = 0.9
    max_dt: float = 1e-3
    dt_fixed: float | None = None

    def __post_init__(self) -> None:
        if not self.m > 1:
            raise ValueError("m must be > 1")
        if not 0 < self.cfl_safety <= 1:
            raise ValueError("cfl_safety must lie in (0, 1]")
        if self.max_dt <= 0:
            raise ValueError("max_dt must be positive")


@dataclass(frozen=True, eq=False)
class PMEState:
    t: float
    rho: Field

    def __post_init__(self) -> None:
        if np.any(self.rho.values < 0):
            raise ValueError("density must be non-negative")


@dataclass(eq=False)
class Trajectory:
    """Frames of a run on a fixed grid.

    ``rho`` and ``p`` have shape (frames, nodes).  ``extra`` holds further
    per-frame columns (e.g. ``c``, ``sat``, ``active``); ``ledger`` holds
    named per-frame (PME) or per-step (limit) diagnostic series.
    """

    grid: Grid
    times: np.ndarray
    rho: np.ndarray
    p: np.ndarray
    extra: dict = field(default_factory=dict)
    ledger: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def frame(self, k: int) -> dict:
        out = {"t": float(self.times[k]), "rho": self.rho[k], "p": self.p[k]}
        for name, arr in self.extra.items():
            out[name] = arr[k]
        return out

    def index_at(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))

    def mass(self) -> np.ndarray:
        return self.rho @ self.grid.quadrature

    def __len__(self) -> int:
        return len(self.times)


def _int_exponent(m: float) -> int:
    return int(m) if float(m).is_integer() and m < 4096 else 0


def pressure_of_density(rho, m: float):
    """Pointwise p = m/(m-1) rho^(m-1); accepts a Field or an array."""
    if not m > 1:
        raise ValueError("m must be > 1")
    values = rho.values if isinstance(rho, Field) else np.asarray(rho, dtype=float)
    if np.any(values < 0):
        raise ValueError("density must be non-negative")
    p = m / (m - 1.0) * values ** (m - 1.0)
    return Field(rho.grid, p) if isinstance(rho, Field) else p


def density_of_pressure(p, m: float):
    values = p.values if isinstance(p, Field) else np.asarray(p, dtype=float)
    rho = ((m - 1.0) / m * np.maximum(values, 0.0)) ** (1.0 / (m - 1.0))
    return Field(p.grid, rho) if isinstance(p, Field) else rho


def _cfl_constant(grid: Grid) -> float:
    cm, cp = grid.stencil
    return float(np.max(cm + cp))


def stable_dt(grid: Grid, rho: np.ndarray, m: float, params: PMEParams) -> float:
    if params.dt_fixed:
        return min(params.dt_fixed, params.max_dt)
    dmax = float(np.max(m * np.maximum(rho, 0.0) ** (m - 1.0)))
    if dmax <= 0:
        return params.max_dt
    return min(params.cfl_safety / (_cfl_constant(grid) * dmax), params.max_dt)


def _boundary_value(f: BoundaryData | None, t: float, m: float) -> float:
    return 0.0 if f is None else f(t) ** (1.0 / (m - 1.0))


def margin_density(m: float) -> float:
    """Density at which the pressure equals MARGIN_PRESSURE."""
    return ((m - 1.0) / m * MARGIN_PRESSURE) ** (1.0 / (m - 1.0))


def check_margin(grid: Grid, rho: np.ndarray, m: float) -> None:
    """Abort once the pressure support comes within SUPPORT_MARGIN cells of the outer boundary."""
    nz = np.nonzero(rho > margin_density(m))[0]
    if nz.size and nz[-1] >= grid.n_cells - SUPPORT_MARGIN:
        raise SolverError(
            f"support reached x = {grid.nodes[nz[-1]]:.4g}, within {SUPPORT_MARGIN} cells of the outer boundary"
        )


def step_pme(state: PMEState, params: PMEParams, lam, f: BoundaryData | None,
             dt: float | None = None) -> PMEState:
    """One explicit step.

    ``lam`` is a SourceCoefficient, or a callable ``(x, t, p) -> rate`` for
    pressure-dependent reaction rates.  The step never crosses a stage switch
    of a SourceCoefficient.
    """
    grid = state.rho.grid
    rho = np.array(state.rho.values)
    m = params.m
    if dt is None:
        dt = stable_dt(grid, rho, m, params)
    if isinstance(lam, SourceCoefficient):
        dt = min(dt, lam.next_switch(state.t) - state.t)
        rate = lam.profile(grid, state.t)
    else:
        rate = np.asarray(lam(grid.nodes, state.t, pressure_of_density(rho, m)), dtype=float)
    cm, cp = grid.stencil
    rhs = K.pme_rate(rho, cm, cp, np.broadcast_to(rate, rho.shape).astype(float), m, _int_exponent(m))
    new = rho + dt * rhs
    if not np.all(np.isfinite(new)):
        raise SolverError(f"non-finite density at t = {state.t}")
    new = np.maximum(new, 0.0)
    t_new = state.t + dt
    new[0] = _boundary_value(f, t_new, m)
    new[-1] = 0.0
    check_margin(grid, new, m)
    return PMEState(t_new, Field(grid, new))


def _stage_breaks(lam, t0: float, t1: float) -> list[float]:
    if not isinstance(lam, SourceCoefficient):
        return []
    return [ts for ts in lam.switch_times if t0 < ts < t1]


def run_pme(rho0: Field, params: PMEParams, lam, f: BoundaryData | None,
            output_times: Sequence[float] | None = None,
            hook: Callable[[dict], None] | None = None) -> Trajectory:
    """Integrate to ``params.t_end`` and record frames at ``output_times``.

    The per-frame ledger contains the mass, the time-integrated inner flux,
    the time-integrated source term, the maximal per-step relative defect of
    the discrete mass identity, the clip count and the step count.  ``hook``
    (if given) is called with each ledger row.
    """
    grid = rho0.grid
    m = params.m
    if output_times is None:
        output_times = [0.0, params.t_end]
    outs = sorted(set(float(t) for t in output_times if 0.0 <= t <= params.t_end))
    if not outs or outs[0] > 0.0:
        outs = [0.0] + outs
    rho = np.array(rho0.values, dtype=float)
    if np.any(rho < 0):
        raise ValueError("initial density must be non-negative")
    rho[0] = _boundary_value(f, 0.0, m)
    rho[-1] = 0.0
    check_margin(grid, rho, m)

    cm, cp = grid.stencil
    q = grid.quadrature
    wf = grid.face_weights
    m_int = _int_exponent(m)
    cmax = _cfl_constant(grid)
    stats = np.zeros(K.ST_SIZE)
    stats[K.ST_DTMIN] = np.inf
    if f is None:
        f_times, f_vals = np.array([0.0]), np.array([1.0])
    else:
        f_times, f_vals = np.array(f.times), np.array(f.values)

    frames, ledger_rows = [], []
    t = 0.0
    mass0 = integrate(grid, rho)

    def record(t_now: float) -> None:
        frames.append(rho.copy())
        row = {
            "t": t_now,
            "mass": integrate(grid, rho),
            "influx": stats[K.ST_INFLUX],
            "outflux": stats[K.ST_OUTFLUX],
            "source": stats[K.ST_SOURCE],
            "defect": stats[K.ST_DEFECT],
            "clipped": stats[K.ST_CLIPPED],
            "steps": stats[K.ST_STEPS],
            "max_p": float(np.max(pressure_of_density(rho, m))),
        }
        ledger_rows.append(row)
        if hook is not None:
            hook(row)

    for t_out in outs:
        if t_out <= t:
            if t_out == 0.0 and not frames:
                record(0.0)
            continue
        for seg_end in _stage_breaks(lam, t, t_out) + [t_out]:
            if isinstance(lam, SourceCoefficient):
                rate = lam.profile(grid, t)
                t, status = K.pme_advance(
                    rho, cm, cp, q, wf[0] / grid.h, wf[-1] / grid.h, rate, float(m), m_int,
                    t, seg_end, f_times, f_vals, f is not None, params.cfl_safety, cmax,
                    params.max_dt, params.dt_fixed or 0.0, SUPPORT_MARGIN, margin_density(m), stats,
                )
                if status == K.STATUS_NONFINITE:
                    raise SolverError(f"non-finite density at t = {t}")
                if status == K.STATUS_MARGIN:
                    raise SolverError(f"support reached the outer margin at t = {t}")
            else:
                t = _advance_python(rho, grid, params, lam, f, t, seg_end, stats)
        record(t)

    rho_frames = np.array(frames)
    p_frames = pressure_of_density(rho_frames, m)
    ledger = {k: np.array([r[k] for r in ledger_rows]) for k in ledger_rows[0]}
    ledger["mass0"] = np.array([mass0])
    log.debug("run_pme m=%s: %d steps, max defect %.2e", m, stats[K.ST_STEPS], stats[K.ST_DEFECT])
    return Trajectory(
        grid, np.array(outs[: len(frames)]), rho_frames, p_frames, ledger=ledger,
        meta={"solver": "pme", "m": m, "dt_min": stats[K.ST_DTMIN], "dt_max": stats[K.ST_DTMAX]},
    )


def explicit_update(rho: np.ndarray, grid: Grid, m: float, rate: np.ndarray, dt: float,
                    stats: np.ndarray) -> np.ndarray:
    """One forward-Euler step of rho_t = L(rho^m) + rate*rho on interior nodes.

    Boundary nodes of the result are left for the caller to set.  The mass
    ledger entries of ``stats`` are accumulated as in the compiled kernel.
    """
    cm, cp = grid.stencil
    q = grid.quadrature
    wf = grid.face_weights
    rate = np.broadcast_to(np.asarray(rate, dtype=float), rho.shape).astype(float)
    rhs = K.pme_rate(rho, cm, cp, rate, float(m), _int_exponent(m))
    new = rho + dt * rhs
    if not np.all(np.isfinite(new)):
        raise SolverError("non-finite density")
    stats[K.ST_CLIPPED] += np.count_nonzero(new < 0)
    new = np.maximum(new, 0.0)
    u0, u1, un1, un = (rho[0] ** m, rho[1] ** m, rho[-2] ** m, rho[-1] ** m)
    influx = wf[0] / grid.h * (u0 - u1)
    outflux = wf[-1] / grid.h * (un - un1)
    src = float(np.dot(q, rate * rho))
    dmass = float(np.dot(q, new - rho))
    mass = float(np.dot(q, new))
    stats[K.ST_INFLUX] += dt * influx
    stats[K.ST_OUTFLUX] += dt * outflux
    stats[K.ST_SOURCE] += dt * src
    stats[K.ST_DEFECT] = max(stats[K.ST_DEFECT],
                             abs(dmass - dt * (influx + outflux + src)) / max(mass, 1e-300))
    stats[K.ST_STEPS] += 1
    stats[K.ST_DTMIN] = min(stats[K.ST_DTMIN], dt)
    stats[K.ST_DTMAX] = max(stats[K.ST_DTMAX], dt)
    return new


def _step_to(t: float, t_end: float, dt: float) -> tuple[float, float]:
    if dt >= t_end - t or t_end - t - dt < 1e-12 * max(1.0, t_end):
        return t_end - t, t_end
    return dt, t + dt


def _advance_python(rho, grid, params, rate_fn, f, t, t_end, stats) -> float:
    """Slow path for pressure-dependent reaction rates; same arithmetic as the kernel."""
    m = params.m
    while t < t_end:
        dt, t_new = _step_to(t, t_end, stable_dt(grid, rho, m, params))
        p = pressure_of_density(rho, m)
        stats[K.ST_MAXP] = max(stats[K.ST_MAXP], float(np.max(p)))
        rate = rate_fn(grid.nodes, t, p)
        new = explicit_update(rho, grid, m, rate, dt, stats)
        new[0] = _boundary_value(f, t_new, m)
        new[-1] = 0.0
        rho[:] = new
        t = t_new
        check_margin(grid, rho, m)
    return t


# --- initial data -----------------------------------------------------------

def harmonic_pressure(grid: Grid, front: float, f: float, lam: float = 0.0) -> Field:
    """Solve -L p0 = lam on [inner, front] with p0(inner) = f, p0 = 0 beyond ``front``.

    The Dirichlet zero is imposed at the node nearest to ``front``.
    """
    k = grid.index_of(front)
    if k < 2:
        raise ValueError("front must lie at least two cells from the inner boundary")
    p = unconstrained_solve(grid, float(lam), f, stop=k)
    return Field(grid, np.maximum(p, 0.0))


def prepare_initial_density(p0: Field, rho_ext: Field, m: float) -> Field:
    """rho0_m = max(p0^(1/m), (rho_E - a_m)_+) with a_m = 1/ln m."""
    if not m > math.e:
        raise ValueError("m must exceed e so that a_m = 1/ln m < 1")
    if np.any(rho_ext.values < 0) or np.any(rho_ext.values >= 1):
        raise ValueError("external density must satisfy 0 <= rho_E < 1")
    if np.any(p0.values < 0):
        raise ValueError("initial pressure must be non-negative")
    a_m = 1.0 / math.log(m)
    rho = np.maximum(p0.values ** (1.0 / m), np.maximum(rho_ext.values - a_m, 0.0))
    return Field(p0.grid, rho)


@dataclass
class InitialDataReport:
    lower_ok: bool
    upper_ok: bool
    lower_violations: int
    upper_violations: int
    lower_barrier_positive: bool
    l1_rate: float
    l1_gradient: float
    lower_barrier: np.ndarray = field(repr=False)
    upper_barrier: np.ndarray = field(repr=False)

    @property
    def ok(self) -> bool:
        return self.lower_ok and self.upper_ok and self.lower_barrier_positive

    def as_dict(self) -> dict:
        return {
            "lower_ok": self.lower_ok, "upper_ok": self.upper_ok,
            "lower_violations": self.lower_violations, "upper_violations": self.upper_violations,
            "lower_barrier_positive": self.lower_barrier_positive,
            "l1_rate": self.l1_rate, "l1_gradient": self.l1_gradient,
        }


def _dirichlet_barrier(grid: Grid, radius: float, rhs: float, inner_value: float) -> np.ndarray:
    k = grid.index_of(radius)
    if k < 2:
        raise ValueError("barrier radius too close to the inner boundary")
    return unconstrained_solve(grid, rhs, inner_value, stop=k)


def validate_initial_data(rho0: Field, m: float, lam: SourceCoefficient, f: BoundaryData,
                          r_lower: float, r_upper: float, rtol: float = 1e-12) -> InitialDataReport:
    """Check the barrier bounds phi_lower^(1/m) <= rho0 <= phi_upper^(1/m) nodewise.

    The barriers solve -L phi = Lambda + 1 on [inner, r_upper] and
    -L phi = -Lambda on [inner, r_lower], both equal to f^(m/(m-1)) at the
    inner boundary.  Also reports discrete L1 norms of L(rho0^m) + lambda rho0
    and of the gradient of rho0.
    """
    grid = rho0.grid
    big = lam.bound
    fb = f(0.0) ** (m / (m - 1.0))
    upper = np.maximum(_dirichlet_barrier(grid, r_upper, big + 1.0, fb), 0.0)
    lower_raw = _dirichlet_barrier(grid, r_lower, -big, fb)
    k_low = grid.index_of(r_lower)
    positive = bool(np.all(lower_raw[:k_low] > 0))
    lower = np.maximum(lower_raw, 0.0)
    r = rho0.values
    lo_b = lower ** (1.0 / m)
    up_b = upper ** (1.0 / m)
    low_bad = r < lo_b * (1 - rtol)
    up_bad = r > up_b * (1 + rtol) + 0.0
    rate = laplacian_values(grid, r**m) + lam.profile(grid, 0.0) * r
    grad = np.abs(np.diff(r)) * grid.weights[:-1]
    return InitialDataReport(
        lower_ok=not low_bad.any(), upper_ok=not up_bad.any(),
        lower_violations=int(low_bad.sum()), upper_violations=int(up_bad.sum()),
        lower_barrier_positive=positive,
        l1_rate=integrate(grid, np.abs(rate)),
        l1_gradient=float(grad.sum()),
        lower_barrier=lower, upper_barrier=upper,
    )
