"""Time stepping of the incompressible (Hele-Shaw) limit.

Each step of length dt does, in order:

1. growth/decay: rho <- min(1, rho exp(lambda dt)) on nodes carrying no
   pressure (exact for rho_t = lambda rho);
2. pressure: obstacle problem on the saturated set with source lambda(t_new),
   then mu = L p + lambda 1{p > 0};
3. expansion: rho <- rho + dt mu on pressure-free nodes; any excess over 1 is
   carried outward to the next unsaturated node, conserving mass.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import BoundaryData, Field, Grid, SourceCoefficient
from .obstacle import ObstacleProblem, boundary_measure, complementarity_residual, solve_obstacle
from .pme import SUPPORT_MARGIN, SolverError, Trajectory

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LimitParams:
    t_end: float
    dt: float = 1e-3
    eps_sat: float = 1e-6
    p_tol: float = 1e-8          # relative to f
    obstacle_tol: float = 1e-10
    omega: float | str = "auto"
    max_iter: int = 500_000

    def __post_init__(self) -> None:
        if not 0 < self.eps_sat < 1e-2:
            raise ValueError("eps_sat must be small and positive")
        if self.dt <= 0 or self.t_end < 0:
            raise ValueError("dt must be positive and t_end non-negative")
        if self.obstacle_tol <= 0:
            raise ValueError("obstacle_tol must be positive")


@dataclass(frozen=True, eq=False)
class LimitState:
    t: float
    rho: Field
    p: Field
    sat: np.ndarray
    solved_on: np.ndarray | None = None   # mask used for the last pressure solve

    def __post_init__(self) -> None:
        r = self.rho.values
        if np.any(r < 0) or np.any(r > 1 + 1e-12):
            raise ValueError("limit density must lie in [0, 1]")
        if np.any(self.p.values < 0):
            raise ValueError("pressure must be non-negative")

    @property
    def active(self) -> np.ndarray:
        return self.p.values > 0


def saturated_set(rho, eps_sat: float = 1e-6) -> np.ndarray:
    """Nodes with rho >= 1 - eps_sat, always including the injection node."""
    values = rho.values if isinstance(rho, Field) else np.asarray(rho)
    sat = values >= 1.0 - eps_sat
    sat[0] = True
    return sat


def _lam_values(lam, grid: Grid, t: float) -> np.ndarray:
    if isinstance(lam, SourceCoefficient):
        return lam.profile(grid, t)
    return np.broadcast_to(np.asarray(lam, dtype=float), (grid.size,)).copy()


def _solve_pressure(grid, sat, lam_vals, fval, params, start):
    problem = ObstacleProblem(grid, sat, lam_vals, fval)
    return solve_obstacle(problem, tol=params.obstacle_tol * max(fval, 1.0), max_iter=params.max_iter,
                          omega=params.omega, start=start)


def initial_state(rho0: Field, lam, f: BoundaryData, params: LimitParams) -> LimitState:
    grid = rho0.grid
    rho = np.clip(np.array(rho0.values, dtype=float), 0.0, 1.0)
    rho[0] = 1.0
    rho[-1] = 0.0
    sat = saturated_set(rho, params.eps_sat)
    sol = _solve_pressure(grid, sat, _lam_values(lam, grid, 0.0), f(0.0), params, None)
    return LimitState(0.0, Field(grid, rho), sol.p, sat, sat.copy())


def _carry_outward(rho: np.ndarray, q: np.ndarray, stop: int) -> tuple[int, float]:
    """Push excess over 1 to the next node outward, conserving sum(q rho).

    Returns (last node touched, mass moved).
    """
    carry = 0.0
    moved = 0.0
    last = 0
    for i in range(1, rho.size - 1):
        if carry > 0.0:
            rho[i] += carry / q[i]
            carry = 0.0
            last = i
        if rho[i] > 1.0:
            carry = (rho[i] - 1.0) * q[i]
            moved += carry
            rho[i] = 1.0
            if i + 1 >= stop:
                raise SolverError("overshoot cascade reached the outer margin; reduce dt")
    return last, moved


def step_limit(state: LimitState, lam, f: BoundaryData, params: LimitParams,
               dt: float | None = None, info: dict | None = None) -> LimitState:
    """Advance one step; ``dt`` must not straddle a stage switch of ``lam``.

    If ``info`` is a dict, the per-step ledger entries are written into it.
    """
    grid = state.rho.grid
    q = grid.quadrature
    dt = params.dt if dt is None else dt
    t_new = state.t + dt
    fval = f(t_new)
    ptol = params.p_tol * fval

    rho = np.array(state.rho.values)
    mass_old = float(q @ rho)

    # (i) growth/decay off the pressure support; nodes saturated after the
    # last pressure solve have not been offered pressure yet and are kept
    lam_old = _lam_values(lam, grid, state.t)
    free = state.p.values <= ptol
    if state.solved_on is not None:
        free &= ~(state.sat & ~state.solved_on)
    free[0] = free[-1] = False
    before = rho[free]
    rho[free] = np.minimum(1.0, before * np.exp(lam_old[free] * dt))
    decay = float(q[free] @ (rho[free] - before))

    # (ii) pressure on the saturated set
    sat = saturated_set(rho, params.eps_sat)
    lam_new = _lam_values(lam, grid, t_new)
    solved_on = sat
    sol = _solve_pressure(grid, sat, lam_new, fval, params, state.p.values)
    p = sol.p.values
    mu = boundary_measure(sol.p, lam_new, p_tol=ptol).values
    active = p > ptol
    active[0] = True

    # (iii) expansion by the boundary measure
    target = ~active
    target[-1] = False
    dep = np.where(target, mu, 0.0)
    neg = float(q @ np.minimum(dep, 0.0)) * dt
    dep = np.maximum(dep, 0.0)
    rho += dt * dep
    deposited = float(q @ dep) * dt
    _, moved = _carry_outward(rho, q, grid.n_cells - SUPPORT_MARGIN)
    rho[0] = 1.0
    rho[-1] = 0.0
    sat = saturated_set(rho, params.eps_sat)
    nz = np.nonzero(p > ptol)[0]
    if nz.size and nz[-1] >= grid.n_cells - SUPPORT_MARGIN:
        raise SolverError(f"pressure support reached the outer margin at t = {t_new}")

    if info is not None:
        cm, _ = grid.stencil
        wf = grid.face_weights
        mass_new = float(q @ rho)
        info.update(
            t=t_new,
            mass=mass_new,
            decay=decay,
            deposited=deposited,
            dropped=neg,
            moved=moved,
            defect=abs(mass_new - mass_old - decay - deposited) / max(abs(mass_new), 1e-300),
            influx=dt * wf[0] * (p[0] - p[1]) / grid.h,
            source_active=dt * float(q @ (lam_new * (p > ptol))),
            active_mu=dt * float(q[active] @ mu[active]),
            mu_min=float(np.min(mu[target])) if np.any(target) else 0.0,
            mu_tol=sol.mu_tolerance,
            iterations=sol.iterations,
            residual=sol.residual,
            complementarity=complementarity_residual(sol.p, lam_new, mask=sat),
            graph=float(np.max(p * (1.0 - rho))),
            p_max=float(np.max(p)),
            active_size=int(np.count_nonzero(p > ptol)),
            **front_diagnostics(grid, rho, p, sat, ptol),
        )
    return LimitState(t_new, Field(grid, rho), sol.p, sat, solved_on)


def front_position(grid: Grid, rho: np.ndarray, sat: np.ndarray | None = None,
                   eps_sat: float = 1e-6) -> float:
    """Location of the edge of the saturated set connected to the inner boundary.

    The partly filled node beyond the last saturated one contributes its fill
    fraction relative to the external density, read off the node after it.
    """
    rho = np.asarray(rho)
    if sat is None:
        sat = saturated_set(rho, eps_sat)
    gaps = np.nonzero(~sat)[0]
    k = (gaps[0] - 1) if gaps.size else grid.size - 1
    x = grid.nodes
    if k + 2 >= grid.size:
        return float(x[k])
    rho_e = min(max(rho[k + 2], 0.0), 1.0)
    if rho_e >= 1.0 - 1e-12:
        return float(x[k])
    theta = (rho[k + 1] - rho_e) / (1.0 - rho_e)
    return float(x[k] + grid.h * min(max(theta, 0.0), 1.0))


def front_diagnostics(grid: Grid, rho: np.ndarray, p: np.ndarray, sat: np.ndarray,
                      p_tol: float) -> dict:
    """Front position, pressure gradient across the last active face, rho_E ahead of it.

    ``fronts`` counts the saturated components (the law check needs one).
    """
    pos = front_position(grid, rho, sat)
    act = p > p_tol
    act[0] = True
    a = int(np.argmin(act)) - 1 if not np.all(act) else grid.size - 1
    grad = (p[a] - p[a + 1]) / grid.h if a + 1 < grid.size else 0.0
    gaps = np.nonzero(~sat)[0]
    k = (gaps[0] - 1) if gaps.size else grid.size - 1
    rho_e = float(min(max(rho[k + 2], 0.0), 1.0)) if k + 2 < grid.size else 0.0
    comps = int(np.count_nonzero(np.diff(sat.astype(np.int8)) == 1)) + 1
    return {"front": pos, "grad_front": float(grad), "rho_e_front": rho_e, "fronts": comps}


def _step_schedule(lam, t_end: float, dt: float, outs: Sequence[float]) -> list[float]:
    """Time levels with spacing dt, aligned to stage switches and outputs."""
    marks = sorted({float(t) for t in outs if 0.0 < t <= t_end} | {t_end})
    if isinstance(lam, SourceCoefficient):
        marks = sorted(set(marks) | {s for s in lam.switch_times if 0.0 < s < t_end})
    levels = [0.0]
    for mark in marks:
        start = levels[-1]
        if mark <= start:
            continue
        k = max(1, int(np.ceil((mark - start) / dt - 1e-9)))
        levels.extend(start + (mark - start) * j / k for j in range(1, k))
        levels.append(mark)
    return levels


def run_limit(rho0: Field, lam, f: BoundaryData, params: LimitParams,
              output_times: Sequence[float] | None = None) -> Trajectory:
    """Integrate the limit system to ``params.t_end``.

    Frames hold rho, p and the boolean columns ``sat``/``active``; the ledger
    holds one entry per step (see ``step_limit``).
    """
    grid = rho0.grid
    if output_times is None:
        output_times = [params.t_end]
    outs = sorted({0.0} | {float(t) for t in output_times if 0.0 <= t <= params.t_end})
    levels = _step_schedule(lam, params.t_end, params.dt, outs)
    out_set = set(outs)

    state = initial_state(rho0, lam, f, params)
    frames_rho, frames_p, frames_sat, frames_act, times = [], [], [], [], []

    def record(s: LimitState) -> None:
        times.append(s.t)
        frames_rho.append(s.rho.values.copy())
        frames_p.append(s.p.values.copy())
        frames_sat.append(s.sat.copy())
        frames_act.append(s.p.values > params.p_tol * f(s.t))

    record(state)
    rows = []
    for t_next in levels[1:]:
        info: dict = {}
        state = step_limit(state, lam, f, params, dt=t_next - state.t, info=info)
        state = LimitState(t_next, state.rho, state.p, state.sat, state.solved_on)
        rows.append(info)
        if t_next in out_set:
            record(state)
    ledger = {k: np.array([r[k] for r in rows]) for k in rows[0]} if rows else {}
    ledger["mass0"] = np.array([float(grid.quadrature @ frames_rho[0])])
    return Trajectory(
        grid, np.array(times), np.array(frames_rho), np.array(frames_p),
        extra={"sat": np.array(frames_sat), "active": np.array(frames_act)},
        ledger=ledger,
        meta={"solver": "limit", "dt": params.dt, "eps_sat": params.eps_sat, "p_tol": params.p_tol},
    )


@dataclass
class ExternalDensity:
    times: np.ndarray
    values: np.ndarray             # nan where the node carries pressure
    intervals: list = field(default_factory=list)   # (a, b) with p = 0 on (a, b)


def external_density(traj: Trajectory, x: float, lam: SourceCoefficient, rho0_at_x: float | None = None,
                     p_tol: float | None = None, eps_sat: float | None = None) -> ExternalDensity:
    """Reconstruct rho_E at the node nearest ``x`` from the recorded frames.

    On each maximal run of frames with p = 0, rho_E is rho0(x) exp(int_0^t lambda)
    if the run starts at t = 0 unsaturated, and exp(int_a^t lambda) otherwise,
    where a is the last frame at which the node was still saturated (or the
    last frame with p > 0 if it left saturation at once).
    """
    i = traj.grid.index_of(x)
    xi = float(traj.grid.nodes[i])
    if p_tol is None:
        p_tol = traj.meta.get("p_tol", 1e-8)
    if eps_sat is None:
        eps_sat = traj.meta.get("eps_sat", 1e-6)
    if rho0_at_x is None:
        rho0_at_x = float(traj.rho[0, i])
    zero = traj.p[:, i] <= p_tol
    full = traj.rho[:, i] >= 1.0 - eps_sat
    times = traj.times
    vals = np.full(times.size, np.nan)
    intervals = []
    k = 0
    while k < times.size:
        if not zero[k]:
            k += 1
            continue
        j = k
        while j + 1 < times.size and zero[j + 1]:
            j += 1
        s = k
        while s <= j and full[s]:
            vals[s] = 1.0
            s += 1
        if s > k:
            a, base = float(times[s - 1]), 1.0
        elif k == 0:
            a, base = 0.0, rho0_at_x
        else:
            a, base = float(times[k - 1]), 1.0
        b = float(times[j]) if j + 1 == times.size else float(times[j + 1])
        intervals.append((a, b))
        for r in range(s, j + 1):
            vals[r] = base * float(np.exp(lam.integral(xi, a, float(times[r]))))
        k = j + 1
    return ExternalDensity(times.copy(), vals, intervals)
