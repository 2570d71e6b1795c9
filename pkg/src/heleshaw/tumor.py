"""Tumor growth with nutrient: finite m and the obstacle form of its limit.

    rho_t = L(rho^m) + rho G(p, c)
    c_t   = L c - rho H(c) + (c_B - c) K(p)

on a truncated line with rho = 0, c = c_B at both ends.  The density update
is the explicit scheme of the PME solver; the nutrient is implicit in the
diffusion and explicit in the reaction.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_banded

from . import _kernels as K
from .grid import Field, Grid
from .obstacle import ConcaveSource, ObstacleProblem, ObstacleSolution, complementarity_residual, solve_obstacle
from .pme import (
    SUPPORT_MARGIN, PMEParams, SolverError, Trajectory, _step_to, explicit_update, margin_density,
    pressure_of_density, stable_dt,
)

CLIP_ATOL = 1e-12


@dataclass(frozen=True)
class GrowthLaw:
    """G(p, c) decreasing in p, its p-primitive, consumption H and exchange K.

    All callables act elementwise on arrays.  ``affine`` is (alpha, beta)
    when G = alpha c - beta p, which lets the obstacle solver use the
    compiled sweep.
    """

    G: Callable
    dG: Callable
    primitive: Callable
    H: Callable
    Kx: Callable
    c_B: float = 1.0
    beta: float = 1.0
    affine: tuple | None = None

    @classmethod
    def linear(cls, alpha: float = 1.0, beta: float = 1.0, k0: float = 1.0, c_B: float = 1.0,
               exchange_off: bool = False, p_tol: float = 1e-8) -> "GrowthLaw":
        if beta <= 0 or c_B <= 0:
            raise ValueError("beta and c_B must be positive")
        if exchange_off:
            def Kx(p):
                return k0 * (np.asarray(p) <= p_tol)
        else:
            def Kx(p):
                return np.full(np.shape(p), float(k0))
        return cls(
            G=lambda p, c: alpha * np.asarray(c) - beta * np.asarray(p),
            dG=lambda p, c: np.full(np.broadcast(np.asarray(p), np.asarray(c)).shape, -beta),
            primitive=lambda p, c: alpha * np.asarray(c) * p - 0.5 * beta * np.asarray(p) ** 2,
            H=lambda c: np.asarray(c, dtype=float),
            Kx=Kx,
            c_B=float(c_B),
            beta=float(beta),
            affine=(float(alpha), float(beta)),
        )

    def validate(self, p_max: float = 2.0, samples: int = 21) -> None:
        """Finite-difference checks of the structural hypotheses on a (p, c) lattice."""
        p = np.linspace(0.0, p_max, samples)
        c = np.linspace(0.0, self.c_B, samples)
        P, C = np.meshgrid(p, c, indexing="ij")
        d = 1e-6
        slope = (self.G(P + d, C) - self.G(P, C)) / d
        if np.any(slope > -self.beta * (1 - 1e-6)):
            raise ValueError("dG/dp <= -beta violated")
        prim = self.primitive(P, C)
        if np.any(np.abs(self.primitive(np.zeros_like(C), C)) > 1e-14):
            raise ValueError("primitive must vanish at p = 0")
        if np.any(np.diff(prim, 2, axis=0) > 1e-12 * max(1.0, float(np.max(np.abs(prim))))):
            raise ValueError("primitive must be concave in p")
        if abs(float(self.H(np.array(0.0)))) > 0:
            raise ValueError("H(0) must vanish")
        if np.any(self.H(c) < 0) or np.any(self.Kx(p) < 0):
            raise ValueError("H and K must be non-negative")

    def source(self, c: np.ndarray) -> ConcaveSource:
        affine = None
        if self.affine is not None:
            alpha, beta = self.affine
            affine = (alpha * np.asarray(c, dtype=float), -beta)
        return ConcaveSource(self.G, self.dG, self.primitive, np.asarray(c, dtype=float), affine)


@dataclass(frozen=True, eq=False)
class TumorState:
    t: float
    rho: Field
    c: Field

    def __post_init__(self) -> None:
        if np.any(self.rho.values < 0):
            raise ValueError("density must be non-negative")
        c = self.c.values
        if np.any(c < -CLIP_ATOL) or np.any(c > self.c_bound + CLIP_ATOL):
            raise ValueError("nutrient out of [0, c_B]")

    @property
    def c_bound(self) -> float:
        return float(self.c.values[0])


def _nutrient_matrix(grid: Grid, dt: float) -> np.ndarray:
    """Banded form of I - dt L with identity rows at the Dirichlet ends."""
    cm, cp = grid.stencil
    n = grid.size
    ab = np.zeros((3, n))
    ab[1, :] = 1.0
    ab[1, 1:-1] += dt * (cm[1:-1] + cp[1:-1])
    ab[0, 2:] = -dt * cp[1:-1]
    ab[2, :-2] = -dt * cm[1:-1]
    return ab


def nutrient_update(c: np.ndarray, rho: np.ndarray, p: np.ndarray, law: GrowthLaw, grid: Grid,
                    dt: float) -> tuple[np.ndarray, int]:
    """Solve (I - dt L) c_new = c + dt (-rho H(c) + (c_B - c) K(p)); returns (c_new, clips)."""
    rhs = c + dt * (-rho * law.H(c) + (law.c_B - c) * law.Kx(p))
    rhs[0] = rhs[-1] = law.c_B
    new = solve_banded((1, 1), _nutrient_matrix(grid, dt), rhs)
    clips = int(np.count_nonzero(new < -CLIP_ATOL) + np.count_nonzero(new > law.c_B + CLIP_ATOL))
    return np.clip(new, 0.0, law.c_B), clips


def _check_support(grid: Grid, rho: np.ndarray, m: float) -> None:
    nz = np.nonzero(rho > margin_density(m))[0]
    if nz.size and (nz[0] <= SUPPORT_MARGIN or nz[-1] >= grid.n_cells - SUPPORT_MARGIN):
        raise SolverError("tumor support reached the truncation margin")


def _rate(law: GrowthLaw, p, c) -> np.ndarray:
    return np.asarray(law.G(p, c), dtype=float)


def step_tumor(state: TumorState, m: float, law: GrowthLaw, dt: float | None = None,
               params: PMEParams | None = None, stats: np.ndarray | None = None,
               frozen_nutrient: bool = False) -> tuple[TumorState, int]:
    """One step; returns (new state, nutrient clip count)."""
    grid = state.rho.grid
    params = params or PMEParams(m=m, t_end=np.inf)
    if stats is None:
        stats = _new_stats()
    rho = np.array(state.rho.values)
    c = np.array(state.c.values)
    if dt is None:
        dt = stable_dt(grid, rho, m, params)
    p = pressure_of_density(rho, m)
    new = explicit_update(rho, grid, m, _rate(law, p, c), dt, stats)
    new[0] = new[-1] = 0.0
    clips = 0
    if not frozen_nutrient:
        c, clips = nutrient_update(c, rho, p, law, grid, dt)
    _check_support(grid, new, m)
    return TumorState(state.t + dt, Field(grid, new), Field(grid, c)), clips


def _new_stats() -> np.ndarray:
    stats = np.zeros(K.ST_SIZE)
    stats[K.ST_DTMIN] = np.inf
    return stats


def tumor_obstacle(mask, c: Field, law: GrowthLaw, tol: float = 1e-10, omega=None,
                   max_iter: int = 500_000) -> ObstacleSolution:
    """Limit pressure: obstacle problem on ``mask`` with the concave source G(., c)."""
    grid = c.grid
    mask = np.array(mask.values if isinstance(mask, Field) else mask, dtype=bool)
    problem = ObstacleProblem(grid, mask, law.source(c.values), 0.0)
    return solve_obstacle(problem, tol=tol, max_iter=max_iter, omega=omega)


def tumor_complementarity(p: Field, c: np.ndarray, law: GrowthLaw) -> float:
    """Discrete integral of |p (L p + G(p, c))|."""
    return complementarity_residual(p, lambda v: law.G(v, c))


def run_tumor(rho0: Field, c0: Field, m: float, law: GrowthLaw, T: float,
              output_times: Sequence[float] | None = None, params: PMEParams | None = None,
              frozen_nutrient: bool = False) -> Trajectory:
    """Integrate to T; frames carry rho, p and ``c``.

    The ledger has, per frame, the complementarity residual of the finite-m
    pressure, the cumulative nutrient clip count and the mass ledger.
    """
    grid = rho0.grid
    params = params or PMEParams(m=m, t_end=T)
    if output_times is None:
        output_times = [T]
    outs = sorted({0.0} | {float(t) for t in output_times if 0.0 <= t <= T})
    rho = np.array(rho0.values, dtype=float)
    rho[0] = rho[-1] = 0.0
    c = np.clip(np.array(c0.values, dtype=float), 0.0, law.c_B)
    c[0] = c[-1] = law.c_B
    _check_support(grid, rho, m)
    mass0 = float(grid.quadrature @ rho)
    state = TumorState(0.0, Field(grid, rho), Field(grid, c))
    stats = _new_stats()
    clips = 0
    frames, cs, rows = [], [], []

    def record(s: TumorState) -> None:
        frames.append(s.rho.values.copy())
        cs.append(s.c.values.copy())
        p = pressure_of_density(s.rho, m)
        rows.append({
            "t": s.t,
            "mass": float(grid.quadrature @ s.rho.values),
            "complementarity": tumor_complementarity(p, s.c.values, law),
            "nutrient_clips": clips,
            "clipped": stats[K.ST_CLIPPED],
            "defect": stats[K.ST_DEFECT],
            "source": stats[K.ST_SOURCE],
            "influx": stats[K.ST_INFLUX] + stats[K.ST_OUTFLUX],
            "steps": stats[K.ST_STEPS],
            "max_p": float(np.max(p.values)),
        })

    for t_out in outs:
        while state.t < t_out:
            dt, _ = _step_to(state.t, t_out, stable_dt(grid, state.rho.values, m, params))
            state, k = step_tumor(state, m, law, dt, params, stats, frozen_nutrient)
            clips += k
        state = TumorState(t_out, state.rho, state.c)
        record(state)
    rho_frames = np.array(frames)
    ledger = {k: np.array([r[k] for r in rows]) for k in rows[0]}
    ledger["mass0"] = np.array([mass0])
    # G is decreasing in p, so G(0, c) over the nutrient range bounds the growth rate
    bound = float(max(np.max(law.G(0.0, np.array([0.0, law.c_B]))), 0.0))
    return Trajectory(grid, np.array(outs), rho_frames, pressure_of_density(rho_frames, m),
                      extra={"c": np.array(cs)}, ledger=ledger,
                      meta={"solver": "tumor", "m": m, "frozen_nutrient": frozen_nutrient,
                            "growth_bound": bound})
