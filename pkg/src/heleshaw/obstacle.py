"""Discrete obstacle problem for the limit pressure.

Given a mask (the saturated set), Dirichlet data f at the inner boundary and
a source, find p >= 0 with p = 0 off the mask minimizing

    E(v) = sum_faces w h/2 ((v_{i+1} - v_i)/h)^2 - sum_i w_i h S(v_i)

where S(v) = lambda v (linear source) or S = primitive of a concave growth
rate G.  The flux-form Laplacian makes E the exact energy of the stencil, so
projected SOR is coordinate-wise minimization of E.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels as K
from .grid import Field, Grid, laplacian_values

DEFAULT_OMEGA = 1.7
NEWTON_ITERS = 5


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConcaveSource:
    """Nodal source v -> G(v, c_i) with G strictly decreasing in v.

    ``G``/``dG`` act elementwise on (v, c) arrays; ``primitive`` is the
    antiderivative in v vanishing at v = 0.  ``affine`` may carry (a, b) with
    G(v, c) = a(c) + b v, b < 0, which enables the compiled sweep.
    """

    G: Callable
    dG: Callable
    primitive: Callable
    c: np.ndarray
    affine: tuple | None = None

    def value(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(self.G(v, self.c), dtype=float)

    def energy_density(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(self.primitive(v, self.c), dtype=float)


@dataclass(frozen=True, eq=False)
class ObstacleProblem:
    grid: Grid
    mask: np.ndarray
    source: object  # ndarray of lambda values, or ConcaveSource
    dirichlet_inner: float
    dirichlet_outer: float = 0.0

    def __post_init__(self) -> None:
        mask = np.array(self.mask.values if isinstance(self.mask, Field) else self.mask, dtype=bool)
        if mask.shape != (self.grid.size,):
            raise ValueError("mask does not match the grid")
        if self.dirichlet_inner < 0:
            raise ValueError("Dirichlet data must be non-negative")
        if self.dirichlet_inner > 0 and not mask[0]:
            raise ValueError("infeasible mask: the injection boundary node must be saturated")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        if not isinstance(self.source, ConcaveSource):
            src = np.broadcast_to(np.asarray(self.source, dtype=float), (self.grid.size,)).copy()
            if not np.all(np.isfinite(src)):
                raise ValueError("source must be finite")
            src.setflags(write=False)
            object.__setattr__(self, "source", src)

    @property
    def free(self) -> np.ndarray:
        """Interior masked nodes, i.e. the unknowns."""
        fr = self.mask.copy()
        fr[0] = fr[-1] = False
        return fr

    def source_values(self, p: np.ndarray) -> np.ndarray:
        if isinstance(self.source, ConcaveSource):
            return self.source.value(p)
        return self.source

    def admissible(self, v: np.ndarray, atol: float = 0.0) -> bool:
        return (
            bool(np.all(v >= -atol))
            and bool(np.all(np.abs(v[~self.mask & _interior(v.size)]) <= atol))
            and abs(v[0] - self.dirichlet_inner) <= atol
        )


def _interior(n: int) -> np.ndarray:
    s = np.ones(n, dtype=bool)
    s[0] = s[-1] = False
    return s


@dataclass(eq=False)
class ObstacleSolution:
    p: Field
    active: np.ndarray
    iterations: int
    residual: float
    equation_residual: float = 0.0
    converged: bool = True
    omega: float = DEFAULT_OMEGA
    tol: float = 0.0

    @property
    def mu_tolerance(self) -> float:
        """Update tolerance expressed in units of the discrete Laplacian."""
        g = self.p.grid
        cm, cp = g.stencil
        return float(4.0 * max(self.tol, self.residual) * np.max(cm + cp) / self.omega)


def optimal_omega(n_free: int) -> float:
    """SOR parameter 2/(1 + sin(pi/(n+1))) for the 1D model problem."""
    return 2.0 / (1.0 + np.sin(np.pi / (max(n_free, 1) + 1)))


def _initial_guess(problem: ObstacleProblem, start: np.ndarray | None) -> np.ndarray:
    n = problem.grid.size
    if start is None:
        p = np.zeros(n)
    else:
        p = np.maximum(np.array(start, dtype=float), 0.0)
    p[~problem.mask] = 0.0
    p[0] = problem.dirichlet_inner
    p[-1] = problem.dirichlet_outer if problem.mask[-1] else 0.0
    return p


def solve_obstacle(problem: ObstacleProblem, tol: float = 1e-10, max_iter: int = 200_000,
                   omega: float | None = None, start: np.ndarray | None = None,
                   raise_on_failure: bool = True) -> ObstacleSolution:
    """Projected SOR; converged when the max nodal update of a sweep is below ``tol``.

    ``omega`` defaults to 1.7; pass ``"auto"`` to use the 1D model optimum for
    the number of free nodes.  ``start`` is an optional warm start.
    """
    grid = problem.grid
    free = problem.free
    if omega == "auto":
        omega = optimal_omega(int(free.sum()))
    omega = DEFAULT_OMEGA if omega is None else float(omega)
    if not 0 < omega < 2:
        raise ValueError("omega must lie in (0, 2)")
    p = _initial_guess(problem, start)
    cm, cp = problem.grid.stencil
    src = problem.source
    if isinstance(src, ConcaveSource) and src.affine is None:
        iters, delta = _psor_newton(p, free, src, cm, cp, omega, tol, max_iter)
    else:
        if isinstance(src, ConcaveSource):
            a, b = src.affine
            s0 = np.broadcast_to(np.asarray(a, dtype=float), p.shape).copy()
            s1 = np.broadcast_to(np.asarray(b, dtype=float), p.shape).copy()
        else:
            s0, s1 = np.array(src), np.zeros_like(p)
        iters, delta = K.psor_affine(p, free, s0, s1, cm, cp, omega, tol, max_iter)
    converged = delta < tol
    if not converged and raise_on_failure:
        raise ConvergenceError(f"PSOR did not converge in {max_iter} sweeps (last update {delta:.3e})")
    r = -laplacian_values(grid, p) - problem.source_values(p)
    act = p > 0
    act[0] = act[-1] = False
    eq_res = 0.0
    if np.any(act):
        eq_res = float(np.max(np.abs(r[act])))
    inactive = free & ~act
    if np.any(inactive):
        eq_res = max(eq_res, float(np.max(np.maximum(-r[inactive], 0.0))))
    active = p > 0
    return ObstacleSolution(Field(grid, p), active, int(iters), float(delta), eq_res,
                            bool(converged), omega, tol)


def _psor_newton(p, free, src: ConcaveSource, cm, cp, omega, tol, max_iter):
    idx = np.nonzero(free)[0]
    c = np.asarray(src.c, dtype=float)
    delta = 0.0
    for it in range(max_iter):
        delta = 0.0
        for i in idx:
            diag = cm[i] + cp[i]
            off = cm[i] * p[i - 1] + cp[i] * p[i + 1]
            x = p[i]
            for _ in range(NEWTON_ITERS):
                g = float(src.G(x, c[i]))
                dg = float(src.dG(x, c[i]))
                step = (diag * x - off - g) / (diag - dg)
                x -= step
                if abs(step) < 1e-15 * max(1.0, abs(x)):
                    break
            new = p[i] + omega * (x - p[i])
            if new < 0.0:
                new = 0.0
            d = abs(new - p[i])
            if d > delta:
                delta = d
            p[i] = new
        if delta < tol:
            return it + 1, delta
    return max_iter, delta


def discrete_energy(problem: ObstacleProblem, v: np.ndarray) -> float:
    grid = problem.grid
    wf = grid.face_weights
    grad = np.diff(v) / grid.h
    dirichlet = 0.5 * float(np.sum(wf * grad**2)) * grid.h
    q = grid.quadrature
    if isinstance(problem.source, ConcaveSource):
        work = float(np.dot(q, problem.source.energy_density(v)))
    else:
        work = float(np.dot(q, problem.source * v))
    return dirichlet - work


def complementarity_residual(p, source, mask=None) -> float:
    """sum over interior nodes of |p (L p + S(p))| w h.

    ``source`` is an array of lambda values, a ConcaveSource, or a callable
    of p.  Nodes outside ``mask`` (if given) are skipped.
    """
    grid = p.grid
    v = np.asarray(p.values)
    if isinstance(source, ConcaveSource):
        s = source.value(v)
    elif callable(source):
        s = np.asarray(source(v), dtype=float)
    else:
        s = np.broadcast_to(np.asarray(source, dtype=float), v.shape)
    r = np.abs(v * (laplacian_values(grid, v) + s))
    if mask is not None:
        r = np.where(np.asarray(mask, dtype=bool), r, 0.0)
    return float(np.dot(grid.quadrature, r))


def boundary_measure(p: Field, lam, mask=None, p_tol: float = 1e-8) -> Field:
    """mu = L p + lambda * 1{p > p_tol} at every node.

    The inner node carries Dirichlet data and gets mu = 0.  At the outer node
    p is extended by zero outside the box, so a front sitting on the boundary
    still shows its flux.
    """
    grid = p.grid
    v = np.asarray(p.values)
    if isinstance(lam, ConcaveSource):
        s = lam.value(v)
    else:
        s = np.broadcast_to(np.asarray(lam, dtype=float), v.shape)
    mu = laplacian_values(grid, v) + s * (v > p_tol)
    cm, _ = grid.stencil
    wf, w = grid.face_weights, grid.weights
    c_last = wf[-1] / (w[-1] * grid.h**2)
    mu[-1] = c_last * (v[-2] - v[-1]) - c_last * v[-1] + (s[-1] if v[-1] > p_tol else 0.0)
    mu[0] = 0.0
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    return Field(grid, mu)


def unconstrained_solve(grid: Grid, source: np.ndarray, f: float, stop: int | None = None) -> np.ndarray:
    """Direct tridiagonal solve of -L p = source with p(inner) = f and p = 0 at node ``stop``."""
    from scipy.linalg import solve_banded

    k = grid.n_cells if stop is None else stop
    cm, cp = grid.stencil
    nint = k - 1
    ab = np.zeros((3, nint))
    ab[0, 1:] = -cp[1:k - 1]
    ab[1, :] = cm[1:k] + cp[1:k]
    ab[2, :-1] = -cm[2:k]
    rhs = np.array(np.broadcast_to(source, (grid.size,))[1:k], dtype=float)
    rhs[0] += cm[1] * f
    p = np.zeros(grid.size)
    p[0] = f
    p[1:k] = solve_banded((1, 1), ab, rhs)
    return p
