"""Uniform node-centered 1D meshes, grid functions and time-dependent data.

Two geometries are supported:

* ``cartesian1d`` -- the interval [inner, outer];
* ``radial`` -- the annulus inner <= |x| <= outer in dimension n, reduced to
  the radial coordinate r.  Integrals carry the weight r**(n-1) (the surface
  constant of the sphere is dropped everywhere, so masses are "per unit solid
  angle").

The Laplacian is discretized in flux form

    (L u)_i = [w_{i+1/2} (u_{i+1} - u_i) - w_{i-1/2} (u_i - u_{i-1})] / (w_i h^2)

with w = r**(n-1).  For cartesian grids this is the usual 3-point stencil; in
the radial case it is second-order accurate for u'' + (n-1)/r u' and it
telescopes exactly under the weighted sum sum_i w_i h (L u)_i, which is what
makes the discrete mass ledgers exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

CARTESIAN = "cartesian1d"
RADIAL = "radial"

MIN_CELLS = 4


@dataclass(frozen=True)
class Geometry:
    kind: str = CARTESIAN
    inner: float = 0.0
    outer: float = 1.0
    n: int = 1

    def __post_init__(self) -> None:
        if self.kind not in (CARTESIAN, RADIAL):
            raise ValueError(f"unknown geometry kind {self.kind!r}")
        if not (np.isfinite(self.inner) and np.isfinite(self.outer)):
            raise ValueError("geometry bounds must be finite")
        if self.inner >= self.outer:
            raise ValueError(f"inner ({self.inner}) must be < outer ({self.outer})")
        if self.kind == CARTESIAN and self.n != 1:
            raise ValueError("cartesian1d geometry has n = 1")
        if self.kind == RADIAL:
            if self.n not in (1, 2, 3):
                raise ValueError("radial dimension must be 1, 2 or 3")
            if self.inner <= 0.0 and self.n > 1:
                raise ValueError("radial geometry needs inner > 0 (K is a ball)")

    @classmethod
    def cartesian(cls, inner: float = 0.0, outer: float = 1.0) -> "Geometry":
        return cls(CARTESIAN, float(inner), float(outer), 1)

    @classmethod
    def radial(cls, n: int, inner: float = 1.0, outer: float = 4.0) -> "Geometry":
        return cls(RADIAL, float(inner), float(outer), int(n))


@dataclass(frozen=True, eq=False)
class Grid:
    geometry: Geometry
    n_cells: int
    h: float = field(init=False)
    nodes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if int(self.n_cells) != self.n_cells or self.n_cells < MIN_CELLS:
            raise ValueError(f"n_cells must be an integer >= {MIN_CELLS}")
        g = self.geometry
        nodes = np.linspace(g.inner, g.outer, self.n_cells + 1)
        nodes.setflags(write=False)
        object.__setattr__(self, "h", (g.outer - g.inner) / self.n_cells)
        object.__setattr__(self, "nodes", nodes)
        w = nodes ** (g.n - 1) if g.n > 1 else np.ones_like(nodes)
        mid = 0.5 * (nodes[:-1] + nodes[1:])
        wf = mid ** (g.n - 1) if g.n > 1 else np.ones_like(mid)
        cm = np.zeros_like(nodes)
        cp = np.zeros_like(nodes)
        cm[1:-1] = wf[:-1] / (w[1:-1] * self.h**2)
        cp[1:-1] = wf[1:] / (w[1:-1] * self.h**2)
        for a in (w, wf, cm, cp):
            a.setflags(write=False)
        object.__setattr__(self, "_w", w)
        object.__setattr__(self, "_wf", wf)
        object.__setattr__(self, "_cm", cm)
        object.__setattr__(self, "_cp", cp)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Grid)
            and self.geometry == other.geometry
            and self.n_cells == other.n_cells
        )

    def __hash__(self) -> int:
        return hash((self.geometry, self.n_cells))

    @property
    def size(self) -> int:
        return self.n_cells + 1

    @property
    def weights(self) -> np.ndarray:
        """Nodal radial weights r**(n-1) (ones for cartesian grids)."""
        return self._w

    @property
    def face_weights(self) -> np.ndarray:
        return self._wf

    @property
    def stencil(self) -> tuple[np.ndarray, np.ndarray]:
        """Coefficients (c_minus, c_plus) of the flux-form Laplacian; zero at boundary nodes."""
        return self._cm, self._cp

    @property
    def quadrature(self) -> np.ndarray:
        """Weights w_i h for sums over interior nodes (boundary nodes get 0)."""
        q = self._w * self.h
        q = q.copy()
        q[0] = q[-1] = 0.0
        return q

    def index_of(self, x: float) -> int:
        """Nearest node index."""
        i = int(round((x - self.geometry.inner) / self.h))
        return min(max(i, 0), self.n_cells)

    def header(self) -> dict:
        g = self.geometry
        return {"kind": g.kind, "n": g.n, "inner": g.inner, "outer": g.outer, "n_cells": self.n_cells}

    @classmethod
    def from_header(cls, header: dict) -> "Grid":
        geom = Geometry(header["kind"], float(header["inner"]), float(header["outer"]), int(header["n"]))
        return cls(geom, int(header["n_cells"]))


def build_grid(geometry: Geometry, n_cells: int) -> Grid:
    return Grid(geometry, n_cells)


@dataclass(frozen=True, eq=False)
class Field:
    """A real grid function; values are copied and frozen on construction."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.size,):
            raise ValueError(f"field has shape {v.shape}, grid has {self.grid.size} nodes")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: Grid) -> "Field":
        return cls(grid, np.zeros(grid.size))

    @classmethod
    def constant(cls, grid: Grid, value: float) -> "Field":
        return cls(grid, np.full(grid.size, float(value)))

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[np.ndarray], np.ndarray]) -> "Field":
        return cls(grid, np.broadcast_to(fn(grid.nodes), (grid.size,)))

    def with_values(self, values: np.ndarray) -> "Field":
        return Field(self.grid, values)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def to_csv(self, path, name: str = "value") -> None:
        np.savetxt(path, np.column_stack([self.grid.nodes, self.values]),
                   delimiter=",", header=f"x,{name}", comments="", fmt="%.17g")


def laplacian_values(grid: Grid, u: np.ndarray) -> np.ndarray:
    """Flux-form Laplacian of a raw array; boundary entries are 0."""
    cm, cp = grid.stencil
    out = np.zeros_like(u, dtype=float)
    out[1:-1] = cp[1:-1] * (u[2:] - u[1:-1]) - cm[1:-1] * (u[1:-1] - u[:-2])
    return out


def laplacian(u: Field, inner: float | None = None, outer: float | None = None) -> Field:
    """Discrete Laplacian with Dirichlet data.

    ``inner``/``outer`` override the boundary values of ``u`` before the
    stencil is applied; the result is 0 on the two boundary nodes.
    """
    v = np.array(u.values)
    if inner is not None:
        v[0] = inner
    if outer is not None:
        v[-1] = outer
    return Field(u.grid, laplacian_values(u.grid, v))


def integrate(grid: Grid, values: np.ndarray) -> float:
    """Weighted sum over interior nodes (the discrete L1-type integral)."""
    return float(np.dot(grid.quadrature, values))


Profile = Union[float, Field, Callable[[np.ndarray], np.ndarray]]


def _profile_values(profile: Profile, x: np.ndarray) -> np.ndarray:
    if isinstance(profile, Field):
        return np.interp(x, profile.grid.nodes, profile.values)
    if callable(profile):
        return np.broadcast_to(np.asarray(profile(x), dtype=float), np.shape(x)).astype(float)
    return np.full(np.shape(x), float(profile))


@dataclass(frozen=True)
class SourceCoefficient:
    """Piecewise-constant-in-time coefficient lambda(x, t).

    ``stages`` is a sequence of ``(t_start, profile)`` with t_start strictly
    increasing from 0.  Stage selection is right-continuous: at a switch time
    the new stage is active.
    """

    stages: tuple
    bound: float

    def __post_init__(self) -> None:
        stages = tuple((float(t), p) for t, p in self.stages)
        if not stages:
            raise ValueError("at least one stage is required")
        times = [t for t, _ in stages]
        if times[0] != 0.0:
            raise ValueError("first stage must start at t = 0")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("stage times must be strictly increasing")
        if not self.bound > 0:
            raise ValueError("bound must be positive")
        object.__setattr__(self, "stages", stages)
        for _, prof in stages:
            if isinstance(prof, Field):
                vmax = float(np.max(np.abs(prof.values)))
            elif callable(prof):
                vmax = None
            else:
                vmax = abs(float(prof))
            if vmax is not None and vmax > self.bound * (1 + 1e-12):
                raise ValueError(f"|lambda| = {vmax} exceeds bound {self.bound}")

    @classmethod
    def constant(cls, value: float, bound: float | None = None) -> "SourceCoefficient":
        b = bound if bound is not None else max(abs(value), 1.0)
        return cls(((0.0, float(value)),), b)

    @classmethod
    def piecewise(cls, stages: Sequence[tuple[float, float]], bound: float | None = None) -> "SourceCoefficient":
        b = bound if bound is not None else max([abs(v) for _, v in stages] + [1.0])
        return cls(tuple(stages), b)

    @property
    def switch_times(self) -> list[float]:
        return [t for t, _ in self.stages[1:]]

    def stage_index(self, t: float) -> int:
        idx = 0
        for k, (ts, _) in enumerate(self.stages):
            if t >= ts:
                idx = k
        return idx

    def next_switch(self, t: float) -> float:
        for ts in self.switch_times:
            if ts > t:
                return ts
        return np.inf

    def profile(self, grid: Grid, t: float) -> np.ndarray:
        return _profile_values(self.stages[self.stage_index(t)][1], grid.nodes)

    def at(self, x, t: float):
        return _profile_values(self.stages[self.stage_index(t)][1], np.asarray(x, dtype=float))

    def integral(self, x, t0: float, t1: float):
        """Exact integral of lambda(x, s) over s in [t0, t1]."""
        x = np.asarray(x, dtype=float)
        total = np.zeros(np.shape(x))
        if t1 <= t0:
            return total
        edges = [ts for ts, _ in self.stages] + [np.inf]
        for k, (ts, prof) in enumerate(self.stages):
            a, b = max(ts, t0), min(edges[k + 1], t1)
            if b > a:
                total = total + (b - a) * _profile_values(prof, x)
        return total

    def is_spatially_constant(self) -> bool:
        return all(not isinstance(p, Field) and not callable(p) for _, p in self.stages)

    def is_nondecreasing_in_time(self, grid: Grid) -> bool:
        vals = [self.profile(grid, ts) for ts, _ in self.stages]
        return all(np.all(b >= a) for a, b in zip(vals, vals[1:]))

    def to_json(self) -> dict:
        out = []
        for ts, prof in self.stages:
            if isinstance(prof, Field) or callable(prof):
                raise TypeError("only constant-in-space stages serialize to JSON")
            out.append([ts, float(prof)])
        return {"stages": out, "bound": self.bound}


def eval_source(lam: SourceCoefficient, x: float, t: float) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    return float(lam.at(x, t))


@dataclass(frozen=True)
class BoundaryData:
    """Injection data f(t) > 0 on the inner boundary, piecewise linear in t.

    ``times``/``values`` are interpolation knots; before the first and after
    the last knot f is held constant.
    """

    times: tuple = (0.0,)
    values: tuple = (1.0,)

    def __post_init__(self) -> None:
        times = tuple(float(t) for t in self.times)
        values = tuple(float(v) for v in self.values)
        if len(times) != len(values) or not times:
            raise ValueError("times and values must be non-empty and of equal length")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("knot times must be strictly increasing")
        if min(values) <= 0.0:
            raise ValueError("boundary data must be positive")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value: float) -> "BoundaryData":
        return cls((0.0,), (float(value),))

    def __call__(self, t: float) -> float:
        return float(np.interp(t, self.times, self.values))

    def check_bounds(self, big_lambda: float) -> bool:
        return min(self.values) >= 1.0 / big_lambda and max(self.values) <= big_lambda

    def lipschitz(self) -> float:
        if len(self.times) < 2:
            return 0.0
        return float(np.max(np.abs(np.diff(self.values) / np.diff(self.times))))

    def to_json(self) -> dict:
        return {"times": list(self.times), "values": list(self.values)}


def grid_to_json(grid: Grid) -> str:
    return json.dumps(grid.header())
