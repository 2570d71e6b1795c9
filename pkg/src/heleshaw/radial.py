"""Radial free-boundary oracles.

For lambda constant in space, the pressure on the annulus {inner < r < R}
with phi(inner) = f, phi(R) = 0 is explicit:

    n = 1:  phi = -lambda r^2 / 2 + a r + b
    n = 2:  phi = -lambda r^2 / 4 + a ln r + b
    n = 3:  phi = -lambda r^2 / 6 + a / r + b

and the front moves by R' = (d_r phi)_-(R) / (1 - rho_E(R, t)).  When the
slope at the front turns non-negative the front can no longer advance; it
then sits at the smooth-fit radius where d_r phi(R) = 0.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .grid import BoundaryData, SourceCoefficient
from .pme import Trajectory

EXPANDING = "expanding"
CONTRACTING = "contracting"
RK4_DT = 1e-3
SLOPE_TOL = 1e-12   # slopes above -SLOPE_TOL count as smooth fit


def _basis(n: int, r):
    """(particular, homogeneous) parts and their r-derivatives for -Lap phi = 1."""
    r = np.asarray(r, dtype=float)
    if n == 1:
        return -r**2 / 2, r, -r, np.ones_like(r)
    if n == 2:
        return -r**2 / 4, np.log(r), -r / 2, 1.0 / r
    if n == 3:
        return -r**2 / 6, 1.0 / r, -r / 3, -1.0 / r**2
    raise ValueError("n must be 1, 2 or 3")


@dataclass(frozen=True)
class RadialProfile:
    R: float
    lam: float
    f: float
    n: int
    inner: float
    a: float
    b: float

    def __call__(self, r):
        q, g, _, _ = _basis(self.n, r)
        return self.lam * q + self.a * g + self.b

    def derivative(self, r):
        _, _, dq, dg = _basis(self.n, r)
        return self.lam * dq + self.a * dg

    @property
    def slope(self) -> float:
        """d_r phi at the outer radius R."""
        return float(self.derivative(self.R))

    def residual(self, samples: int = 50) -> float:
        """max |-(phi'' + (n-1)/r phi') - lambda| at sample radii, via exact derivatives."""
        r = np.linspace(self.inner, self.R, samples)
        if self.n == 1:
            lap = np.full_like(r, -self.lam)
        elif self.n == 2:
            # phi'' = -lam/2 - a/r^2, phi'/r = -lam/2 + a/r^2
            lap = (-self.lam / 2 - self.a / r**2) + (-self.lam / 2 + self.a / r**2)
        else:
            # phi'' = -lam/3 + 2a/r^3, 2 phi'/r = -2 lam/3 - 2a/r^3
            lap = (-self.lam / 3 + 2 * self.a / r**3) + (-2 * self.lam / 3 - 2 * self.a / r**3)
        end = abs(float(self(self.inner)) - self.f) + abs(float(self(self.R)))
        return float(np.max(np.abs(-lap - self.lam))) + end


def annulus_profile(R: float, lam: float, f: float, n: int = 1, inner: float = 1.0) -> RadialProfile:
    if n not in (1, 2, 3):
        raise ValueError("n must be 1, 2 or 3")
    if not R - inner > 1e-12 * max(1.0, abs(inner)):
        raise ValueError("degenerate annulus: R must exceed the inner radius")
    q0, g0, _, _ = _basis(n, inner)
    q1, g1, _, _ = _basis(n, R)
    # a g0 + b = f - lam q0 ; a g1 + b = -lam q1
    a = (f - lam * q0 + lam * q1) / (g0 - g1)
    b = -lam * q1 - a * g1
    prof = RadialProfile(float(R), float(lam), float(f), n, float(inner), float(a), float(b))
    # the check is relative to the size of the terms that cancel
    _, _, _, dg = _basis(n, np.array([inner, R]))
    scale = max(1.0, abs(f), abs(lam) * R**2, abs(a) * float(np.max(np.abs(dg))) / inner, abs(b))
    tol = 1e-10 * scale
    if not prof.residual() <= tol:
        raise ValueError("profile residual check failed (annulus too thin)")
    return prof


def free_boundary_speed(R: float, t: float, lam: float, rho_e: float, f: float = 1.0,
                        n: int = 1, inner: float = 1.0) -> float:
    """(d_r phi)_-(R) / (1 - rho_E): only a negative slope pushes the front."""
    if rho_e >= 1.0:
        raise ValueError("external density must be < 1 at the front")
    slope = annulus_profile(R, lam, f, n, inner).slope
    return max(-slope, 0.0) / (1.0 - rho_e)


def smooth_fit_radius(lam: float, f: float, n: int = 1, inner: float = 1.0,
                      r_max: float = 1e3) -> float:
    """Radius where the annulus profile has zero slope at R; inf if none (lam >= 0)."""
    if lam >= 0:
        return math.inf
    if n == 1:
        return inner + math.sqrt(2.0 * f / -lam)

    def g(R):
        return annulus_profile(R, lam, f, n, inner).slope

    lo = inner * (1 + 1e-6) + 1e-9
    hi = inner + 1.0
    while g(hi) < 0:
        hi = inner + 2 * (hi - inner)
        if hi > r_max:
            raise RuntimeError(f"smooth-fit root not bracketed in ({lo}, {r_max})")
    if g(lo) >= 0:
        raise RuntimeError(f"smooth-fit root not bracketed in ({lo}, {hi})")
    return brentq(g, lo, hi, xtol=1e-14, rtol=1e-14)


def numeric_profile(R: float, lam_fn: Callable, f: float, n: int = 1, inner: float = 1.0,
                    cells: int = 2000) -> tuple[np.ndarray, np.ndarray]:
    """Finite-difference profile for a radially varying lambda(r); returns (r, phi)."""
    from .grid import Geometry, build_grid
    from .obstacle import unconstrained_solve

    geo = Geometry.cartesian(inner, R) if n == 1 else Geometry.radial(n, inner, R)
    grid = build_grid(geo, cells)
    src = np.asarray(lam_fn(grid.nodes), dtype=float)
    return grid.nodes, unconstrained_solve(grid, src, f)


@dataclass
class RadialTrajectory:
    times: np.ndarray
    R: np.ndarray
    branch: list
    slope: np.ndarray
    t_star: float | None = None
    recessions: list = field(default_factory=list)   # (r_lo, r_hi, t) regions desaturated at t

    def at(self, t, side: str = "right") -> np.ndarray:
        """R(t) by linear interpolation; at a jump, the value after (or before) it."""
        t = np.asarray(t, dtype=float)
        times = self.times
        k = np.clip(np.searchsorted(times, t, side=side), 1, times.size - 1)
        t0, t1 = times[k - 1], times[k]
        span = np.where(t1 > t0, t1 - t0, 1.0)
        w = np.clip((t - t0) / span, 0.0, 1.0)
        w = np.where(t1 > t0, w, 1.0 if side == "right" else 0.0)
        return self.R[k - 1] + w * (self.R[k] - self.R[k - 1])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "R", "branch", "slope"])
            for row in zip(self.times, self.R, self.branch, self.slope):
                w.writerow([repr(float(row[0])), repr(float(row[1])), row[2], repr(float(row[3]))])


def _as_lambda(lam) -> SourceCoefficient:
    if isinstance(lam, SourceCoefficient):
        if not lam.is_spatially_constant():
            raise ValueError("the closed-form oracle needs lambda constant in space")
        return lam
    return SourceCoefficient.constant(float(lam))


def _as_f(f) -> BoundaryData:
    return f if isinstance(f, BoundaryData) else BoundaryData.constant(float(f))


def integrate_radial(R0: float, lam, rho0, T: float, f=1.0, n: int = 1, inner: float = 1.0,
                     dt: float = RK4_DT, speed_scale: float = 1.0) -> RadialTrajectory:
    """Front trajectory R(t) on [0, T].

    ``rho0`` is the initial external density (callable of r, or a constant).
    Between stage switches R' = speed_scale * F(R, t) is integrated by RK4;
    the external density at the front is rho0(R) exp(int_0^t lambda), or
    exp(int_s^t lambda) in a region desaturated at time s.  Whenever the
    slope at R is >= 0 the front is placed at the smooth-fit radius (the
    contracting branch); t* is the first such time.
    """
    lam = _as_lambda(lam)
    fdata = _as_f(f)
    rho0_fn = rho0 if callable(rho0) else (lambda r, c=float(rho0): c)
    if R0 <= inner:
        raise ValueError("R0 must exceed the inner radius")
    recessions: list = []

    def rho_e(R, t):
        for lo, hi, s in reversed(recessions):
            if lo <= R <= hi:
                return float(np.exp(lam.integral(R, s, t)))
        return float(rho0_fn(R)) * float(np.exp(lam.integral(R, 0.0, t)))

    def slope_at(R, t, lam_val=None):
        # inside a stage the frozen value is passed, so the endpoint of a
        # step that lands on a switch still sees the old stage
        lam_val = float(lam.at(R, t)) if lam_val is None else lam_val
        return annulus_profile(R, lam_val, fdata(t), n, inner).slope

    def speed(R, t, lam_val):
        slope = annulus_profile(R, lam_val, fdata(t), n, inner).slope
        return speed_scale * max(-slope, 0.0) / (1.0 - rho_e(R, t))

    marks = sorted({T} | {s for s in lam.switch_times if 0 < s < T})
    times, Rs, branch, slopes = [0.0], [float(R0)], [EXPANDING], [slope_at(R0, 0.0)]
    t_star = None
    t, R = 0.0, float(R0)

    def settle(t_now, R_now, label_default):
        """Contract to the smooth-fit radius if the slope has turned non-negative."""
        nonlocal t_star
        lam_val = float(lam.at(R_now, t_now))
        if slope_at(R_now, t_now) >= -SLOPE_TOL:
            r_sf = smooth_fit_radius(lam_val, fdata(t_now), n, inner)
            if r_sf < R_now:
                recessions.append((r_sf, R_now, t_now))
                R_now = r_sf
            if t_star is None:
                t_star = t_now
            return R_now, CONTRACTING
        return R_now, label_default

    R, label = settle(0.0, R, EXPANDING)
    Rs[0], branch[0], slopes[0] = R, label, slope_at(R, 0.0)
    start = 0.0
    for mark in marks:
        k = max(1, int(np.ceil((mark - start) / dt - 1e-9)))
        h = (mark - start) / k
        lam_val = float(lam.at(R, start))
        for j in range(1, k + 1):
            t_new = start + j * h if j < k else mark
            if label == CONTRACTING and slope_at(R, t, lam_val) >= -SLOPE_TOL:
                R_new = R
            else:
                k1 = speed(R, t, lam_val)
                k2 = speed(R + h / 2 * k1, t + h / 2, lam_val)
                k3 = speed(R + h / 2 * k2, t + h / 2, lam_val)
                k4 = speed(R + h * k3, t_new, lam_val)
                R_new = R + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                label = EXPANDING
                if slope_at(R_new, t_new, lam_val) > 0 and slope_at(R, t, lam_val) < 0:
                    R_new, t_hit = _bisect_stall(R, t, h, speed, slope_at, lam_val)
                    if t_star is None:
                        t_star = t_hit
                    label = CONTRACTING
            t, R = t_new, R_new
            times.append(t)
            Rs.append(R)
            branch.append(label)
            slopes.append(slope_at(R, t, lam_val))
        start = mark
        if mark < T:
            # stage switch: lambda(mark) is the new stage
            R_set, label = settle(mark, R, EXPANDING)
            if R_set != R:
                # keep both one-sided values: a repeated time marks the jump
                times.append(mark)
                Rs.append(R_set)
                branch.append(label)
                slopes.append(slope_at(R_set, mark))
            else:
                branch[-1], slopes[-1] = label, slope_at(R, mark)
            R = R_set
    return RadialTrajectory(np.array(times), np.array(Rs), branch, np.array(slopes), t_star, recessions)


def _bisect_stall(R, t, h, speed, slope_at, lam_val, iters: int = 60):
    """Euler-bisection for the time within (t, t+h] where the slope reaches 0."""
    lo, hi = 0.0, h
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        Rm = R + mid * speed(R, t, lam_val)
        if slope_at(Rm, t + mid, lam_val) >= 0:
            hi = mid
        else:
            lo = mid
    return R + hi * speed(R, t, lam_val), t + hi


# --- barriers -----------------------------------------------------------------

SUB = "sub"
SUPER = "super"


@dataclass
class Barrier:
    kind: str
    trajectory: RadialTrajectory
    speed_scale: float
    front_defect: float     # max of the signed front inequality violation (<= 0 when valid)

    def support_radius(self, t) -> np.ndarray:
        return self.trajectory.at(t)


def make_barrier(kind: str, R0: float, lam, rho0, T: float, f=1.0, n: int = 1, inner: float = 1.0,
                 speed_scale: float = 1.0, dt: float = RK4_DT, tol: float = 1e-8) -> Barrier:
    """Radial barrier whose front moves at ``speed_scale`` times the law speed.

    A subsolution front must satisfy (1 - rho_E) V <= |d_r phi| and a
    supersolution front the reverse; this is checked at every sample and a
    violation beyond ``tol`` rejects the construction.
    """
    if kind not in (SUB, SUPER):
        raise ValueError("kind must be 'sub' or 'super'")
    traj = integrate_radial(R0, lam, rho0, T, f, n, inner, dt, speed_scale)
    # (1 - rho_E) V - |slope|_- = (speed_scale - 1) |slope|_- on expanding samples
    expanding = np.array([b == EXPANDING for b in traj.branch])
    drive = np.maximum(-traj.slope, 0.0)
    excess = (speed_scale - 1.0) * drive[expanding]
    defect = float(np.max(excess)) if kind == SUB else float(np.max(-excess))
    if excess.size == 0:
        defect = 0.0
    if defect > tol:
        raise ValueError(f"{kind}-barrier front inequality violated by {defect:.3e}")
    return Barrier(kind, traj, float(speed_scale), defect)


@dataclass
class InclusionReport:
    kind: str
    times: np.ndarray
    barrier_radius: np.ndarray
    front: np.ndarray
    tolerance: float
    ok: bool

    def as_dict(self) -> dict:
        gap = self.barrier_radius - self.front
        return {
            "kind": self.kind,
            "ok": self.ok,
            "tolerance": self.tolerance,
            "max_gap": float(np.max(gap)) if self.kind == SUB else float(np.max(-gap)),
            "frames": int(self.times.size),
        }


def check_inclusion(barrier: Barrier, traj: Trajectory, slack_cells: float = 2.0) -> InclusionReport:
    """Compare the barrier support {phi > 0} = (inner, R_b(t)) with the saturated set.

    Sub-barriers must lie inside, super-barriers must contain it, up to
    ``slack_cells`` grid cells.
    """
    from .limit import front_position

    grid = traj.grid
    sat = traj.extra.get("sat")
    fronts = np.array([
        front_position(grid, traj.rho[k], None if sat is None else sat[k]) for k in range(len(traj))
    ])
    rb = barrier.support_radius(traj.times)
    tol = slack_cells * grid.h
    if barrier.kind == SUB:
        ok = bool(np.all(rb <= fronts + tol))
    else:
        ok = bool(np.all(rb >= fronts - tol))
    return InclusionReport(barrier.kind, traj.times.copy(), rb, fronts, tol, ok)
