"""Numerical checks over recorded trajectories.

Every check is a pure function of trajectories and returns a ``Check``;
``DiagnosticsReport`` collects them by name.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .grid import BoundaryData, SourceCoefficient
from .pme import Trajectory

IDENTITY_TOL = 1e-10
LAW_TOL = 0.15


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    threshold: float
    context: dict = field(default_factory=dict)

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark}  {self.name}: {self.value:.4g} (threshold {self.threshold:.4g})"


class DiagnosticsReport:
    def __init__(self) -> None:
        self.checks: dict[str, Check] = {}

    def add(self, check: Check) -> Check:
        if check.name in self.checks:
            raise ValueError(f"duplicate check {check.name!r}")
        self.checks[check.name] = check
        return check

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def to_json(self) -> dict:
        return {name: _jsonable(asdict(self.checks[name])) for name in sorted(self.checks)}

    def to_text(self) -> str:
        return "\n".join(self.checks[name].line() for name in sorted(self.checks))

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


# --- mass -----------------------------------------------------------------------

def _log_growth(lam: SourceCoefficient | None, t0: float, t1: float) -> float:
    """Upper bound of int_t0^t1 lambda over space (exact when lambda is constant in space)."""
    if lam is None:
        return 0.0
    if lam.is_spatially_constant():
        return float(lam.integral(0.0, t0, t1))
    return lam.bound * (t1 - t0)


def _step_log_growth(lam: SourceCoefficient | None, times: np.ndarray) -> np.ndarray:
    """Cumulative exponent for a per-step ledger.

    A step reads lambda at both of its ends (decay with the old value, the
    pressure with the new one), so each step is charged with the larger.
    """
    if lam is None:
        return np.zeros(times.size)
    dt = np.diff(times)
    if lam.is_spatially_constant():
        lo = np.array([float(lam.at(0.0, t)) for t in times[:-1]])
        hi = np.array([float(lam.at(0.0, t)) for t in times[1:]])
        rate = np.maximum(lo, hi)
    else:
        rate = np.full(dt.size, lam.bound)
    return np.concatenate([[0.0], np.cumsum(rate * dt)])


def mass_balance(traj: Trajectory, lam: SourceCoefficient | None = None, f: BoundaryData | None = None,
                 tol: float = IDENTITY_TOL) -> Check:
    """Per-step discrete mass identity plus the Gronwall envelope.

    Envelope: M(t) <= e^{A(t)} M(0) + sum_k max_{s in step k} e^{A(t) - A(s)} dI_k,
    A(t) = int_0^t lambda (or Lambda t), dI_k the boundary inflow per frame.
    """
    L = traj.ledger
    solver = traj.meta.get("solver")
    if lam is None and "growth_bound" in traj.meta:
        lam = SourceCoefficient.constant(float(traj.meta["growth_bound"]))
    if solver == "limit":
        defect = float(np.max(L["defect"])) if "defect" in L else 0.0
        mass = np.concatenate([[L["mass0"][0]], L["mass"]])
        times = np.concatenate([[0.0], L["t"]])
        inflow = np.concatenate([[0.0], np.cumsum(L["influx"])])
        # second identity through the pressure flux
        dm = np.diff(mass)
        flux = L["decay"] + L["influx"] + L["source_active"] - L["active_mu"] - L["dropped"]
        flux_defect = float(np.max(np.abs(dm - flux) / np.maximum(np.abs(mass[1:]), 1e-300)))
    else:
        defect = float(np.max(L["defect"]))
        mass = L["mass"]
        times = L["t"]
        inflow = L["influx"] + L.get("outflux", 0.0)
        flux_defect = float(np.max(np.abs(mass - L["mass0"][0] - inflow - L["source"])
                                   / np.maximum(np.abs(mass), 1e-300)))
    if solver == "limit":
        A = _step_log_growth(lam, times)
    else:
        A = np.array([_log_growth(lam, 0.0, t) for t in times])
    env = np.empty_like(mass)
    env[0] = mass[0]
    for k in range(1, mass.size):
        acc = math.exp(A[k]) * mass[0]
        for j in range(1, k + 1):
            dI = max(inflow[j] - inflow[j - 1], 0.0)
            acc += math.exp(A[k] - min(A[j - 1], A[j])) * dI
        env[k] = acc
    slack = float(np.max(mass - env * (1 + 1e-9)))
    passed = defect <= tol and flux_defect <= max(tol, 1e3 * defect) and slack <= 0
    return Check("mass_balance", passed, max(defect, flux_defect), tol,
                 {"step_defect": defect, "cumulative_defect": flux_defect,
                  "envelope_slack": slack, "final_mass": float(mass[-1])})


# --- bounds ---------------------------------------------------------------------

def support_extent(traj: Trajectory, threshold: float = 0.0) -> np.ndarray:
    """Right end of {p > threshold} (or of {rho > 0} if threshold is 0) per frame."""
    x = traj.grid.nodes
    out = np.empty(len(traj))
    for k in range(len(traj)):
        mask = traj.p[k] > threshold if threshold > 0 else traj.rho[k] > 0
        idx = np.nonzero(mask)[0]
        out[k] = x[idx[-1]] if idx.size else x[0]
    return out


def bounds_report(trajs: Sequence[Trajectory] | Trajectory, eps_sat: float = 1e-6,
                  uniform_slack: float = 0.05) -> Check:
    """Sign and sup bounds, m-uniformity of max p, and a linear support envelope.

    With several runs (an m-sweep, coarsest m first) the bound C(T) is the
    max pressure of the coarsest run and every other run must stay below
    C(T)(1 + uniform_slack).
    """
    if isinstance(trajs, Trajectory):
        trajs = [trajs]
    neg = min(min(float(np.min(t.rho)), float(np.min(t.p))) for t in trajs)
    over = 0.0
    for t in trajs:
        if t.meta.get("solver") == "limit":
            over = max(over, float(np.max(t.rho)) - 1.0 - eps_sat)
    pmax = [float(np.max(t.p)) for t in trajs]
    C = pmax[0]
    uniform = all(v <= C * (1 + uniform_slack) for v in pmax)
    rho_bounds = {}
    for t, v in zip(trajs, pmax):
        m = t.meta.get("m")
        if m:
            rho_bounds[str(m)] = ((m - 1) / m * C) ** (1 / (m - 1))
    fits = []
    for t in trajs:
        ext = support_extent(t)
        if len(t) >= 2 and np.ptp(t.times) > 0:
            slope, icpt = np.polyfit(t.times, ext, 1)
            env = icpt + slope * t.times
            fits.append({"R_bar": float(icpt + np.max(ext - env)), "speed": float(slope)})
    passed = neg >= 0 and over <= 0 and uniform
    return Check("bounds", passed, max(pmax), C * (1 + uniform_slack),
                 {"min_value": neg, "rho_excess": over, "max_p": pmax, "rho_bound": rho_bounds,
                  "support_envelope": fits})


def total_variation(values: np.ndarray, x: np.ndarray, lo: float, hi: float) -> float:
    sel = (x >= lo) & (x <= hi)
    return float(np.sum(np.abs(np.diff(values[sel]))))


def tv_report(trajs: Sequence[Trajectory] | Trajectory, delta: float = 0.0, ratio: float = 2.0) -> Check:
    """Max-in-time discrete TV of rho on [inner + delta, outer - delta]; runs within ``ratio``."""
    if isinstance(trajs, Trajectory):
        trajs = [trajs]
    tvs = []
    for t in trajs:
        x = t.grid.nodes
        lo, hi = x[0] + delta, x[-1] - delta
        tvs.append(max(total_variation(t.rho[k], x, lo, hi) for k in range(len(t))))
    spread = max(tvs) / max(min(tvs), 1e-300)
    return Check("total_variation", spread <= ratio, spread, ratio, {"tv": tvs})


# --- ordering, monotonicity, graph ----------------------------------------------------

def ordering_test(lower: Trajectory, upper: Trajectory, tol: float | None = None) -> Check:
    """Nodewise rho and p ordering on every frame.

    Default tolerance: 2 eps_sat for limit runs, whose saturated set is only
    resolved to eps_sat, and 1e-12 otherwise (explicit steps with the same dt).
    """
    if tol is None:
        meta = lower.meta
        tol = 2 * meta.get("eps_sat", 1e-6) if meta.get("solver") == "limit" else 1e-12
    if lower.rho.shape != upper.rho.shape or not np.array_equal(lower.times, upper.times):
        raise ValueError("trajectories must share grid and output times")
    gap_rho = float(np.max(lower.rho - upper.rho))
    gap_p = float(np.max(lower.p - upper.p))
    gap = max(gap_rho, gap_p)
    return Check("ordering", gap <= tol, gap, tol, {"rho_gap": gap_rho, "p_gap": gap_p})


def graph_relation(traj: Trajectory, eps_sat: float = 1e-6) -> Check:
    """max p (1 - rho) <= eps_sat ||p||_inf on every frame."""
    worst = 0.0
    for k in range(len(traj)):
        pmax = float(np.max(traj.p[k]))
        v = float(np.max(traj.p[k] * (1 - traj.rho[k])))
        worst = max(worst, v / pmax if pmax > 0 else 0.0)
    return Check("graph_relation", worst <= eps_sat, worst, eps_sat)


def measure_sign(traj: Trajectory) -> Check:
    """min over steps of mu off the pressure support, against the solver tolerance."""
    L = traj.ledger
    margin = float(np.min(L["mu_min"] + L["mu_tol"]))
    return Check("mu_nonnegative", margin >= 0, float(np.min(L["mu_min"])), -float(np.min(L["mu_tol"])))


def _front_cells(traj: Trajectory, k: int) -> np.ndarray:
    """Nodes adjacent to the edge of the saturated set (at most one partly filled cell)."""
    sat = traj.extra["sat"][k]
    out = np.zeros_like(sat)
    edges = np.nonzero(np.diff(sat.astype(np.int8)) == -1)[0]
    for e in edges:
        out[e + 1] = True
    return out


def monotone_in_time(traj: Trajectory, tol: float = 1e-6) -> Check:
    """rho and p nodewise non-decreasing across recorded frames."""
    drho = float(np.min(np.diff(traj.rho, axis=0))) if len(traj) > 1 else 0.0
    dp = float(np.min(np.diff(traj.p, axis=0))) if len(traj) > 1 else 0.0
    pscale = max(float(np.max(traj.p)), 1.0)
    worst = min(drho, dp / pscale)
    return Check("monotone_in_time", worst >= -tol, worst, -tol, {"rho": drho, "p": dp})


def representation_check(traj: Trajectory, lam: SourceCoefficient, rho0: np.ndarray,
                         eps_sat: float = 1e-6) -> Check:
    """rho = chi_Sigma + rho0 exp(int_0^t lambda) (1 - chi_Sigma) for monotone data.

    The single partly filled node at each front holds mass in transit and is
    excluded.
    """
    x = traj.grid.nodes
    worst = 0.0
    for k in range(len(traj)):
        sat = traj.extra["sat"][k]
        growth = np.exp(lam.integral(x, 0.0, float(traj.times[k])))
        model = np.where(sat, 1.0, np.minimum(1.0, rho0 * growth))
        skip = _front_cells(traj, k)
        skip[0] = skip[-1] = True
        worst = max(worst, float(np.max(np.abs(traj.rho[k] - model)[~skip])))
    return Check("representation", worst <= eps_sat, worst, eps_sat)


# --- velocity law -----------------------------------------------------------------

def velocity_law_check(traj: Trajectory, window: int = 10, tol: float = LAW_TOL,
                       min_speed: float = 0.05, recede_tol: float = 1e-3) -> Check:
    """Measured front speed against |grad p| / (1 - rho_E) from the per-step ledger.

    A window of ``window`` steps is advancing when the measured speed is at
    least ``min_speed``; there the law must hold within ``tol`` relative.
    Every step where the front moves back by more than half a cell must show
    |grad p| <= ``recede_tol`` at the new front.  Windows with more than one
    saturated component are skipped.
    """
    L = traj.ledger
    t, front = L["t"], L["front"]
    h = traj.grid.h
    pred = L["grad_front"] / (1.0 - L["rho_e_front"])
    errs, skipped = [], 0
    for j in range(0, t.size - window):
        if np.any(L["fronts"][j:j + window + 1] != 1):
            skipped += 1
            continue
        v = (front[j + window] - front[j]) / (t[j + window] - t[j])
        if v >= min_speed:
            # the ledger entry of a step holds the speed used by the next step
            v_pred = float(np.mean(pred[j:j + window]))
            errs.append(abs(v - v_pred) / v_pred if v_pred > 0 else math.inf)
    back = np.nonzero(np.diff(front) < -0.5 * h)[0] + 1
    recede = [float(abs(L["grad_front"][i])) for i in back if L["fronts"][i] == 1]
    err = max(errs) if errs else 0.0
    rec = max(recede) if recede else 0.0
    passed = err <= tol and rec <= recede_tol
    return Check("velocity_law", passed, err, tol,
                 {"advancing_windows": len(errs), "receding_steps": len(recede),
                  "max_receding_grad": rec, "recede_tol": recede_tol,
                  "skipped_multi_front": skipped,
                  "median_error": float(np.median(errs)) if errs else 0.0})


# --- support history under a lambda switch ------------------------------------------

def _frames_in(traj: Trajectory, lo: float, hi: float) -> np.ndarray:
    return np.nonzero((traj.times >= lo - 1e-12) & (traj.times <= hi + 1e-12))[0]


def _frame_at(traj: Trajectory, t: float) -> int:
    k = int(np.argmin(np.abs(traj.times - t)))
    if abs(traj.times[k] - t) > 1e-9:
        raise ValueError(f"no output frame at t = {t}")
    return k


def switch_response(traj: Trajectory, lam: SourceCoefficient, grow: tuple = (0.0, 0.75),
                    before: float = 0.75, after: float = 0.80, decay: tuple = (0.80, 0.95),
                    regrow: tuple = (1.05, 1.8), threshold: float = 1e-3,
                    rate_tol: float = 0.05) -> list[Check]:
    """Support of {p > threshold} grows, drops across the switch, then grows again.

    The decay rate is the median over nodes that leave the support between
    ``before`` and ``decay[0]`` and stay outside until ``decay[1]``; it is
    compared with lambda at the middle of the window.
    """
    ext = support_extent(traj, threshold)
    checks = []
    for name, (lo, hi) in (("support_grows", grow), ("support_regrows", regrow)):
        ks = _frames_in(traj, lo, hi)
        drop = float(max(0.0, -np.min(np.diff(ext[ks])))) if ks.size > 1 else 0.0
        checks.append(Check(name, ks.size > 1 and drop == 0.0, drop, 0.0,
                            {"frames": int(ks.size), "t": [lo, hi]}))
    kb, ka = _frame_at(traj, before), _frame_at(traj, after)
    checks.append(Check("support_recedes", bool(ext[ka] < ext[kb]), float(ext[ka] - ext[kb]), 0.0,
                        {"before": float(ext[kb]), "after": float(ext[ka])}))
    k0, k1 = _frame_at(traj, decay[0]), _frame_at(traj, decay[1])
    left = (traj.p[kb] > threshold) & (traj.p[k0] <= threshold) & (traj.p[k1] <= threshold)
    left &= (traj.rho[k0] > 0) & (traj.rho[k1] > 0)
    expected = float(lam.at(traj.grid.nodes[0], 0.5 * (decay[0] + decay[1])))
    if not np.any(left) or expected == 0.0:
        checks.append(Check("decay_rate", False, math.nan, rate_tol, {"nodes": 0}))
        return checks
    rates = np.log(traj.rho[k1][left] / traj.rho[k0][left]) / (traj.times[k1] - traj.times[k0])
    rate = float(np.median(rates))
    rel = abs(rate - expected) / abs(expected)
    checks.append(Check("decay_rate", rel <= rate_tol, rel, rate_tol,
                        {"rate": rate, "expected": expected, "nodes": int(left.sum()),
                         "min": float(rates.min()), "max": float(rates.max())}))
    return checks


# --- m-sweep ---------------------------------------------------------------------

def l1_spacetime(a: Trajectory, b: Trajectory, field_name: str = "rho") -> float:
    """Trapezoid-in-time, quadrature-in-space L1 norm of a - b on common frames."""
    common = np.intersect1d(np.round(a.times, 12), np.round(b.times, 12))
    if common.size < 2:
        raise ValueError("need at least two common output times")
    ia = [int(np.argmin(np.abs(a.times - t))) for t in common]
    ib = [int(np.argmin(np.abs(b.times - t))) for t in common]
    fa = getattr(a, field_name)[ia]
    fb = getattr(b, field_name)[ib]
    per_frame = np.abs(fa - fb) @ a.grid.quadrature
    return float(np.trapezoid(per_frame, common))


def graph_defect(traj: Trajectory) -> float:
    """|| p (1 - rho) ||_{L1(Q_T)}."""
    per_frame = np.abs(traj.p * (1 - traj.rho)) @ traj.grid.quadrature
    return float(np.trapezoid(per_frame, traj.times)) if len(traj) > 1 else float(per_frame[0])


@dataclass
class ConvergenceTable:
    m: list
    rho_l1: list
    p_l1: list
    graph_l1: list
    rate: float | None

    def rows(self) -> list[dict]:
        return [{"m": m, "rho_l1": a, "p_l1": b, "graph_l1": c}
                for m, a, b, c in zip(self.m, self.rho_l1, self.p_l1, self.graph_l1)]

    def to_text(self) -> str:
        lines = [f"{'m':>6} {'|rho_m - rho|':>16} {'|p_m - p|':>14} {'|p_m(1-rho_m)|':>16}"]
        for r in self.rows():
            lines.append(f"{r['m']:>6g} {r['rho_l1']:>16.6e} {r['p_l1']:>14.6e} {r['graph_l1']:>16.6e}")
        if self.rate is not None:
            lines.append(f"empirical rate in m: {self.rate:.3f}")
        return "\n".join(lines)


def m_convergence_study(runs: Mapping[float, Trajectory], limit: Trajectory) -> tuple[ConvergenceTable, Check]:
    ms = sorted(runs)
    rho_l1 = [l1_spacetime(runs[m], limit, "rho") for m in ms]
    p_l1 = [l1_spacetime(runs[m], limit, "p") for m in ms]
    graph = [graph_defect(runs[m]) for m in ms]
    rate = None
    if len(ms) > 1 and all(v > 0 for v in rho_l1):
        rate = float(-np.polyfit(np.log(ms), np.log(rho_l1), 1)[0])
    table = ConvergenceTable([float(m) for m in ms], rho_l1, p_l1, graph, rate)
    if len(ms) < 2:
        return table, Check("m_convergence", True, rho_l1[0], math.inf, {"note": "single m, no assertion"})
    dec_rho = all(b < a for a, b in zip(rho_l1, rho_l1[1:]))
    dec_graph = all(b < a for a, b in zip(graph, graph[1:]))
    worst = max(b / a for a, b in zip(rho_l1, rho_l1[1:]))
    return table, Check("m_convergence", dec_rho and dec_graph, worst, 1.0,
                        {"table": table.rows(), "rate": rate, "graph_decreasing": dec_graph})


# --- bundles ----------------------------------------------------------------------

def run_diagnostics(traj: Trajectory, lam: SourceCoefficient | None = None,
                    f: BoundaryData | None = None, eps_sat: float = 1e-6) -> DiagnosticsReport:
    """The checks that apply to a single trajectory of the given solver kind."""
    report = DiagnosticsReport()
    solver = traj.meta.get("solver")
    report.add(bounds_report(traj, eps_sat))
    if "defect" in traj.ledger:
        # the tumor growth rate is bounded through the law, not through lambda
        report.add(mass_balance(traj, None if solver == "tumor" else lam, f))
    if solver in ("pme", "tumor"):
        clipped = float(traj.ledger["clipped"][-1]) if "clipped" in traj.ledger else 0.0
        report.add(Check("no_clipping", clipped == 0, clipped, 0.0))
    if solver == "tumor":
        clips = float(traj.ledger["nutrient_clips"][-1])
        report.add(Check("nutrient_bounds", clips == 0, clips, 0.0))
    if solver == "limit":
        report.add(graph_relation(traj, eps_sat))
        if traj.ledger:
            report.add(measure_sign(traj))
    return report
