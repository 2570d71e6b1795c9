import json
import math

import numpy as np
import pytest

from heleshaw import diagnostics as D
from heleshaw.grid import Geometry, SourceCoefficient, build_grid
from heleshaw.pme import Trajectory


def _traj(rho, p=None, times=None, **kw):
    g = build_grid(Geometry.cartesian(1.0, 2.0), rho.shape[1] - 1)
    times = np.arange(rho.shape[0], dtype=float) if times is None else times
    return Trajectory(g, times, rho, rho.copy() if p is None else p, **kw)


def test_report_collects_and_serializes(tmp_path):
    rep = D.DiagnosticsReport()
    rep.add(D.Check("a", True, 1.0, 2.0))
    rep.add(D.Check("b", False, np.float64(3.0), 2.0, {"arr": np.arange(2)}))
    assert not rep.ok
    with pytest.raises(ValueError):
        rep.add(D.Check("a", True, 0.0, 0.0))
    rep.dump(tmp_path / "d.json")
    back = json.loads((tmp_path / "d.json").read_text())
    assert back["b"]["context"]["arr"] == [0, 1]
    assert rep.to_text().splitlines()[1].startswith("FAIL  b")


def test_mass_balance_pme_ledger():
    rho = np.ones((3, 11))
    ledger = {"t": np.array([0.0, 1.0, 2.0]), "mass": np.array([1.0, 1.5, 2.0]), "mass0": np.array([1.0]),
              "influx": np.array([0.0, 0.5, 1.0]), "outflux": np.zeros(3), "source": np.zeros(3),
              "defect": np.zeros(3)}
    tr = _traj(rho, ledger=ledger, meta={"solver": "pme"})
    assert D.mass_balance(tr, SourceCoefficient.constant(0.0)).passed
    ledger["mass"] = np.array([1.0, 1.5, 2.1])
    assert not D.mass_balance(tr, SourceCoefficient.constant(0.0)).passed


def test_mass_balance_envelope_catches_excess_growth():
    # mass doubling with lambda = 0 and no inflow breaks the Gronwall bound
    ledger = {"t": np.array([0.0, 1.0]), "mass": np.array([1.0, 2.0]), "mass0": np.array([1.0]),
              "influx": np.zeros(2), "outflux": np.zeros(2), "source": np.array([0.0, 1.0]),
              "defect": np.zeros(2)}
    tr = _traj(np.ones((2, 11)), ledger=ledger, meta={"solver": "pme"})
    check = D.mass_balance(tr, SourceCoefficient.constant(0.0))
    assert not check.passed and check.context["envelope_slack"] > 0
    assert D.mass_balance(tr, SourceCoefficient.constant(math.log(2.0))).passed


def test_bounds_report():
    rho = np.full((2, 11), 0.5)
    assert D.bounds_report(_traj(rho)).passed
    bad = rho.copy()
    bad[1, 3] = -1e-3
    assert not D.bounds_report(_traj(bad)).passed
    over = np.full((2, 11), 1.1)
    assert not D.bounds_report(_traj(over, meta={"solver": "limit"})).passed
    # a later run with 10% larger pressure breaks m-uniformity
    a, b = _traj(rho, meta={"m": 10}), _traj(rho, p=rho * 1.1, meta={"m": 20})
    assert not D.bounds_report([a, b]).passed
    assert D.bounds_report([a, b], uniform_slack=0.2).passed


def test_total_variation():
    x = np.linspace(0, 1, 11)
    v = np.where(x < 0.5, 1.0, 0.0)
    assert D.total_variation(v, x, 0.0, 1.0) == 1.0
    assert D.total_variation(v, x, 0.6, 1.0) == 0.0
    a = _traj(np.array([v, v]))
    b = _traj(np.array([3 * v, v]))
    assert D.tv_report([a, a]).passed
    assert not D.tv_report([a, b]).passed


def test_ordering_and_graph():
    lo = np.full((2, 11), 0.3)
    hi = np.full((2, 11), 0.4)
    assert D.ordering_test(_traj(lo), _traj(hi)).passed
    assert not D.ordering_test(_traj(hi), _traj(lo)).passed
    rho = np.ones((1, 11))
    p = np.linspace(1, 0, 11)[None, :]
    assert D.graph_relation(_traj(rho, p)).passed
    rho[0, 5] = 0.9
    assert not D.graph_relation(_traj(rho, p)).passed


def test_monotone_in_time():
    up = np.array([np.full(11, 0.2), np.full(11, 0.3)])
    assert D.monotone_in_time(_traj(up)).passed
    assert not D.monotone_in_time(_traj(up[::-1])).passed


def test_representation_check():
    g = build_grid(Geometry.cartesian(1.0, 2.0), 10)
    lam = SourceCoefficient.constant(-1.0)
    t = np.array([0.0, 1.0])
    sat = np.array([g.nodes <= 1.3, g.nodes <= 1.5])
    rho = np.where(sat, 1.0, 0.4 * np.exp(-t)[:, None])
    tr = Trajectory(g, t, rho, np.zeros_like(rho), extra={"sat": sat})
    assert D.representation_check(tr, lam, np.full(11, 0.4)).passed
    rho[1, 8] += 1e-3
    assert not D.representation_check(tr, lam, np.full(11, 0.4)).passed


def _law_ledger(speed_factor=1.0, h=1e-3):
    t = np.arange(1, 401) * 1e-3
    R = 1 + np.sqrt(0.25 + 2 * t)
    grad = 1.0 / (R - 1) * speed_factor
    n = t.size
    return {"t": t, "front": R, "grad_front": grad, "rho_e_front": np.zeros(n), "fronts": np.ones(n, int)}


def test_velocity_law_check_on_exact_front():
    g = build_grid(Geometry.cartesian(1.0, 3.0), 2000)
    tr = Trajectory(g, np.array([0.0]), np.zeros((1, g.size)), np.zeros((1, g.size)), ledger=_law_ledger())
    check = D.velocity_law_check(tr)
    assert check.passed and check.value < 0.01
    tr.ledger = _law_ledger(1.3)
    assert not D.velocity_law_check(tr).passed


def test_velocity_law_receding_gradient():
    g = build_grid(Geometry.cartesian(1.0, 3.0), 2000)
    L = _law_ledger()
    L["front"] = L["front"].copy()
    L["front"][200:] = 1.2          # drop by many cells
    L["grad_front"] = L["grad_front"].copy()
    L["grad_front"][200:] = 0.0
    tr = Trajectory(g, np.array([0.0]), np.zeros((1, g.size)), np.zeros((1, g.size)), ledger=L)
    assert D.velocity_law_check(tr).context["receding_steps"] == 1
    assert D.velocity_law_check(tr).passed
    L["grad_front"][200] = 0.1
    assert not D.velocity_law_check(tr).passed


def test_l1_spacetime_and_graph_defect():
    a = _traj(np.zeros((3, 11)), times=np.array([0.0, 0.5, 1.0]))
    b = _traj(np.ones((3, 11)), times=np.array([0.0, 0.5, 1.0]))
    area = float(np.sum(a.grid.quadrature))
    assert D.l1_spacetime(a, b) == pytest.approx(area)
    c = _traj(np.full((3, 11), 0.5), p=np.full((3, 11), 2.0), times=np.array([0.0, 0.5, 1.0]))
    assert D.graph_defect(c) == pytest.approx(area)
    with pytest.raises(ValueError):
        D.l1_spacetime(a, _traj(np.ones((1, 11)), times=np.array([0.0])))


def test_m_convergence_study():
    times = np.array([0.0, 1.0])
    limit = _traj(np.ones((2, 11)), p=np.zeros((2, 11)), times=times)
    runs = {m: _traj(np.full((2, 11), 1 - 1 / m), p=np.full((2, 11), 1 / m), times=times) for m in (10, 20, 40)}
    table, check = D.m_convergence_study(runs, limit)
    assert check.passed
    assert table.rate == pytest.approx(1.0)
    assert "empirical rate" in table.to_text()
    runs[40] = runs[10]
    assert not D.m_convergence_study(runs, limit)[1].passed


def test_switch_response():
    g = build_grid(Geometry.cartesian(1.0, 3.0), 20)
    times = np.round(np.arange(0, 1.85, 0.05), 10)
    x = g.nodes
    lam = SourceCoefficient.piecewise([(0.0, -1.0), (0.75, -5.0), (1.0, -1.0)])
    front = np.where(times < 0.76, 1.5 + times, np.where(times < 1.0, 1.6, 1.6 + 0.5 * (times - 1.0)))
    p = np.maximum(front[:, None] - x[None, :], 0.0)
    rho = np.where(p > 0, 1.0, 0.0)
    left = (x > 1.6) & (x <= 2.25)
    for k, t in enumerate(times):
        if 0.75 < t:
            rho[k, left & (p[k] == 0)] = math.exp(-5 * (min(t, 1.0) - 0.75) - max(t - 1.0, 0.0))
    checks = {c.name: c for c in D.switch_response(Trajectory(g, times, rho, p), lam)}
    assert all(c.passed for c in checks.values()), checks
    assert checks["decay_rate"].context["rate"] == pytest.approx(-5.0)


def test_run_diagnostics_picks_checks():
    tr = _traj(np.full((2, 11), 0.5), ledger={"clipped": np.zeros(2)}, meta={"solver": "pme"})
    rep = D.run_diagnostics(tr)
    assert set(rep.checks) == {"bounds", "no_clipping"}


def test_ordering_default_tolerance_by_solver():
    lo = np.full((2, 11), 0.3)
    hi = lo - 1e-7
    assert D.ordering_test(_traj(lo, meta={"solver": "limit", "eps_sat": 1e-6}), _traj(hi)).passed
    assert not D.ordering_test(_traj(lo, meta={"solver": "pme"}), _traj(hi)).passed
