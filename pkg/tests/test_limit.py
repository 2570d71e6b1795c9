import math

import numpy as np
import pytest

from heleshaw import diagnostics as D
from heleshaw.grid import BoundaryData, Field, Geometry, SourceCoefficient, build_grid
from heleshaw.limit import (
    LimitParams, _step_schedule, external_density, front_position, initial_state, run_limit, saturated_set,
    step_limit,
)

F1 = BoundaryData.constant(1.0)


def _chi(grid, front, ext=0.0):
    rho = np.where(grid.nodes <= front + 1e-12, 1.0, ext)
    rho[-1] = 0.0
    return Field(grid, rho)


def _run(lam, cells=200, outer=3.0, front=1.5, ext=0.0, T=0.5, dt=1e-3, outs=None):
    g = build_grid(Geometry.cartesian(1.0, outer), cells)
    lam = lam if isinstance(lam, SourceCoefficient) else SourceCoefficient.constant(lam)
    outs = outs if outs is not None else list(np.round(np.arange(0.0, T + 1e-9, 0.05), 10))
    return run_limit(_chi(g, front, ext), lam, F1, LimitParams(t_end=T, dt=dt), outs), lam


def test_zero_source_front_matches_closed_form():
    traj, _ = _run(0.0, cells=400, outer=3.0, T=0.5)
    t = traj.ledger["t"]
    exact = 1 + np.sqrt(0.25 + 2 * t)
    h = traj.grid.h
    assert np.max(np.abs(traj.ledger["front"] - exact)) <= 2 * h


def test_mass_ledger_identities():
    lam = SourceCoefficient.piecewise([(0.0, -1.0), (0.2, -5.0), (0.3, -1.0)])
    traj, _ = _run(lam, T=0.5)
    L = traj.ledger
    mass = np.concatenate([L["mass0"], L["mass"]])
    assert np.allclose(np.diff(mass), L["decay"] + L["deposited"], atol=1e-13)
    check = D.mass_balance(traj, lam, F1)
    assert check.passed, check.context


def test_graph_relation_and_measure_sign():
    lam = SourceCoefficient.piecewise([(0.0, -1.0), (0.2, -5.0)])
    traj, _ = _run(lam, T=0.4)
    assert D.graph_relation(traj).passed
    assert D.measure_sign(traj).passed
    assert np.all(traj.rho >= 0) and np.all(traj.rho <= 1 + 1e-12)
    assert np.all(traj.p >= 0)


@pytest.mark.parametrize("lam,ext", [(0.0, 0.0), (-1.0, 0.0), (-1.0, 0.4), (0.5, 0.3)])
def test_monotone_source_representation(lam, ext):
    traj, lam_c = _run(lam, ext=ext, T=0.4)
    if lam >= 0 or ext == 0:
        # decaying exterior density is the one case that is not monotone
        assert D.monotone_in_time(traj).passed
    rep = D.representation_check(traj, lam_c, traj.rho[0], 1e-6)
    assert rep.passed, rep.value


def test_positive_source_nucleates_saturation():
    # a patch of density 0.8 with lambda = 1 saturates at t = ln 1.25, away from the main front
    g = build_grid(Geometry.cartesian(1.0, 3.0), 100)
    lam = SourceCoefficient.constant(1.0)
    rho = _chi(g, 1.2).values.copy()
    rho[(g.nodes >= 2.3) & (g.nodes <= 2.6)] = 0.8
    traj = run_limit(Field(g, rho), lam, F1, LimitParams(t_end=0.3, dt=1e-3), [0.2, 0.3])
    far = g.index_of(2.45)
    assert traj.rho[1, far] == pytest.approx(0.8 * math.exp(0.2), rel=1e-9)
    assert traj.rho[2, far] == 1.0
    assert traj.p[2, far] > 0
    assert traj.ledger["fronts"][-1] == 2


def test_recession_to_smooth_fit_radius():
    lam = SourceCoefficient.piecewise([(0.0, -1.0), (0.1, -5.0)])
    traj, _ = _run(lam, cells=400, outer=3.0, front=2.0, T=0.2, outs=[0.05, 0.1, 0.15, 0.2])
    t = traj.ledger["t"]
    after = t > 0.1 + 1e-9
    target = 1 + math.sqrt(2 / 5)
    assert np.max(np.abs(traj.ledger["front"][after] - target)) <= 2 * traj.grid.h


def test_external_density_after_recession():
    lam = SourceCoefficient.piecewise([(0.0, -1.0), (0.1, -5.0)])
    traj, _ = _run(lam, cells=200, outer=3.0, front=2.0, T=0.2, outs=[0.05, 0.1, 0.15, 0.2])
    ed = external_density(traj, 1.9, lam)
    k = traj.index_at(0.2)
    i = traj.grid.index_of(1.9)
    # the node desaturated at the switch and has decayed like exp(-5 (t - 0.1)) since
    assert ed.values[k] == pytest.approx(math.exp(-5 * 0.1), rel=1e-12)
    assert traj.rho[k, i] == pytest.approx(ed.values[k], rel=1e-9)


def test_ordering_of_ordered_data():
    g = build_grid(Geometry.cartesian(1.0, 3.0), 150)
    lam = SourceCoefficient.piecewise([(0.0, -1.0), (0.2, -3.0)])
    params = LimitParams(t_end=0.4, dt=1e-3)
    outs = [0.1, 0.2, 0.3, 0.4]
    lo = run_limit(_chi(g, 1.4, 0.1), lam, F1, params, outs)
    hi = run_limit(_chi(g, 1.7, 0.3), lam, F1, params, outs)
    assert D.ordering_test(lo, hi).passed


def test_saturated_set_and_front_position():
    g = build_grid(Geometry.cartesian(1.0, 2.0), 10)
    rho = np.array([0.0, 1.0, 1.0, 1.0 - 1e-7, 0.65, 0.3, 0.3, 0.3, 0.3, 0.3, 0.0])
    sat = saturated_set(rho)
    assert sat[0] and sat[3] and not sat[4]
    # node 4 is half filled relative to rho_E = 0.3
    assert front_position(g, rho, sat) == pytest.approx(g.nodes[3] + 0.5 * g.h)


def test_step_schedule_aligns_with_switches_and_outputs():
    lam = SourceCoefficient.piecewise([(0.0, 0.0), (0.0125, -1.0)])
    levels = _step_schedule(lam, 0.05, 0.01, [0.03, 0.05])
    assert 0.0125 in levels and 0.03 in levels and levels[-1] == 0.05
    assert np.max(np.diff(levels)) <= 0.01 + 1e-15


def test_step_records_info():
    g = build_grid(Geometry.cartesian(1.0, 3.0), 100)
    params = LimitParams(t_end=1.0, dt=1e-3)
    lam = SourceCoefficient.constant(-1.0)
    state = initial_state(_chi(g, 1.5), lam, F1, params)
    info = {}
    new = step_limit(state, lam, F1, params, info=info)
    assert new.t == pytest.approx(1e-3)
    assert info["mass"] - float(g.quadrature @ state.rho.values) == pytest.approx(
        info["decay"] + info["deposited"], abs=1e-14)


def test_params_validation():
    with pytest.raises(ValueError):
        LimitParams(t_end=1.0, eps_sat=0.5)
    with pytest.raises(ValueError):
        LimitParams(t_end=1.0, dt=0.0)
