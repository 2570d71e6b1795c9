import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from heleshaw.grid import (
    BoundaryData, Field, Geometry, Grid, SourceCoefficient, build_grid, eval_source, integrate, laplacian,
    laplacian_values,
)


def test_geometry_rejects_bad_bounds():
    with pytest.raises(ValueError):
        Geometry.cartesian(2.0, 1.0)
    with pytest.raises(ValueError):
        Geometry.radial(2, 0.0, 1.0)
    with pytest.raises(ValueError):
        Geometry.radial(4, 1.0, 2.0)
    with pytest.raises(ValueError):
        build_grid(Geometry.cartesian(), 2)


def test_cartesian_laplacian_exact_on_quadratics(line):
    x = line.nodes
    u = 3 * x**2 - x + 2
    lap = laplacian_values(line, u)
    assert np.allclose(lap[1:-1], 6.0, atol=1e-8)
    assert lap[0] == lap[-1] == 0.0


@pytest.mark.parametrize("n", [2, 3])
def test_radial_laplacian_second_order(n):
    # u = r^3: u'' + (n-1) u'/r = (6 + 3(n-1)) r
    errs = []
    for cells in (50, 100, 200):
        g = build_grid(Geometry.radial(n, 1.0, 2.0), cells)
        r = g.nodes
        lap = laplacian_values(g, r**3)
        errs.append(np.max(np.abs(lap[1:-1] - (6 + 3 * (n - 1)) * r[1:-1])))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.8)


@given(st.integers(1, 3), st.lists(st.floats(-5, 5), min_size=9, max_size=9))
def test_laplacian_telescopes(n, vals):
    # sum_i w_i h (L u)_i equals the two boundary fluxes
    geo = Geometry.cartesian(1.0, 2.0) if n == 1 else Geometry.radial(n, 1.0, 2.0)
    g = build_grid(geo, 8)
    u = np.array(vals)
    lhs = integrate(g, laplacian_values(g, u))
    wf = g.face_weights
    rhs = (wf[-1] * (u[-1] - u[-2]) - wf[0] * (u[1] - u[0])) / g.h
    assert lhs == pytest.approx(rhs, abs=1e-9 * (1 + np.max(np.abs(u))) / g.h)


@given(st.lists(st.floats(-3, 3), min_size=11, max_size=11), st.lists(st.floats(-3, 3), min_size=11, max_size=11))
def test_laplacian_symmetric(a, b):
    g = build_grid(Geometry.radial(2, 1.0, 3.0), 10)
    u, v = np.array(a), np.array(b)
    u[0] = u[-1] = v[0] = v[-1] = 0.0
    assert integrate(g, v * laplacian_values(g, u)) == pytest.approx(
        integrate(g, u * laplacian_values(g, v)), abs=1e-9)


def test_laplacian_boundary_override(line):
    u = Field.zeros(line)
    lap = laplacian(u, inner=1.0)
    assert lap.values[1] == pytest.approx(1.0 / line.h**2)


def test_field_checks_shape_and_finiteness(line):
    with pytest.raises(ValueError):
        Field(line, np.zeros(3))
    with pytest.raises(ValueError):
        Field(line, np.full(line.size, np.nan))
    f = Field.constant(line, 2.0)
    with pytest.raises(ValueError):
        f.values[0] = 1.0


def test_quadrature_integrates_linear_exactly(line):
    # interior trapezoid; boundary nodes carry Dirichlet data and weight 0
    x = line.nodes
    exact = 2.0 * (3.0 - 1.0) - line.h * (2.0 + 2.0) / 2
    assert integrate(line, np.full(line.size, 2.0)) == pytest.approx(exact)


def test_stage_selection_right_continuous():
    lam = SourceCoefficient.piecewise([(0.0, -1.0), (0.75, -5.0), (1.0, -1.0)])
    assert lam.at(1.0, 0.7499) == -1.0
    assert lam.at(1.0, 0.75) == -5.0
    assert lam.at(1.0, 1.0) == -1.0
    assert lam.next_switch(0.75) == 1.0
    assert lam.bound == 5.0
    assert eval_source(lam, 2.0, 0.8) == -5.0
    with pytest.raises(ValueError):
        eval_source(lam, 2.0, -0.1)


@given(st.floats(0, 2), st.floats(0, 2))
def test_source_integral_exact(t0, t1):
    lam = SourceCoefficient.piecewise([(0.0, -1.0), (0.75, -5.0), (1.0, -1.0)])
    a, b = min(t0, t1), max(t0, t1)
    s = np.linspace(a, b, 200001)
    ref = np.trapezoid([lam.at(0.0, t) for t in s[::100]], s[::100]) if b > a else 0.0
    assert float(lam.integral(0.0, a, b)) == pytest.approx(ref, abs=5 * (b - a) / 2000 * 4 + 1e-12)


def test_source_integral_closed_form():
    lam = SourceCoefficient.piecewise([(0.0, -1.0), (0.75, -5.0), (1.0, -1.0)])
    assert float(lam.integral(0.0, 0.5, 1.5)) == pytest.approx(-0.25 - 1.25 - 0.5)


def test_source_validation():
    with pytest.raises(ValueError):
        SourceCoefficient.piecewise([(0.1, 1.0)])
    with pytest.raises(ValueError):
        SourceCoefficient.piecewise([(0.0, 1.0), (0.0, 2.0)])
    with pytest.raises(ValueError):
        SourceCoefficient(((0.0, 3.0),), 2.0)


def test_monotone_in_time():
    g = build_grid(Geometry.cartesian(), 8)
    assert SourceCoefficient.piecewise([(0.0, -1.0), (1.0, 0.0)]).is_nondecreasing_in_time(g)
    assert not SourceCoefficient.piecewise([(0.0, -1.0), (1.0, -5.0)]).is_nondecreasing_in_time(g)


def test_boundary_data():
    f = BoundaryData((0.0, 1.0), (1.0, 3.0))
    assert f(0.5) == 2.0
    assert f(5.0) == 3.0
    assert f.lipschitz() == 2.0
    assert f.check_bounds(3.0)
    with pytest.raises(ValueError):
        BoundaryData.constant(0.0)


def test_grid_header_roundtrip():
    g = build_grid(Geometry.radial(3, 1.0, 2.5), 40)
    assert Grid.from_header(g.header()) == g
    assert g.index_of(1.0 + 10 * g.h + 1e-9) == 10
