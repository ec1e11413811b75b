import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wvlab.grid import (
    BoundaryTimeTrace,
    GridError,
    Phantom,
    SpaceTimeField,
    SpatialGrid,
    TimeAxis,
    integrate,
    laplacian_array,
    normal_derivative_array,
    normal_derivative_matrix,
    read_field,
    read_trace_csv,
    time_derivative,
    write_field,
    write_trace_csv,
)


def test_grid_geometry():
    g = SpatialGrid(9)
    assert g.h == pytest.approx(1 / 8)
    assert g.boundary_mask.sum() == 4 * 8
    assert len(g.boundary_nodes) == 32
    assert np.allclose(np.linalg.norm(g.outward_normal, axis=1), 1.0)
    assert g.quadrature_weights.sum() == pytest.approx(1.0)
    assert g.boundary_weights.sum() == pytest.approx(4.0)


def test_axis_validation():
    with pytest.raises(GridError):
        TimeAxis(1.0, 4)
    with pytest.raises(GridError):
        TimeAxis(0.0, 16)
    ax = TimeAxis(2.0, 16)
    assert ax.dt == pytest.approx(0.125)
    assert ax.weights.sum() == pytest.approx(2.0)


def test_field_shape_and_finiteness(small):
    g, ax = small
    with pytest.raises(GridError):
        SpaceTimeField(np.zeros((3, 3, 3)), g, ax)
    bad = np.zeros((ax.n_t + 1, g.n, g.n))
    bad[0, 0, 0] = np.nan
    with pytest.raises(GridError):
        SpaceTimeField(bad, g, ax)


def test_phantom_must_be_real(small):
    g, ax = small
    z = SpaceTimeField.zeros(g, ax)
    with pytest.raises(GridError):
        Phantom(z + 1j, z)


def test_laplacian_exact_on_quadratics():
    g = SpatialGrid(17)
    X, Y = g.coords
    u = 3 * X**2 - 2 * Y**2 + X * Y
    lap = laplacian_array(u, g.h)
    assert np.allclose(lap[1:-1, 1:-1], 2.0, atol=1e-9)


def test_time_derivative_exact_on_quadratics():
    ax = TimeAxis(1.0, 16)
    u = (ax.t**2)[:, None]
    assert np.allclose(time_derivative(u, ax.dt, 1)[:, 0], 2 * ax.t, atol=1e-10)
    assert np.allclose(time_derivative(u, ax.dt, 2), 2.0, atol=1e-8)


def test_normal_derivative_of_linear_function():
    g = SpatialGrid(17)
    X, Y = g.coords
    u = 2 * X - 3 * Y
    dn = normal_derivative_array(u, g)
    expect = g.outward_normal @ np.array([2.0, -3.0])
    assert np.allclose(dn, expect, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=5, max_value=21), st.integers(min_value=0, max_value=2**31 - 1))
def test_normal_derivative_matrix_matches_array(n, seed):
    g = SpatialGrid(n)
    u = np.random.default_rng(seed).standard_normal((n, n))
    assert np.allclose(normal_derivative_matrix(g) @ u.ravel(), normal_derivative_array(u, g), atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_integrate_is_linear(a, b):
    g, ax = SpatialGrid(9), TimeAxis(1.0, 8)
    f = SpaceTimeField.from_function(lambda t, x, y: t + x * y, g, ax)
    h = SpaceTimeField.from_function(lambda t, x, y: np.cos(x) + 0 * t, g, ax)
    lhs = integrate(f * a + h * b)
    assert lhs == pytest.approx(a * integrate(f) + b * integrate(h), abs=1e-12)


def test_integrate_polynomial():
    g, ax = SpatialGrid(33), TimeAxis(1.0, 32)
    f = SpaceTimeField.from_function(lambda t, x, y: t * x + 0 * y, g, ax)
    assert integrate(f).real == pytest.approx(0.25, rel=1e-10)


def test_field_and_trace_roundtrip(tmp_path, small):
    g, ax = small
    f = SpaceTimeField.from_function(lambda t, x, y: np.exp(1j * t) * x * y, g, ax)
    write_field(tmp_path / "f.wvlt", f)
    back = read_field(tmp_path / "f.wvlt")
    assert np.array_equal(back.values, f.values)
    tr = BoundaryTimeTrace.of(f)
    write_trace_csv(tmp_path / "t.csv", tr)
    assert np.allclose(read_trace_csv(tmp_path / "t.csv", g, ax).values, tr.values, atol=0)


def test_field_arithmetic_checks_grids(small):
    g, ax = small
    f = SpaceTimeField.zeros(g, ax)
    other = SpaceTimeField.zeros(SpatialGrid(9), ax)
    with pytest.raises(GridError):
        f + other
    assert (f + 1.0).max_abs() == 1.0
    assert np.array_equal(f.reflect_time().values, f.values[::-1])
