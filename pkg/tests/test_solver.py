import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wvlab.grid import BoundaryTimeTrace, SpaceTimeField, SpatialGrid, TimeAxis
from wvlab.phantoms import build_phantom
from wvlab.probes import time_bump
from wvlab.solver import (
    CompatibilityError,
    LinearProblemSpec,
    NonlinearProblemSpec,
    SolverConfig,
    compatibility_sequence,
    convergence_slope,
    gauge_coefficients,
    manufactured_error,
    solve_linear,
    solve_nonlinear,
)
from wvlab.symbols import BACKWARD, FORWARD, GaugeShift


def _boundary_data(g, ax, amp=1.0):
    bp = g.boundary_points
    v = amp * time_bump(ax.t, 0.5, 0.3)[:, None] * np.sin(np.pi * bp[:, 0] + 2 * bp[:, 1])[None]
    return BoundaryTimeTrace(v.astype(complex), g, ax)


def _zeros(g):
    return np.zeros((g.n, g.n))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(theta=0.7)
    with pytest.raises(ValueError):
        SolverConfig(picard_max=0)


def test_gauge_coefficients_of_zero_shift_are_physical():
    c = gauge_coefficients(0.0, (0.0, 0.0))
    assert (c.c_t, c.alpha, c.kappa, c.b, c.e) == (0.0, 1.0, 0.0, (0.0, 0.0), (0.0, 0.0))


def test_manufactured_solution_converges_at_second_order():
    ns = (17, 33)
    errs = [manufactured_error(n) for n in ns]
    assert errs[1] < errs[0] / 3
    assert convergence_slope([1 / (n - 1) for n in ns], errs) > 1.8


def test_compatibility_mismatch_is_rejected(small):
    g, ax = small
    q = SpaceTimeField.zeros(g, ax)
    g0 = np.ones((g.n, g.n))
    with pytest.raises(CompatibilityError):
        LinearProblemSpec(q, BoundaryTimeTrace.zeros(g, ax), g0, _zeros(g))


def test_zero_data_gives_zero_solution(small):
    g, ax = small
    q = build_phantom("bump_q", g, ax).q
    u = solve_linear(LinearProblemSpec(q, BoundaryTimeTrace.zeros(g, ax), _zeros(g), _zeros(g)))
    assert u.max_abs() == 0.0


@settings(max_examples=10, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_linear_solve_is_linear_in_the_data(a, b):
    g, ax = SpatialGrid(9), TimeAxis(1.0, 8)
    q = build_phantom("bump_q", g, ax).q
    h1, h2 = _boundary_data(g, ax), _boundary_data(g, ax, 0.5).reflect_time()
    z = _zeros(g)
    solve = lambda h: solve_linear(LinearProblemSpec(q, h, z, z)).values  # noqa: E731
    lhs = solve(h1 * a + h2 * b)
    assert np.allclose(lhs, a * solve(h1) + b * solve(h2), atol=1e-10)


def test_backward_problem_is_the_reflected_forward_problem(small):
    g, ax = small
    q = build_phantom("bump_q", g, ax).q
    h = _boundary_data(g, ax)
    z = _zeros(g)
    back = solve_linear(LinearProblemSpec(q, h, z, z, direction="backward-final-data"))
    fwd = solve_linear(LinearProblemSpec(q.reflect_time(), h.reflect_time(), z, z))
    assert np.allclose(back.values, fwd.values[::-1], atol=1e-13)


def test_gauged_solve_matches_physical_solve():
    g, ax = SpatialGrid(33), TimeAxis(1.0, 32)
    q = build_phantom("bump_q", g, ax).q
    gauge = GaugeShift(1.0, (0.6, 0.8), FORWARD)
    X, Y = g.coords
    w = np.exp(gauge.log_weight(ax.t[:, None, None], X[None], Y[None]))
    H = _boundary_data(g, ax)
    z = _zeros(g)
    U = solve_linear(LinearProblemSpec(q, H, z, z, gauge=gauge)).values
    h = BoundaryTimeTrace(H.values * g.boundary_values(w), g, ax)
    u = solve_linear(LinearProblemSpec(q, h, z, z)).values
    # the two discretizations agree up to O(h^2 + dt^2), not to rounding
    assert np.linalg.norm(U * w - u) / np.linalg.norm(u) < 1e-3


def test_backward_gauge_sense_is_checked(small):
    g, ax = small
    q = SpaceTimeField.zeros(g, ax)
    with pytest.raises(ValueError):
        LinearProblemSpec(q, BoundaryTimeTrace.zeros(g, ax), _zeros(g), _zeros(g),
                          gauge=GaugeShift(1.0, (1.0, 0.0), BACKWARD))


def test_nonlinear_with_zero_beta_equals_linear(small):
    g, ax = small
    q = build_phantom("bump_q", g, ax).q
    h = _boundary_data(g, ax, 0.1)
    z = _zeros(g)
    lp = LinearProblemSpec(q, h, z, z)
    u_lin = solve_linear(lp).values
    u_nl, rep = solve_nonlinear(NonlinearProblemSpec(lp, SpaceTimeField.zeros(g, ax)))
    assert np.allclose(u_nl.values, u_lin, atol=1e-12)
    assert all(it == 1 for it in rep.picard_iters)


def test_nonlinear_picard_converges(small):
    g, ax = small
    ph = build_phantom("bump_beta", g, ax)
    z = _zeros(g)
    lp = LinearProblemSpec(ph.q, _boundary_data(g, ax, 0.1), z, z)
    u, rep = solve_nonlinear(NonlinearProblemSpec(lp, ph.beta))
    assert max(rep.residuals) < 1e-10
    assert np.all(np.isfinite(u.values))


def test_compatibility_sequence_zero_data_is_zero(small):
    g, ax = small
    ph = build_phantom("bump_beta", g, ax)
    cs = compatibility_sequence(_zeros(g), _zeros(g), BoundaryTimeTrace.zeros(g, ax), ph.q, ph.beta)
    assert all(np.max(np.abs(gl)) == 0 for gl in cs.g)
    with pytest.raises(ValueError):
        compatibility_sequence(_zeros(g), _zeros(g), BoundaryTimeTrace.zeros(g, ax), ph.q, ph.beta, m=3)


def test_compatibility_rejects_degenerate_coefficient(small):
    g, ax = small
    ph = build_phantom("bump_beta", g, ax, scale=10.0)
    g0 = np.ones((g.n, g.n))
    with pytest.raises(CompatibilityError):
        compatibility_sequence(g0, _zeros(g), BoundaryTimeTrace.zeros(g, ax), ph.q, ph.beta)
