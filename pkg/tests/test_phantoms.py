import numpy as np
import pytest

from wvlab.grid import SpatialGrid, TimeAxis
from wvlab.phantoms import PHANTOM_NAMES, build_phantom, radial_bump


@pytest.mark.parametrize("name", PHANTOM_NAMES)
def test_builtin_phantoms_are_real_and_finite(name):
    g, ax = SpatialGrid(17), TimeAxis(1.0, 16)
    ph = build_phantom(name, g, ax)
    assert np.all(np.isfinite(ph.q.values))
    assert np.max(np.abs(ph.q.values.imag)) == 0


def test_unknown_phantom():
    with pytest.raises(ValueError):
        build_phantom("nope", SpatialGrid(9), TimeAxis(1.0, 8))


def test_scale_multiplies_the_coefficient_of_interest():
    g, ax = SpatialGrid(17), TimeAxis(1.0, 16)
    a = build_phantom("bump_beta", g, ax)
    b = build_phantom("bump_beta", g, ax, scale=2.0)
    assert np.allclose(b.beta.values, 2 * a.beta.values)
    assert np.allclose(b.q.values, a.q.values)


def test_bumps_vanish_near_the_boundary():
    g, ax = SpatialGrid(33), TimeAxis(1.0, 16)
    for name in ("bump_q", "bump_beta"):
        ph = build_phantom(name, g, ax)
        for f in (ph.q, ph.beta):
            assert np.max(np.abs(g.boundary_values(f.values))) == 0


def test_radial_bump_profile():
    X = np.array([0.5, 0.7, 0.95])
    v = radial_bump(X, np.full(3, 0.5), radius=0.4)
    assert v[0] == pytest.approx(1.0)
    assert 0 < v[1] < 1
    assert v[2] == 0
