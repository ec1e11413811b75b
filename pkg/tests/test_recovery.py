import numpy as np
import pytest

from wvlab.grid import Phantom, SpaceTimeField, SpatialGrid, TimeAxis
from wvlab.measurement import Scenario
from wvlab.phantoms import build_phantom, radial_bump
from wvlab.probes import GeometryError
from wvlab.recovery import (
    GeometrySet,
    RecoveryError,
    _beta_batch,
    _beta_tasks,
    interpolate_slices,
    prolongation_1d,
    recover_beta,
    recover_q,
    sinograms_q,
    support_lattice,
    tikhonov_quasi_optimal,
)


def _static(g, ax, img):
    return SpaceTimeField(np.broadcast_to(img, (ax.n_t + 1, g.n, g.n)).copy(), g, ax)


def test_geometry_validation():
    with pytest.raises(GeometryError):
        GeometrySet(points=((0.5, 1.2),))
    with pytest.raises(GeometryError):
        GeometrySet(points=((0.5, 0.5),), pairs=(((1.0, 0.0), (0.6, 0.8)),))
    geo = GeometrySet.beta_lattice(3)
    assert len(geo.points) == 9
    assert max(geo.intersection_error(i) for i in range(9)) < 1e-12
    assert np.allclose(geo.varpi(0), -np.array([1.0, 1.0]) / np.sqrt(2))


def test_support_lattice_keeps_requested_points_first():
    geo = GeometrySet.beta_lattice(3, 0.3, 0.7)
    full = support_lattice(geo, 5, 0.1, 0.9)
    assert full.points[:9] == geo.points
    assert len(set(full.points)) == len(full.points)
    assert len(full.points) == 25  # the 3x3 points all lie on the 5x5 support lattice


def test_prolongation_is_a_partition_of_unity():
    P = prolongation_1d(9, 17)
    assert P.shape == (17, 9)
    assert np.allclose(P.sum(axis=1), 1.0)


def test_interpolate_slices_hits_the_centers():
    g, ax = SpatialGrid(9), TimeAxis(1.0, 10)
    sl = np.stack([np.full((9, 9), v) for v in (1.0, 2.0, 3.0)])
    f = interpolate_slices(sl, (0.3, 0.5, 0.7), ax, g).values.real
    assert f[3, 0, 0] == pytest.approx(1.0) and f[5, 0, 0] == pytest.approx(2.0) and f[7, 0, 0] == pytest.approx(3.0)
    assert f[0, 0, 0] == 1.0 and f[-1, 0, 0] == 3.0
    assert f[4, 0, 0] == pytest.approx(1.5)


def test_tikhonov_recovers_a_smooth_image_from_direct_samples():
    g = SpatialGrid(17)
    X, Y = g.coords
    img = np.sin(np.pi * X) * np.sin(np.pi * Y)
    A = np.eye(g.n * g.n)
    inv = tikhonov_quasi_optimal(A, img.ravel(), g, coarse=17)
    assert np.max(np.abs(inv.image - img)) < 1e-3
    assert inv.lam in inv.lams


def test_q_sensitivity_weights_predict_small_perturbations():
    # for a tiny, time-independent q the extraction is linear in q and given by the weights
    g, ax = SpatialGrid(17), TimeAxis(1.0, 16)
    X, Y = g.coords
    q = _static(g, ax, 1e-4 * radial_bump(X, Y, (0.45, 0.55), 0.35))
    s = Scenario(Phantom(q, SpaceTimeField.zeros(g, ax)))
    geo = GeometrySet.q_mode(2, 9, t_centers=(0.5,), t_width=0.25, eps=0.2)
    ext = sinograms_q(s, geo, 4.0, keep_weights=True)
    pred = ext.model(0, q.values[0].real, g)
    data = ext.sinograms[0].values
    assert np.max(np.abs(pred - data)) < 1e-3 * np.max(np.abs(data))


def test_beta_sensitivity_weights_are_exact_for_static_beta():
    g, ax = SpatialGrid(17), TimeAxis(1.0, 16)
    X, Y = g.coords
    ph = build_phantom("bump_beta", g, ax)
    b = 0.5 * radial_bump(X, Y, (0.45, 0.55), 0.3)
    s = Scenario(Phantom(ph.q, _static(g, ax, b)))
    geo = GeometrySet.beta_lattice(2, 0.4, 0.6, t_centers=(0.5,), t_width=0.25, eps=0.2)
    tasks, _ = _beta_tasks(s, geo, 4.0, None, "probe", keep_weights=True)
    wx = g.quadrature_weights.ravel()
    for t in tasks:
        vals, W = _beta_batch(t)
        pred = np.einsum("kxc,x,x->kc", W.astype(float), wx, b.ravel())
        assert np.max(np.abs(pred - vals)) < 1e-6 * np.max(np.abs(vals))


@pytest.fixture(scope="module")
def beta_scene():
    g, ax = SpatialGrid(17), TimeAxis(1.0, 16)
    return Scenario(build_phantom("bump_beta", g, ax))


def test_beta_null_and_linearity(beta_scene):
    s = beta_scene
    geo = GeometrySet.beta_lattice(2, 0.4, 0.6, t_centers=(0.5,), t_width=0.25, eps=0.2)
    z = s.with_phantom(Phantom(s.phantom.q, SpaceTimeField.zeros(s.grid, s.axis)))
    rz = recover_beta(z, geo, (4.0,), truth=False, support=3)
    assert np.max(np.abs(rz.estimates)) == 0.0
    r1 = recover_beta(s, geo, (4.0,), method="pointwise")
    s2 = s.with_phantom(Phantom(s.phantom.q, s.phantom.beta * 2.0))
    r2 = recover_beta(s2, geo, (4.0,), method="pointwise")
    assert np.allclose(r2.estimates, 2 * r1.estimates, rtol=1e-10)
    assert r1.errors.shape == (1, 1, 4)


def test_recover_beta_argument_checks(beta_scene):
    geo = GeometrySet.beta_lattice(2, 0.4, 0.6, t_centers=(0.5,), t_width=0.25, eps=0.2)
    with pytest.raises(RecoveryError):
        recover_beta(beta_scene, geo, (4.0,), method="magic")
    with pytest.raises(RecoveryError):
        recover_beta(beta_scene, geo, (4.0,), calibration="leading")
    lead = recover_beta(beta_scene, geo, (4.0,), calibration="leading", method="pointwise")
    assert np.all(np.isfinite(lead.estimates))


def test_recover_q_small_end_to_end():
    g, ax = SpatialGrid(33), TimeAxis(1.0, 32)
    s = Scenario(build_phantom("bump_q", g, ax))
    geo = GeometrySet.q_mode(60, 33, t_centers=(0.5,))
    rep = recover_q(s, geo, (8.0,))
    assert rep.errors.shape == (1, 1)
    assert rep.errors[0, 0] < 0.15
    assert rep.extras["fbp_errors"][0, 0] > rep.errors[0, 0]
    with pytest.raises(RecoveryError):
        recover_q(s, geo, (8.0,), method="magic")


def test_q_null_phantom_gives_zero_data_and_reconstruction():
    g, ax = SpatialGrid(17), TimeAxis(1.0, 16)
    s = Scenario(build_phantom("zero", g, ax))
    geo = GeometrySet.q_mode(60, 17, t_centers=(0.5,), t_width=0.25, eps=0.2)
    rep = recover_q(s, geo, (4.0,), truth=False)
    assert np.max(np.abs(rep.extras["sinograms"][4.0][0].values)) == 0.0
    assert np.max(np.abs(rep.estimates)) <= 1e-2


def test_empty_beta_geometry_gives_empty_report(beta_scene):
    rep = recover_beta(beta_scene, GeometrySet(t_centers=(0.5,), t_width=0.25), (4.0, 8.0))
    assert rep.estimates.shape == (2, 1, 0)
    assert list(rep.rows()) == []


def test_calibration_integrals_are_resolved():
    from wvlab.probes import BumpSpec

    b = GeometrySet().bump(0.5)
    assert isinstance(b, BumpSpec)
    for k in (2, 3):
        a, c = b.phi_power_integral(k), b.phi_power_integral(k, n=8001)
        assert abs(a - c) <= 1e-6 * abs(c)
        a, c = b.chi_power_integral(k), b.chi_power_integral(k, n=8001)
        assert abs(a - c) <= 1e-6 * abs(c)
