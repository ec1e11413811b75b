"""End-to-end acceptance checks, one test per criterion.

Every test prints a single ``criterion k: PASS|FAIL ...`` line (also collected in
the terminal summary) and then asserts the same condition.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from wvlab.grid import BoundaryTimeTrace, Phantom, SpaceTimeField, SpatialGrid, TimeAxis, integrate
from wvlab.measurement import InputData, ProbeBoundaryData, Scenario, apply_measurement, boundary_pairing, linearize_second
from wvlab.phantoms import build_phantom
from wvlab.probes import BumpSpec, RaySpec, assemble_probe, plateau_chi, reference_ray, remainder_measure, remainder_slope, smooth_step, time_bump
from wvlab.recovery import GeometrySet, interpolate_slices, recover_beta, recover_q
from wvlab.solver import (
    LinearProblemSpec,
    NonlinearProblemSpec,
    compatibility_sequence,
    convergence_slope,
    manufactured_error,
    solve_linear,
    solve_nonlinear,
)
from wvlab.symbols import BACKWARD, FORWARD, SymbolSpec, bound_lattice, root_scan
from wvlab.xray import Sinogram, default_geometry, fbp_invert, fourier_slice_residual, xray_forward

BASELINE = Path(__file__).parent / "baselines" / "q_recovery.json"
RHOS = (4.0, 8.0, 16.0)


def report(k: int, ok: bool, detail: str) -> None:
    line = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_01_symbol_bound():
    t0 = time.perf_counter()
    viol, worst = 0, math.inf
    for kind in (FORWARD, BACKWARD):
        v, w, _ = bound_lattice([1.0, 2.0, 4.0, 8.0, 16.0], n=41, extent=20.0, spec=SymbolSpec(kind))
        viol, worst = viol + v, min(worst, w)
    dt = time.perf_counter() - t0
    report(1, viol == 0 and dt < 5.0, f"violations={viol} min(lhs/4rho^6)={worst:.4f} runtime={dt:.2f}s (<5s)")


def test_criterion_02_root_lemma():
    t0 = time.perf_counter()
    viol, min_imag, min_r1 = 0, math.inf, math.inf
    for kind in (FORWARD, BACKWARD):
        scan = root_scan(SymbolSpec(kind), [1.0, 2.0, 4.0, 8.0, 16.0], n_radii=64, n_angles=64, r_max=50.0)
        viol += scan.violations
        min_imag = min(min_imag, scan.min_imag)
        # the r = 1 boundary case approaches Im sigma_- = 0 only as rho grows
        wit = root_scan(SymbolSpec(kind), [1024.0, 2048.0], n_radii=1, n_angles=64, r_max=1.0)
        min_r1 = min(min_r1, wit.min_imag_r1)
    dt = time.perf_counter() - t0
    ok = viol == 0 and min_r1 <= 1e-6 and dt < 5.0
    report(2, ok, f"violations={viol} min Im sigma={min_imag:.3e} witness Im sigma_-(r=1)={min_r1:.3e} (<=1e-6) runtime={dt:.2f}s")


def test_criterion_03_solver_convergence():
    t0 = time.perf_counter()
    ns = (33, 65, 129)
    errs = [manufactured_error(n) for n in ns]
    slope = convergence_slope([1.0 / (n - 1) for n in ns], errs)
    dt = time.perf_counter() - t0
    report(3, slope >= 1.9 and dt < 120, f"slope={slope:.3f} (>=1.9) errors={[f'{e:.2e}' for e in errs]} runtime={dt:.1f}s")


def test_criterion_04_remainder_scaling():
    t0 = time.perf_counter()
    g, ax = SpatialGrid(129), TimeAxis(1.0, 128)
    q = SpaceTimeField.zeros(g, ax)
    ray = reference_ray(0.0)
    bump = BumpSpec(0.25, 0.5, 0.25)
    slopes, zero_first = {}, True
    for N in (0, 1):
        norms = []
        for rho in RHOS:
            rec = remainder_measure(assemble_probe(FORWARD, rho, ray, N, bump, q), q)
            norms.append(rec.l2_norm)
            zero_first &= bool(np.max(np.abs(rec.r.values[:2])) == 0.0)
        slopes[N] = remainder_slope(RHOS, norms)
    dt = time.perf_counter() - t0
    ok = -1.4 <= slopes[0] <= -0.6 and -2.5 <= slopes[1] <= -1.5 and zero_first and dt < 300
    report(4, ok, f"slope N=0 {slopes[0]:.3f} (in [-1.4,-0.6]) N=1 {slopes[1]:.3f} (in [-2.5,-1.5]) "
                  f"zero first slices={zero_first} runtime={dt:.1f}s")


def test_criterion_05_pairing_oracle():
    t0 = time.perf_counter()
    g, ax = SpatialGrid(129), TimeAxis(1.0, 128)
    q = SpaceTimeField.from_function(lambda t, x, y: 3 * np.exp(-((x - 0.55) ** 2 + (y - 0.45) ** 2) / 0.03) * (1 + 0.3 * t), g, ax)
    z = SpaceTimeField.zeros(g, ax)
    ray = RaySpec.through((0.5, 0.5), (math.cos(0.3), math.sin(0.3)))
    bump = BumpSpec(0.25, 0.5, 0.125)
    fp = assemble_probe(FORWARD, 8.0, ray, 0, bump, z)
    bp = assemble_probe(BACKWARD, 8.0, ray.reversed(), 0, bump, z)
    data = InputData(fp.boundary_trace)
    m1 = apply_measurement(Scenario(Phantom(q, z)), data, gauge=fp.gauge, keep_field=True)
    m0 = apply_measurement(Scenario(Phantom(z, z)), data, gauge=fp.gauge)
    val = boundary_pairing("q_identity", m1 - m0, ProbeBoundaryData.from_probe(bp))
    zz = np.zeros((g.n, g.n))
    B = solve_linear(LinearProblemSpec(z, bp.boundary_trace, zz, zz, direction="backward-final-data", gauge=bp.gauge))
    inner = integrate(q * m1.field * B)
    rel = abs(val - inner) / abs(inner)
    dt = time.perf_counter() - t0
    report(5, rel <= 0.02 and dt < 180, f"relative mismatch={rel:.4f} (<=0.02) runtime={dt:.1f}s")


def _input(g, ax, w, rho=2.0, amp=0.05):
    w = np.asarray(w, dtype=float) / np.linalg.norm(w)
    bp = g.boundary_points
    v = amp * time_bump(ax.t, 0.5, 0.25)[:, None] * np.exp(rho**2 * ax.t[:, None] - rho * (bp @ w)[None])
    return InputData(BoundaryTimeTrace(v.astype(complex), g, ax))


def test_criterion_06_linearization():
    g, ax = SpatialGrid(33), TimeAxis(1.0, 128)
    s = Scenario(build_phantom("bump_beta", g, ax))
    h1, h2 = _input(g, ax, (1.0, 0.0)), _input(g, ax, (0.0, 1.0))
    lin = apply_measurement(s, h1, keep_field=True).field.values
    errs = []
    for e in (1e-2, 1e-3, 1e-4):
        u = apply_measurement(s, h1.scaled(e), "nonlinear", keep_field=True).field.values
        errs.append(np.linalg.norm(u / e - lin) / np.linalg.norm(lin))
    order = convergence_slope([1e-2, 1e-3, 1e-4], errs)
    eps = 1e-3
    d = linearize_second(s, h1, h2, "direct", keep_field=True).field.values
    st = linearize_second(s, h1, h2, "stencil", eps=(eps, eps), keep_field=True).field.values
    second = np.linalg.norm(st - d) / np.linalg.norm(d)
    z = s.with_phantom(Phantom(s.phantom.q, SpaceTimeField.zeros(g, ax)))
    null = np.max(np.abs(linearize_second(z, h1, h2, "direct", keep_field=True).field.values))
    ok = 0.9 <= order <= 1.1 and second <= 0.01 + eps and null <= 1e-12
    report(6, ok, f"first-order slope={order:.3f} (~1) direct-vs-stencil={second:.4f} (<=0.01+eps) beta=0 max|U2|={null:.1e}")


def test_criterion_07_xray_round_trip():
    t0 = time.perf_counter()
    g = SpatialGrid(129)
    X, Y = g.coords
    f = smooth_step((0.3 - np.hypot(X - 0.55, Y - 0.45)) / 0.3)
    s = xray_forward(f, g, *default_geometry(180, 2 * g.n))
    rec = fbp_invert(s, g)
    w = g.quadrature_weights
    err = float(np.sqrt(np.sum(w * (rec - f) ** 2) / np.sum(w * f**2)))
    fs = fourier_slice_residual(f, g, Sinogram(s.angles[::30], s.offsets, s.values[::30]))
    dt = time.perf_counter() - t0
    report(7, err <= 0.1 and fs <= 0.02 and dt < 60, f"FBP rel L2={err:.4f} (<=0.10) Fourier-slice={fs:.2e} (<=0.02) runtime={dt:.1f}s")


@pytest.fixture(scope="module")
def q_run():
    g, ax = SpatialGrid(65), TimeAxis(1.0, 64)
    s = Scenario(build_phantom("bump_q", g, ax))
    t0 = time.perf_counter()
    rep = recover_q(s, GeometrySet.q_mode(60, g.n), RHOS)
    return rep, time.perf_counter() - t0


def test_criterion_08_q_recovery(q_run):
    rep, dt = q_run
    errs = rep.require_truth()
    e8 = errs[RHOS.index(8.0)]
    mono = bool(np.all(errs[RHOS.index(16.0)] <= errs[RHOS.index(4.0)]))
    if BASELINE.exists():
        ref = np.asarray(json.loads(BASELINE.read_text())["q_errors"])
        drift = float(np.max(np.abs(errs - ref) / ref))
        regress = drift <= 0.01
        note = f"baseline drift={drift:.2e} (<=0.01)"
    else:
        BASELINE.parent.mkdir(parents=True, exist_ok=True)
        BASELINE.write_text(json.dumps({"q_errors": errs.tolist()}, indent=2) + "\n")
        regress, note = True, "baseline written (first run)"
    ok = bool(np.all(e8 <= 0.15)) and mono and regress and dt < 1200
    report(8, ok, f"rho=8 slice errors={np.round(e8, 4).tolist()} (<=0.15) rho16<=rho4 slice-wise={mono} {note} "
                  f"plain FBP rho=8={np.round(rep.extras['fbp_errors'][1], 3).tolist()} runtime={dt:.0f}s")


def test_criterion_09_beta_recovery(q_run):
    qrep, _ = q_run
    g, ax = SpatialGrid(65), TimeAxis(1.0, 64)
    s = Scenario(build_phantom("bump_beta", g, ax))
    # probes are built with the q recovered at the largest rho (same q as the bump_q phantom)
    q_model = interpolate_slices(qrep.estimates[RHOS.index(16.0)], qrep.t_centers, ax, g)
    geo = GeometrySet.beta_lattice(5)
    t0 = time.perf_counter()
    rep = recover_beta(s, geo, RHOS, q_model=q_model)
    med = rep.median_errors()
    z = s.with_phantom(Phantom(s.phantom.q, SpaceTimeField.zeros(g, ax)))
    null = float(np.max(np.abs(recover_beta(z, geo, (8.0,), q_model=q_model, truth=False).estimates)))
    dt = time.perf_counter() - t0
    ok = med[RHOS.index(8.0)] <= 0.25 and bool(np.all(np.diff(med) <= 0)) and null <= 1e-2 and dt < 1800
    report(9, ok, f"median point errors rho={RHOS}: {np.round(med, 4).tolist()} (rho=8 <=0.25, non-increasing) "
                  f"null max|beta|={null:.1e} (<=1e-2) runtime={dt:.0f}s")


def test_criterion_10_compatibility():
    g = SpatialGrid(33)
    X, Y = g.coords
    g0 = 0.3 * np.sin(np.pi * X) * np.sin(np.pi * Y)
    g1 = 0.2 * np.sin(np.pi * X) * np.sin(2 * np.pi * Y)
    errs = []
    for nt in (16, 32, 64, 128, 256):
        ax = TimeAxis(1.0, nt)
        ph = build_phantom("bump_beta", g, ax)
        h = BoundaryTimeTrace.zeros(g, ax)
        g2 = compatibility_sequence(g0, g1, h, ph.q, ph.beta, 2)[2]
        u, _ = solve_nonlinear(NonlinearProblemSpec(LinearProblemSpec(ph.q, h, g0, g1), ph.beta))
        v = u.values
        d2 = (2 * v[0] - 5 * v[1] + 4 * v[2] - v[3]) / ax.dt**2
        errs.append(float(np.max(np.abs(d2 - g2)) / np.max(np.abs(g2))))
    ax = TimeAxis(1.0, 16)
    ph = build_phantom("bump_beta", g, ax)
    zero = np.zeros((g.n, g.n))
    cz = compatibility_sequence(zero, zero, BoundaryTimeTrace.zeros(g, ax), ph.q, ph.beta, 2)
    uz, _ = solve_nonlinear(NonlinearProblemSpec(LinearProblemSpec(ph.q, BoundaryTimeTrace.zeros(g, ax), zero, zero), ph.beta))
    zero_ok = max(np.max(np.abs(x)) for x in cz.g) == 0.0 and uz.max_abs() == 0.0
    rate = -convergence_slope([16, 32, 64, 128, 256], errs)
    ok = bool(np.all(np.diff(errs) < 0)) and rate >= 0.8 and zero_ok
    report(10, ok, f"relative g2 mismatch vs dt={[f'{e:.3e}' for e in errs]} (decreasing, rate={rate:.2f}) zero data exact={zero_ok}")
