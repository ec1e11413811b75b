"""End-to-end reconstruction of q (line integrals + FBP) and of beta (point values).

Both pipelines work in the gauge frame and are batched: every probe sharing a
gauge (same rho and direction) is marched as one multi-column solve.  Because
the backward probe's boundary values vanish outside its time bump, all pairings
and calibration integrals only involve the levels of that bump window.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .grid import (
    SpaceTimeField,
    SpatialGrid,
    TimeAxis,
    normal_derivative_array,
    normal_derivative_matrix,
    time_derivative,
)
from .measurement import Scenario, combined_gauge, shifted_second_derivative
from .probes import BumpSpec, GeometryError, RaySpec, plateau_chi, time_bump
from .solver import SolverConfig, _LinearMarch, coefficients_for, march_columns
from .symbols import BACKWARD, FORWARD, GaugeShift
from .xray import CENTER, LineSpec, Sinogram, default_geometry, fbp_invert

CALIBRATIONS = ("probe", "leading")


class RecoveryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class GeometrySet:
    """Probe geometry for both pipelines.

    q-mode uses ``angles`` x ``offsets`` lines; beta-mode uses ``points`` with one
    orthonormal pair (omega_1, omega_2) per point; both share the time bumps.
    """

    angles: tuple = ()
    offsets: tuple = ()
    t_centers: tuple = (0.3, 0.5, 0.7)
    t_width: float = 0.125
    eps: float = 0.1
    points: tuple = ()
    pairs: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        object.__setattr__(self, "offsets", tuple(float(o) for o in self.offsets))
        object.__setattr__(self, "t_centers", tuple(float(t) for t in self.t_centers))
        pts = tuple(tuple(float(v) for v in p) for p in self.points)
        pairs = self.pairs if self.pairs else tuple(((1.0, 0.0), (0.0, 1.0)) for _ in pts)
        pairs = tuple((tuple(map(float, a)), tuple(map(float, b))) for a, b in pairs)
        if len(pairs) != len(pts):
            raise GeometryError("need one direction pair per point")
        for a, b in pairs:
            a, b = np.array(a), np.array(b)
            if abs(a @ a - 1) > 1e-12 or abs(b @ b - 1) > 1e-12 or abs(a @ b) > 1e-12:
                raise GeometryError("direction pairs must be orthonormal")
        for p in pts:
            if not (0 < p[0] < 1 and 0 < p[1] < 1):
                raise GeometryError(f"point {p} is not interior")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "pairs", pairs)
        BumpSpec(self.eps, 0.5, self.t_width)  # validates eps and width

    @classmethod
    def q_mode(cls, n_angles: int, n_offsets: int, **kw) -> GeometrySet:
        angles, offsets = default_geometry(n_angles, n_offsets)
        return cls(angles=tuple(angles), offsets=tuple(offsets), **kw)

    @classmethod
    def beta_lattice(cls, m: int = 5, lo: float = 0.3, hi: float = 0.7, pair=((1.0, 0.0), (0.0, 1.0)), **kw) -> GeometrySet:
        g = np.linspace(lo, hi, m)
        pts = tuple((float(x), float(y)) for x in g for y in g)
        return cls(points=pts, pairs=tuple(pair for _ in pts), **kw)

    def bump(self, t_center: float) -> BumpSpec:
        return BumpSpec(self.eps, t_center, self.t_width)

    def varpi(self, i: int) -> np.ndarray:
        a, b = (np.array(v) for v in self.pairs[i])
        return -(a + b) / math.sqrt(2.0)

    def triple(self, i: int) -> tuple[RaySpec, RaySpec, RaySpec]:
        """Rays along omega_1, omega_2 and varpi, all passing through point i."""
        x0 = self.points[i]
        a, b = self.pairs[i]
        return RaySpec.through(x0, a), RaySpec.through(x0, b), RaySpec.through(x0, self.varpi(i))

    def intersection_error(self, i: int) -> float:
        """Largest distance from point i to the three lines of its triple."""
        x0 = np.array(self.points[i])
        worst = 0.0
        for ray in self.triple(i):
            d = x0 - np.array(ray.anchor)
            worst = max(worst, abs(float(ray.transversal @ d)))
        return worst


# ---------------------------------------------------------------------------
# report


@dataclass(eq=False)
class RecoveryReport:
    """Estimates per rho and time center, with errors against ground truth when available.

    q:    estimates (n_rho, n_t, n, n), errors = relative L2 error per slice (n_rho, n_t)
    beta: estimates (n_rho, n_t, n_points), errors = relative point errors (n_rho, n_t, n_points)
    """

    kind: str
    rhos: tuple
    t_centers: tuple
    estimates: np.ndarray
    truth: np.ndarray | None = None
    errors: np.ndarray | None = None
    slopes: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.truth is not None and self.errors is None:
            self.errors = _errors(self.kind, self.estimates, self.truth, self.extras.get("weights"))
        if self.errors is not None and np.any(self.errors < 0):
            raise RecoveryError("errors must be nonnegative")
        if self.errors is not None and len(self.rhos) >= 2:
            e = self.errors.reshape(len(self.rhos), -1)
            with np.errstate(divide="ignore"):
                le = np.log(np.maximum(e, 1e-300))
            x = np.log(np.asarray(self.rhos, dtype=float))
            self.slopes = np.polyfit(x, le, 1)[0]

    def require_truth(self) -> np.ndarray:
        if self.truth is None or self.errors is None:
            raise RecoveryError("no ground truth available; refusing to compare")
        return self.errors

    def median_errors(self) -> np.ndarray:
        """Median point error per rho (beta reports)."""
        e = self.require_truth()
        return np.median(e.reshape(len(self.rhos), -1), axis=1)

    def rows(self):
        e = self.errors
        if self.kind == "q":
            for i, r in enumerate(self.rhos):
                for k, t in enumerate(self.t_centers):
                    yield {"rho": r, "t_center": t, "rel_l2_error": None if e is None else float(e[i, k])}
        else:
            pts = self.extras.get("points", ())
            for i, r in enumerate(self.rhos):
                for k, t in enumerate(self.t_centers):
                    for j, p in enumerate(pts):
                        yield {
                            "rho": r, "t_center": t, "x": p[0], "y": p[1],
                            "estimate": float(self.estimates[i, k, j]),
                            "truth": None if self.truth is None else float(self.truth[k, j]),
                            "rel_error": None if e is None else float(e[i, k, j]),
                        }


def _errors(kind, est, truth, weights):
    if kind == "q":
        w = weights
        num = np.sqrt(np.einsum("rkij,ij->rk", (est - truth[None]) ** 2, w))
        den = np.sqrt(np.einsum("kij,ij->k", truth**2, w))
        if np.any(den <= 0):
            return num  # zero truth: absolute error
        return num / den[None]
    den = np.abs(truth)[None]
    return np.where(den > 0, np.abs(est - truth[None]) / np.where(den > 0, den, 1.0), np.abs(est))


# ---------------------------------------------------------------------------
# batched marches


def _window(axis: TimeAxis, bump: BumpSpec) -> tuple[int, int]:
    """First and last level index of the closed bump support, clipped to the axis."""
    bump.check_axis(axis)
    lo = int(math.floor((bump.t_center - bump.t_width) / axis.dt + 1e-9))
    hi = int(math.ceil((bump.t_center + bump.t_width) / axis.dt - 1e-9))
    return max(lo, 0), min(hi, axis.n_t)


def _neumann_cols(U: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    """(N, m) flat states -> (nb, m) outward normal derivatives."""
    n = grid.n
    arr = np.moveaxis(U.reshape(n, n, -1), -1, 0)
    return normal_derivative_array(arr, grid).T


def _forward_levels(march, grid, axis, coef, cfg, h, q, lo, hi, forcing=None, keep=True, on_level=None):
    """March forward in the gauge frame; return stored levels lo..hi (or None)."""
    N, m = grid.n * grid.n, h.shape[-1]
    z = np.zeros((N, m))
    out = np.zeros((hi - lo + 1, N, m)) if keep else None
    for k, U in march_columns(grid, axis, coef, cfg, h, z, z, q=q, forcing=forcing, march=march, stop=hi):
        if k >= lo:
            if keep:
                out[k - lo] = U
            if on_level is not None:
                on_level(k, U)
    return out


def _backward_levels(march, grid, axis, coef, cfg, h, q, lo, hi):
    """Backward (final-data zero) march by time reflection; returns t-levels lo..hi."""
    nt = axis.n_t
    N, m = grid.n * grid.n, h.shape[-1]
    z = np.zeros((N, m))
    qr = None if q is None else q[::-1]
    out = np.zeros((hi - lo + 1, N, m))
    for k, U in march_columns(grid, axis, coef, cfg, h[::-1], z, z, q=qr, march=march, stop=nt - lo):
        t = nt - k
        if lo <= t <= hi:
            out[t - lo] = U
    return out


def _adjoint_states(march, G: np.ndarray, q_levels: np.ndarray | None = None) -> np.ndarray:
    """Adjoint states of the three-level step for J = sum_j G[j] . U^j over L consecutive levels.

    The step  M U^{j+1} = E1_j U^j + E0 U^{j-1} + s_j  (interior rows, with
    E1_j containing -q_j) gives the recurrence
    M^T l^j = G_j + E1_j^T l^{j+1} + E0^T l^{j+2}, and J = sum_j l^{j+1} . s_j.
    ``G`` is (L, n_interior, m); ``q_levels`` (L, N) or None.  Returns l^j for
    j = 0..L-1 (l^0 is computed too, for sources acting on the first level).
    """
    import scipy.sparse as sp

    asm, dt, th = march.asm, march.dt, march.cfg.theta
    I = asm.interior
    march.factor(1.0)
    S = asm.S[I][:, I]
    D = asm.D[I][:, I]
    eye = np.ones(I.size)
    E1T = (sp.diags(2 * eye / dt**2) - (1 - 2 * th) * S).T.tocsr()
    E0T = (sp.diags((-1 / dt**2 + asm.coef.c_t / (2 * dt)) * eye) - th * S + D / (2 * dt)).T.tocsr()
    L = G.shape[0]
    lam = np.zeros(G.shape)
    for j in range(L - 1, -1, -1):
        rhs = G[j].copy()
        if j + 1 < L:
            l1 = lam[j + 1]
            rhs += E1T @ l1
            if q_levels is not None:
                rhs -= q_levels[j][I][:, None] * l1
        if j + 2 < L:
            rhs += E0T @ lam[j + 2]
        lam[j] = march._lu.solve(np.ascontiguousarray(rhs), trans="T")
    return lam


def _flat_q(f: SpaceTimeField | None):
    if f is None:
        return None
    v = f.values.real
    if not np.any(v):
        return None
    return v.reshape(v.shape[0], -1)


def _space_time_inner(A: np.ndarray, B: np.ndarray, wt: np.ndarray, wx: np.ndarray) -> np.ndarray:
    """sum_k wt_k sum_x wx_x A[k,x,c] B[k,x,c] for every column c."""
    return np.einsum("k,x,kxc,kxc->c", wt, wx, A, B)


# ---------------------------------------------------------------------------
# q pipeline


def _line_coords(grid: SpatialGrid, angle: float, offsets: np.ndarray):
    """Transversal coordinate p of every node / boundary node relative to each line."""
    ln = LineSpec(angle, 0.0)
    nm = ln.normal
    X, Y = grid.coords
    p_nodes = nm[0] * (X.ravel() - CENTER[0]) + nm[1] * (Y.ravel() - CENTER[1])
    bp = grid.boundary_points
    p_bnd = nm[0] * (bp[:, 0] - CENTER[0]) + nm[1] * (bp[:, 1] - CENTER[1])
    return p_nodes[:, None] - offsets[None], p_bnd[:, None] - offsets[None]


def _chord_lengths(angle: float, offsets) -> np.ndarray:
    out = []
    for o in offsets:
        ch = LineSpec(angle, float(o)).chord()
        out.append(0.0 if ch is None else max(ch[1] - ch[0], 0.0))
    return np.array(out)


def _q_angle_batch(args):
    """Pairings and calibrations for every offset of one angle and every time center."""
    (n, T, n_t, cfg, q_vals, angle, offsets, t_centers, t_width, eps, rho, calibration, keep_weights) = args
    grid, axis = SpatialGrid(n), TimeAxis(T, n_t)
    q = None if q_vals is None else q_vals
    offsets = np.asarray(offsets, dtype=float)
    lengths = _chord_lengths(angle, offsets)
    active = np.flatnonzero(lengths > 0)
    out = np.zeros((len(t_centers), offsets.size))
    weights = np.zeros((len(t_centers), n * n, offsets.size), dtype=np.float32) if keep_weights else None
    if active.size == 0:
        return out, weights
    if keep_weights and calibration != "probe":
        raise RecoveryError("probe weights are only available with the probe calibration")
    Nn = normal_derivative_matrix(grid)
    om = np.array([math.cos(angle), math.sin(angle)])
    fwd = GaugeShift(rho, tuple(om), FORWARD)
    cf = coefficients_for(fwd)
    mf = _LinearMarch(grid, axis, cf, cfg)
    mu = rho * rho
    _, p_b = _line_coords(grid, angle, offsets[active])
    chi_b = plateau_chi(p_b, eps)
    wx = grid.quadrature_weights.ravel()
    wb = grid.boundary_weights
    interior = mf.asm.interior
    for it, tc in enumerate(t_centers):
        bump = BumpSpec(eps, tc, t_width)
        lo, hi = _window(axis, bump)
        phi = time_bump(axis.t, tc, t_width)
        phit = time_derivative(phi, axis.dt, 1)
        h = phi[:, None, None] * chi_b[None]  # (nt+1, nb, m)
        wt = axis.weights[lo:hi + 1]
        # boundary factor of the backward probe: d_t B - (1 + mu) B on the window
        Bfac = (phit[lo:hi + 1] - (1 + mu) * phi[lo:hi + 1])[:, None, None] * chi_b[None]
        dN = np.zeros((hi - lo + 1, chi_b.shape[0], active.size))

        def acc(sign):
            def f(k, U):
                dN[k - lo] += sign * _neumann_cols(U, grid)
            return f

        _forward_levels(mf, grid, axis, cf, cfg, h, q, lo, hi, keep=False, on_level=acc(1.0))
        U0 = _forward_levels(mf, grid, axis, cf, cfg, h, None, lo, hi, on_level=acc(-1.0))
        pairing = -np.einsum("k,b,kbc,kbc->c", wt, wb, dN, Bfac)
        if calibration == "leading":
            cal = bump.phi_power_integral(2) * bump.chi_power_integral(2) * np.ones(active.size)
        elif calibration == "probe":
            # exact discrete sensitivity of the pairing to q: the extraction of q = 1 is the chord length
            G = -np.einsum("k,kbc->kbc", wt, wb[None, :, None] * Bfac)
            G = np.stack([Nn[:, interior].T @ G[k] for k in range(G.shape[0])])
            lam = _adjoint_states(mf, G)
            Wd = np.zeros((grid.n * grid.n, active.size))
            Wd[interior] = -np.einsum("jxc,jxc->xc", lam[1:], U0[:-1][:, interior])
            cal = Wd.sum(axis=0) / lengths[active]
            if keep_weights:
                W = np.where(wx[:, None] > 0, Wd / wx[:, None], 0.0)
                weights[it][:, active] = (W / cal[None]).astype(np.float32)
        else:
            raise RecoveryError(f"unknown calibration {calibration!r}; expected one of {CALIBRATIONS}")
        if np.any(np.abs(cal) < 1e-12):
            raise RecoveryError("calibration constant below 1e-12 (tube misses the grid?)")
        out[it, active] = pairing / cal
    return out, weights


def _map(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, tasks))


@dataclass(eq=False)
class QExtraction:
    """Extracted sinograms (one per time center) and, optionally, the probe weights behind them.

    ``weights[k][a]`` is an (n*n, n_offsets) array whose column l, integrated
    against a slice f over the square, gives the extraction model's value for line
    (a, l): the data are approximately that weighted transform of q(t_k).
    """

    sinograms: list
    weights: list | None = None

    def model(self, k: int, f: np.ndarray, grid: SpatialGrid) -> np.ndarray:
        """Weighted transform of a slice f under the probe weights of time center k."""
        if self.weights is None:
            raise RecoveryError("probe weights were not kept")
        v = (grid.quadrature_weights * f).ravel()
        return np.stack([v @ W for W in self.weights[k]])


def sinograms_q(s: Scenario, geo: GeometrySet, rho: float, calibration: str = "probe", jobs: int = 1,
                keep_weights: bool = False) -> QExtraction:
    """Extracted (calibrated) line integrals of q for every line and time center."""
    if not geo.angles or not geo.offsets:
        raise RecoveryError("q-mode geometry needs angles and offsets")
    grid, axis = s.grid, s.axis
    for tc in geo.t_centers:
        geo.bump(tc).check_axis(axis)
    q = _flat_q(s.phantom.q)
    tasks = [
        (grid.n, axis.T, axis.n_t, s.cfg, q, a, geo.offsets, geo.t_centers, geo.t_width, geo.eps, float(rho), calibration,
         keep_weights)
        for a in geo.angles
    ]
    results = _map(_q_angle_batch, tasks, jobs)
    rows = np.stack([r[0] for r in results], axis=1)  # (n_t_centers, n_angles, n_offsets)
    k_idx = [int(round(tc / axis.dt)) for tc in geo.t_centers]
    sinos = [Sinogram(np.array(geo.angles), np.array(geo.offsets), rows[i], k_idx[i]) for i in range(len(geo.t_centers))]
    weights = None
    if keep_weights:
        weights = [[r[1][i] for r in results] for i in range(len(geo.t_centers))]
    return QExtraction(sinos, weights)


def extract_line_integral_q(s: Scenario, line: LineSpec, t_k: float, rho: float, eps: float = 0.1, t_width: float = 0.125,
                            calibration: str = "probe") -> float:
    """Calibrated estimate of the line integral of q(t_k, .) along ``line``."""
    if line.chord() is None:
        raise GeometryError("line does not enter the square")
    q = _flat_q(s.phantom.q)
    args = (s.grid.n, s.axis.T, s.axis.n_t, s.cfg, q, line.angle, (line.offset,), (t_k,), t_width, eps, float(rho),
            calibration, False)
    return float(_q_angle_batch(args)[0][0, 0])


def truth_slices(f: SpaceTimeField, t_centers) -> np.ndarray:
    """Ground-truth spatial slices at the time levels nearest to the centers."""
    ax = f.axis
    return np.stack([f.values.real[int(round(t / ax.dt))] for t in t_centers])


def prolongation_1d(n_coarse: int, n_fine: int) -> np.ndarray:
    """Linear interpolation from n_coarse to n_fine equispaced nodes on [0, 1]."""
    xf = np.linspace(0.0, 1.0, n_fine)
    hc = 1.0 / (n_coarse - 1)
    j = np.minimum((xf / hc).astype(int), n_coarse - 2)
    t = xf / hc - j
    P = np.zeros((n_fine, n_coarse))
    P[np.arange(n_fine), j] = 1 - t
    P[np.arange(n_fine), j + 1] = t
    return P


@dataclass
class Inversion:
    image: np.ndarray
    lam: float
    lams: np.ndarray
    quasi_optimality: np.ndarray
    residual: float


def tikhonov_quasi_optimal(A: np.ndarray, d: np.ndarray, grid: SpatialGrid, coarse: int | None = None, lams=None) -> Inversion:
    """Solve A f = d for a nodal slice f, with A acting on nodal values (rows x n*n).

    f is parametrized by bilinear interpolation from a ``coarse`` x ``coarse``
    node lattice (default (n+1)//2); the Tikhonov parameter is the quasi-optimal
    one (smallest change between consecutive parameters on a geometric grid),
    which needs neither a noise level nor ground truth.
    """
    coarse = (grid.n + 1) // 2 if coarse is None else int(coarse)
    lams = np.logspace(-6, 0, 31) if lams is None else np.asarray(lams, dtype=float)
    P1 = prolongation_1d(coarse, grid.n)
    rows = A.shape[0]
    Ac = (A.reshape(rows, grid.n, grid.n) @ P1).transpose(0, 2, 1)  # contract y
    Ac = (Ac @ P1).transpose(0, 2, 1).reshape(rows, -1)  # contract x -> (rows, coarse*coarse)
    U, sv, Vt = np.linalg.svd(Ac, full_matrices=False)
    b = U.T @ d
    keep = sv > sv[0] * 1e-14
    sv, Vt, b = sv[keep], Vt[keep], b[keep]
    coefs = [Vt.T @ (sv * b / (sv**2 + lam**2)) for lam in lams]
    qo = np.array([np.linalg.norm(coefs[i + 1] - coefs[i]) for i in range(len(lams) - 1)])
    i = int(np.argmin(qo))
    img = P1 @ coefs[i].reshape(coarse, coarse) @ P1.T
    res = float(np.linalg.norm(Ac @ coefs[i] - d) / max(np.linalg.norm(d), 1e-300))
    return Inversion(img, float(lams[i]), lams, qo, res)


def weighted_inversion(ext: QExtraction, k: int, grid: SpatialGrid, coarse: int | None = None, lams=None) -> Inversion:
    """Invert the probe-weighted transform sampled by the sinogram of time center k."""
    if ext.weights is None:
        raise RecoveryError("weighted inversion needs the probe weights (keep_weights=True)")
    wx = grid.quadrature_weights.ravel()
    A = np.concatenate([W.T.astype(float) for W in ext.weights[k]], axis=0) * wx[None]
    return tikhonov_quasi_optimal(A, ext.sinograms[k].values.ravel(), grid, coarse, lams)


METHODS = ("weighted", "fbp")


def recover_q(s: Scenario, geo: GeometrySet, rhos, calibration: str = "probe", jobs: int = 1, truth: bool = True,
              min_angles: int = 60, method: str = "weighted", coarse: int | None = None) -> RecoveryReport:
    """Extraction + inversion per time center for every rho in ``rhos``.

    ``method="fbp"`` inverts the extracted sinograms as X-ray data by filtered
    backprojection; ``method="weighted"`` inverts the probe-weighted transform
    those data actually sample (the FBP images are kept in the report as well).
    """
    if method not in METHODS:
        raise RecoveryError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "weighted" and calibration != "probe":
        raise RecoveryError("the weighted inversion requires the probe calibration")
    rhos = tuple(float(r) for r in np.atleast_1d(rhos))
    grid = s.grid
    shape = (len(rhos), len(geo.t_centers), grid.n, grid.n)
    est, fbp = np.zeros(shape), np.zeros(shape)
    sinos, lams = {}, {}
    for i, r in enumerate(rhos):
        ext = sinograms_q(s, geo, r, calibration, jobs, keep_weights=method == "weighted")
        sinos[r] = ext.sinograms
        for k, sino in enumerate(ext.sinograms):
            fbp[i, k] = fbp_invert(sino, grid, min_angles=min_angles)
            if method == "weighted":
                inv = weighted_inversion(ext, k, grid, coarse)
                est[i, k], lams[(r, k)] = inv.image, inv.lam
            else:
                est[i, k] = fbp[i, k]
        del ext
    tr = truth_slices(s.phantom.q, geo.t_centers) if truth else None
    extras = {"weights": grid.quadrature_weights, "sinograms": sinos, "method": method, "lams": lams, "fbp": fbp}
    if tr is not None:
        extras["fbp_errors"] = _errors("q", fbp, tr, grid.quadrature_weights)
    return RecoveryReport("q", rhos, geo.t_centers, est, tr, extras=extras)


def interpolate_slices(slices: np.ndarray, t_centers, axis: TimeAxis, grid: SpatialGrid) -> SpaceTimeField:
    """Piecewise-linear interpolation in time of spatial slices (constant beyond the end centers)."""
    t = axis.t
    tc = np.asarray(t_centers, dtype=float)
    order = np.argsort(tc)
    tc, sl = tc[order], np.asarray(slices)[order]
    out = np.empty((t.size,) + sl.shape[1:])
    for k, tk in enumerate(t):
        j = np.searchsorted(tc, tk)
        if j == 0:
            out[k] = sl[0]
        elif j >= tc.size:
            out[k] = sl[-1]
        else:
            w = (tk - tc[j - 1]) / (tc[j] - tc[j - 1])
            out[k] = (1 - w) * sl[j - 1] + w * sl[j]
    return SpaceTimeField(out, grid, axis)


# ---------------------------------------------------------------------------
# beta pipeline


def _transversal_coord(points: np.ndarray, x0s: np.ndarray, direction) -> np.ndarray:
    """p = omega_perp . (x - x0) for every point (rows) and every x0 (columns)."""
    d = np.asarray(direction, dtype=float)
    tr = np.array([-d[1], d[0]])
    return (points @ tr)[:, None] - (x0s @ tr)[None]


def _time_derivative_matrix(L: int, dt: float) -> np.ndarray:
    return time_derivative(np.eye(L), dt, 1)


def _beta_batch(args):
    """Pairings, calibrations and (optionally) exact sensitivities for points sharing one direction pair."""
    (n, T, n_t, cfg, q_true, q_model, beta, x0s, pair, t_centers, t_width, eps, rho, calibration, keep_weights) = args
    grid, axis = SpatialGrid(n), TimeAxis(T, n_t)
    x0s = np.asarray(x0s, dtype=float)
    w1, w2 = (np.asarray(v, dtype=float) for v in pair)
    vp = -(w1 + w2) / math.sqrt(2.0)
    g1 = GaugeShift(rho, tuple(w1), FORWARD)
    g2 = GaugeShift(rho, tuple(w2), FORWARD)
    gc = combined_gauge(g1, g2)
    mu = gc.rho**2
    c1, c2, cc = (coefficients_for(g) for g in (g1, g2, gc))
    m1, m2, mc = (_LinearMarch(grid, axis, c, cfg) for c in (c1, c2, cc))
    bp = grid.boundary_points
    X, Y = grid.coords
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    chi = {key: plateau_chi(_transversal_coord(bp, x0s, d), eps) for key, d in (("1", w1), ("2", w2), ("0", vp))}
    wx = grid.quadrature_weights.ravel()
    wb = grid.boundary_weights
    interior = mc.asm.interior
    Nn = normal_derivative_matrix(grid)[:, interior]
    N, m = n * n, x0s.shape[0]
    out = np.zeros((len(t_centers), m))
    weights = np.zeros((len(t_centers), N, m), dtype=np.float32) if keep_weights else None
    if keep_weights and calibration != "probe":
        raise RecoveryError("sensitivity weights are only available with the probe calibration")
    for it, tc in enumerate(t_centers):
        bump = BumpSpec(eps, tc, t_width)
        lo, hi = _window(axis, bump)
        lo2, hi2 = max(lo - 2, 0), min(hi + 1, axis.n_t)
        phi = time_bump(axis.t, tc, t_width)
        h1 = phi[:, None, None] * chi["1"][None]
        h2 = phi[:, None, None] * chi["2"][None]
        h0 = phi[:, None, None] * chi["0"][None]

        def product_source(qf):
            """2 (d_t + mu)^2 (U_1 U_2) on levels lo2..hi2, zero on the boundary."""
            U1 = _forward_levels(m1, grid, axis, c1, cfg, h1, qf, lo2, hi2)
            U2 = _forward_levels(m2, grid, axis, c2, cfg, h2, qf, lo2, hi2)
            S = 2.0 * shifted_second_derivative(U1 * U2, mu, axis.dt)
            S[:, ~grid.interior_mask.ravel()] = 0.0
            return S

        wt = axis.weights[lo:hi + 1]
        dN = np.zeros((hi - lo + 1, bp.shape[0], m))
        S_true = None
        if beta is not None:
            S_true = product_source(q_true)
            forcing = np.zeros((axis.n_t + 1, N, m))
            forcing[lo2:hi2 + 1] = S_true * beta[lo2:hi2 + 1, :, None]
            zero_h = np.zeros((axis.n_t + 1, bp.shape[0], m))

            def acc(k, U):
                dN[k - lo] = _neumann_cols(U, grid)

            _forward_levels(mc, grid, axis, cc, cfg, zero_h, q_true, lo, hi, forcing=forcing, keep=False, on_level=acc)
        dNt = time_derivative(dN, axis.dt, 1)
        B_b = h0[lo:hi + 1]
        pairing = -np.einsum("k,b,kbc,kbc->c", wt, wb, dNt + (1 + mu) * dN, B_b)
        if calibration == "leading":
            chi_nodes = [plateau_chi(_transversal_coord(nodes, x0s, d), eps) for d in (w1, w2, vp)]
            tube = np.einsum("x,xc->c", wx, chi_nodes[0] * chi_nodes[1] * chi_nodes[2])
            cal = 2.0 * mu * mu * bump.phi_power_integral(3) * tube
        elif calibration == "probe":
            # exact discrete sensitivity of the pairing to beta (probes built with the model q)
            same = q_model is q_true or (q_model is not None and q_true is not None and np.array_equal(q_model, q_true))
            S_mod = S_true if (same and S_true is not None) else product_source(q_model)
            Yk = wt[:, None, None] * wb[None, :, None] * B_b  # (L_w, nb, m)
            Dt = _time_derivative_matrix(hi - lo + 1, axis.dt)
            Z = np.einsum("kj,kbc->jbc", Dt, Yk) + (1 + mu) * Yk
            L = hi - lo2 + 1
            G = np.zeros((L, interior.size, m))
            for j in range(hi - lo + 1):
                G[lo - lo2 + j] = -(Nn.T @ Z[j])
            ql = None if q_model is None else q_model[lo2:hi + 1]
            lam = _adjoint_states(mc, G, ql)
            Wd = np.zeros((N, m))
            Wd[interior] = np.einsum("jxc,jxc->xc", lam[1:], S_mod[: L - 1][:, interior])
            cal = Wd.sum(axis=0)
            if keep_weights:
                W = np.where(wx[:, None] > 0, Wd / wx[:, None], 0.0)
                weights[it] = (W / cal[None]).astype(np.float32)
        else:
            raise RecoveryError(f"unknown calibration {calibration!r}; expected one of {CALIBRATIONS}")
        if np.any(np.abs(cal) < 1e-12):
            raise RecoveryError("normalization integral below 1e-12 (rays do not overlap)")
        out[it] = pairing / cal
    return out, weights


def _beta_tasks(s, geo, rho, q_model, calibration, keep_weights=False):
    grid, axis = s.grid, s.axis
    q_true = _flat_q(s.phantom.q)
    beta = _flat_q(s.phantom.beta)
    qm = _flat_q(q_model) if q_model is not None else q_true
    groups: dict = {}
    for i, pair in enumerate(geo.pairs):
        if geo.intersection_error(i) > 0.5 * grid.h:
            raise GeometryError(f"ray triple for point {i} misses x0 by more than h/2")
        groups.setdefault(pair, []).append(i)
    tasks, index = [], []
    for pair, idx in groups.items():
        x0s = [geo.points[i] for i in idx]
        tasks.append((grid.n, axis.T, axis.n_t, s.cfg, q_true, qm, beta, x0s, pair, geo.t_centers, geo.t_width, geo.eps,
                      float(rho), calibration, keep_weights))
        index.append(idx)
    return tasks, index


def extract_point_beta(s: Scenario, geo: GeometrySet, i: int, t_k: float, rho: float, q_model: SpaceTimeField | None = None,
                       calibration: str = "probe") -> float:
    """Estimate beta(t_k, x0) for the point with index ``i`` of ``geo``."""
    sub = GeometrySet(points=(geo.points[i],), pairs=(geo.pairs[i],), t_centers=(t_k,), t_width=geo.t_width, eps=geo.eps)
    tasks, _ = _beta_tasks(s, sub, rho, q_model, calibration)
    return float(_beta_batch(tasks[0])[0][0, 0])


def support_lattice(geo: GeometrySet, m: int = 9, lo: float = 0.1, hi: float = 0.9) -> GeometrySet:
    """``geo`` with an extra m x m lattice of extraction points (same direction pair as ``geo.pairs[0]``).

    The weighted beta inversion needs data covering the whole support of the
    probe sensitivities, not only the points where beta is reported.
    """
    pair = geo.pairs[0] if geo.pairs else GeometrySet.beta_lattice(1).pairs[0]
    g = np.linspace(lo, hi, m)
    extra = [(float(x), float(y)) for x in g for y in g]
    have = {tuple(np.round(p, 12)) for p in geo.points}
    extra = [p for p in extra if tuple(np.round(p, 12)) not in have]
    return GeometrySet(points=tuple(geo.points) + tuple(extra), pairs=tuple(geo.pairs) + (pair,) * len(extra),
                       t_centers=geo.t_centers, t_width=geo.t_width, eps=geo.eps)


BETA_METHODS = ("weighted", "pointwise")


def recover_beta(s: Scenario, geo: GeometrySet, rhos, q_model: SpaceTimeField | None = None, calibration: str = "probe",
                 jobs: int = 1, truth: bool = True, method: str = "weighted", support: int = 9,
                 coarse: int | None = None) -> RecoveryReport:
    """Estimates of beta over ``geo.points`` and time centers for each rho.

    ``q_model`` is the potential used to build the probes (e.g. a recovered q);
    it defaults to the scenario's true q.  ``method="pointwise"`` reports the
    normalized pairings directly; ``method="weighted"`` additionally extracts on a
    ``support`` x ``support`` lattice and inverts the known sensitivity-weighted
    map (Tikhonov, quasi-optimal parameter), then samples it at the points.
    The pointwise values are always kept in ``extras["pointwise"]``.
    """
    if method not in BETA_METHODS:
        raise RecoveryError(f"unknown method {method!r}; expected one of {BETA_METHODS}")
    if method == "weighted" and calibration != "probe":
        raise RecoveryError("the weighted beta inversion requires calibration='probe'")
    rhos = tuple(float(r) for r in np.atleast_1d(rhos))
    npts = len(geo.points)
    for tc in geo.t_centers:
        geo.bump(tc).check_axis(s.axis)
    full = support_lattice(geo, support) if (method == "weighted" and npts) else geo
    nall = len(full.points)
    raw = np.zeros((len(rhos), len(geo.t_centers), nall))
    est = np.zeros((len(rhos), len(geo.t_centers), npts))
    lams, maps = {}, {}
    keep = method == "weighted"
    if npts:
        for i, r in enumerate(rhos):
            tasks, index = _beta_tasks(s, full, r, q_model, calibration, keep_weights=keep)
            W = np.zeros((len(geo.t_centers), s.grid.n**2, nall)) if keep else None
            for (vals, w), idx in zip(_map(_beta_batch, tasks, jobs), index):
                raw[i][:, idx] = vals
                if keep:
                    W[:, :, idx] = w
            if not keep:
                est[i] = raw[i][:, :npts]
                continue
            wx = s.grid.quadrature_weights.ravel()
            for k in range(len(geo.t_centers)):
                inv = tikhonov_quasi_optimal(W[k].T * wx[None], raw[i, k], s.grid, coarse)
                lams[(r, k)] = inv.lam
                maps[(r, k)] = inv.image
                est[i, k] = [_bilinear(inv.image, s.grid, p) for p in geo.points]
    tr = None
    if truth and npts:
        b = s.phantom.beta.values.real
        ax, g = s.axis, s.grid
        tr = np.array([[_bilinear(b[int(round(t / ax.dt))], g, p) for p in geo.points] for t in geo.t_centers])
    extras = {"points": geo.points, "method": method, "pointwise": raw[:, :, :npts]}
    if keep:
        extras.update(lams=lams, maps=maps)
    return RecoveryReport("beta", rhos, geo.t_centers, est, tr, extras=extras)


def _bilinear(arr: np.ndarray, grid: SpatialGrid, p) -> float:
    from scipy.ndimage import map_coordinates

    return float(map_coordinates(arr, [[p[0] / grid.h], [p[1] / grid.h]], order=1)[0])
