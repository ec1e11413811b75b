"""Complex geometrical optics probes in the gauge frame.

A forward probe is ``v = exp(rho^2 t - rho omega.x) A`` with
``A = a_0 + a_1/rho + ... + a_N/rho^N``.  Conjugating the operator gives

    P_o = P + rho T_2 + rho^2 T_1 + rho^3 T_omega,
    T_omega = 2 omega.grad,  T_1 = d_t - Lap - 1,  T_2 = 2 (omega.grad + omega.grad d_t),

so the amplitudes solve the transport cascade ``T_omega a_j = -T_1 a_{j-1} - T_2 a_{j-2}
- (P + q) a_{j-3}`` and ``(P_o + q) A = rho^(2-N) F_N`` with

    F_N = T_1 a_N + T_2 a_{N-1} + (P+q) a_{N-2}
          + rho^-1 (T_2 a_N + (P+q) a_{N-1}) + rho^-2 (P+q) a_N.

Backward probes (for the transpose operator, final data at T) are produced by
building the forward probe for the time-reflected problem and reflecting back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .grid import (
    BoundaryTimeTrace,
    GridError,
    SpaceTimeField,
    SpatialGrid,
    TimeAxis,
    gradient_array,
    laplacian_extended,
    time_derivative,
)
from .solver import (
    SolverConfig,
    coefficients_for,
    march_columns,
)
from .symbols import BACKWARD, FORWARD, GaugeShift


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# geometry


def chord(point, direction) -> tuple[float, float] | None:
    """Parameter interval [s0, s1] of the line ``point + s direction`` inside the closed unit square."""
    p = np.asarray(point, dtype=float)
    d = np.asarray(direction, dtype=float)
    lo, hi = -np.inf, np.inf
    for k in range(2):
        if abs(d[k]) < 1e-15:
            if p[k] < -1e-12 or p[k] > 1 + 1e-12:
                return None
            continue
        a, b = (0.0 - p[k]) / d[k], (1.0 - p[k]) / d[k]
        lo, hi = max(lo, min(a, b)), min(hi, max(a, b))
    if hi < lo - 1e-12:
        return None
    return lo, hi


def boundary_normal(point, tol: float = 1e-9) -> np.ndarray:
    """Outward normal at a point of the square's boundary (corners: normalized edge sum)."""
    x, y = point
    nu = np.zeros(2)
    if abs(x) <= tol:
        nu[0] -= 1
    if abs(x - 1) <= tol:
        nu[0] += 1
    if abs(y) <= tol:
        nu[1] -= 1
    if abs(y - 1) <= tol:
        nu[1] += 1
    norm = np.linalg.norm(nu)
    if norm == 0:
        raise GeometryError(f"point {tuple(point)} is not on the boundary")
    return nu / norm


@dataclass(frozen=True)
class RaySpec:
    """Ray ``y0 + s omega`` entering the square at the boundary point ``anchor``."""

    anchor: tuple[float, float]
    direction: tuple[float, float]

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1) > 1e-12:
            raise GeometryError("ray direction must be a unit vector")
        a = np.asarray(self.anchor, dtype=float)
        if float(boundary_normal(a) @ d) >= 0:
            raise GeometryError("ray direction must point into the square at the anchor")
        object.__setattr__(self, "anchor", (float(a[0]), float(a[1])))
        object.__setattr__(self, "direction", (float(d[0]), float(d[1])))

    @property
    def omega(self) -> np.ndarray:
        return np.array(self.direction)

    @property
    def transversal(self) -> np.ndarray:
        return np.array([-self.direction[1], self.direction[0]])

    @property
    def length(self) -> float:
        s0, s1 = chord(self.anchor, self.direction)
        return s1 - s0

    def frame(self, X, Y):
        """Longitudinal and transversal coordinates (s, p) relative to the anchor."""
        dx, dy = X - self.anchor[0], Y - self.anchor[1]
        om, tr = self.omega, self.transversal
        return om[0] * dx + om[1] * dy, tr[0] * dx + tr[1] * dy

    def reversed(self) -> RaySpec:
        """The same line traversed in the opposite direction (anchored at the exit point)."""
        s0, s1 = chord(self.anchor, self.direction)
        exit_pt = np.asarray(self.anchor) + s1 * self.omega
        return RaySpec(tuple(np.clip(exit_pt, 0.0, 1.0)), tuple(-self.omega))

    @classmethod
    def through(cls, point, direction) -> RaySpec:
        """Ray along ``direction`` whose line passes through ``point``."""
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        ch = chord(point, d)
        if ch is None or ch[1] - ch[0] <= 1e-12:
            raise GeometryError(f"line through {tuple(point)} along {tuple(d)} misses the square")
        entry = np.asarray(point, dtype=float) + ch[0] * d
        return cls(tuple(np.clip(entry, 0.0, 1.0)), tuple(d))


# ---------------------------------------------------------------------------
# bumps


def smooth_step(u):
    """C-infinity step: 0 for u <= 0, 1 for u >= 1."""
    u = np.asarray(u, dtype=float)
    f = lambda v: np.where(v > 0, np.exp(-1.0 / np.where(v > 0, v, 1.0)), 0.0)  # noqa: E731
    a, b = f(u), f(1.0 - u)
    return a / (a + b)


def plateau_chi(s, eps: float):
    """Transversal cutoff: 1 on |s| <= eps/2, 0 for |s| >= eps, smooth in between."""
    return smooth_step((eps - np.abs(s)) / (0.5 * eps))


def time_bump(t, center: float, width: float):
    """exp(1 - 1/(1 - ((t - center)/width)^2)) inside the window, 0 outside; equals 1 at the center."""
    z = (np.asarray(t, dtype=float) - center) / width
    inside = np.abs(z) < 1
    zz = np.where(inside, z, 0.0)
    return np.where(inside, np.exp(1.0 - 1.0 / (1.0 - zz * zz)), 0.0)


@dataclass(frozen=True)
class BumpSpec:
    eps: float = 0.25
    t_center: float = 0.5
    t_width: float = 0.125

    def __post_init__(self):
        if not 0 < self.eps <= 0.25:
            raise GeometryError(f"tube half-width must lie in (0, 1/4], got {self.eps}")
        if not self.t_width > 0:
            raise GeometryError("time bump width must be positive")

    def check_axis(self, axis: TimeAxis) -> None:
        if self.t_center - self.t_width <= 0 or self.t_center + self.t_width >= axis.T:
            raise GeometryError(f"time bump [{self.t_center - self.t_width}, {self.t_center + self.t_width}] not inside (0, T)")

    def chi(self, s):
        return plateau_chi(s, self.eps)

    def phi(self, t):
        return time_bump(t, self.t_center, self.t_width)

    def reflected(self, T: float) -> BumpSpec:
        return BumpSpec(self.eps, T - self.t_center, self.t_width)

    def time_mask(self, t, pad: float = 0.0):
        return np.abs(np.asarray(t) - self.t_center) < self.t_width + pad * (1 + 1e-9)

    def phi_power_integral(self, k: int, n: int = 4001) -> float:
        """int phi^k dt by dense trapezoid (phi is flat at the ends, so this converges very fast)."""
        t = np.linspace(self.t_center - self.t_width, self.t_center + self.t_width, n)
        return float(np.trapezoid(self.phi(t) ** k, t))

    def chi_power_integral(self, k: int, n: int = 4001) -> float:
        s = np.linspace(-self.eps, self.eps, n)
        return float(np.trapezoid(self.chi(s) ** k, s))


def _tube_mask(ray: RaySpec, bump: BumpSpec, grid: SpatialGrid, pad: float = 0.0) -> np.ndarray:
    _, p = ray.frame(*grid.coords)
    return np.abs(p) < bump.eps + pad * (1 + 1e-9)


def amplitude_a0(ray: RaySpec, bump: BumpSpec, axis: TimeAxis, grid: SpatialGrid) -> SpaceTimeField:
    """phi(t) chi(omega_perp.(x - y0)), exactly constant along the ray direction."""
    bump.check_axis(axis)
    s, p = ray.frame(*grid.coords)
    if chord(ray.anchor, ray.direction) is None:
        raise GeometryError("tube misses the domain")
    chi = bump.chi(p)
    if not np.any(chi > 0):
        raise GeometryError("tube contains no grid node")
    vals = bump.phi(axis.t)[:, None, None] * chi[None]
    return SpaceTimeField(vals, grid, axis)


# ---------------------------------------------------------------------------
# transport


def line_integration_matrix(ray: RaySpec, grid: SpatialGrid, mask: np.ndarray | None = None) -> sp.csr_matrix:
    """Sparse K with (K f)(x) = int_0^{s(x)} f(y(x) + s' omega) ds' for nodes x in ``mask``.

    y(x) is the foot of x on the hyperplane through the anchor orthogonal to omega.
    Composite trapezoid at spacing <= h/2, bilinear interpolation, zero extension
    outside the square.
    """
    n, h = grid.n, grid.h
    X, Y = grid.coords
    s, p = ray.frame(X, Y)
    if mask is None:
        mask = np.ones_like(X, dtype=bool)
    nodes = np.flatnonzero(mask.ravel())
    s_n = s.ravel()[nodes]
    p_n = p.ravel()[nodes]
    M = np.maximum(np.ceil(np.abs(s_n) / (0.5 * h)).astype(int), 1)
    counts = M + 1
    row = np.repeat(nodes, counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    m = np.arange(counts.sum()) - start
    Mr = np.repeat(M, counts)
    ds = np.repeat(s_n / M, counts)
    sp_ = ds * m
    w = ds * np.where((m == 0) | (m == Mr), 0.5, 1.0)
    om, tr = ray.omega, ray.transversal
    px = ray.anchor[0] + np.repeat(p_n, counts) * tr[0] + sp_ * om[0]
    py = ray.anchor[1] + np.repeat(p_n, counts) * tr[1] + sp_ * om[1]
    inside = (px >= -1e-12) & (px <= 1 + 1e-12) & (py >= -1e-12) & (py <= 1 + 1e-12)
    row, px, py, w = row[inside], px[inside], py[inside], w[inside]
    fx = np.clip(px / h, 0, n - 1)
    fy = np.clip(py / h, 0, n - 1)
    i0 = np.minimum(np.floor(fx).astype(int), n - 2)
    j0 = np.minimum(np.floor(fy).astype(int), n - 2)
    tx, ty = fx - i0, fy - j0
    rows, cols, vals = [], [], []
    for di, dj, wt in ((0, 0, (1 - tx) * (1 - ty)), (1, 0, tx * (1 - ty)), (0, 1, (1 - tx) * ty), (1, 1, tx * ty)):
        rows.append(row)
        cols.append((i0 + di) * n + (j0 + dj))
        vals.append(w * wt)
    K = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n)
    )
    return K.tocsr()


@dataclass(eq=False)
class ProbeContext:
    """Everything the transport cascade needs: geometry, bump, medium and discretization."""

    ray: RaySpec
    bump: BumpSpec
    q: SpaceTimeField
    _K: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def grid(self) -> SpatialGrid:
        return self.q.grid

    @property
    def axis(self) -> TimeAxis:
        return self.q.axis

    @property
    def support(self) -> np.ndarray:
        """Boolean (n_t+1, n, n) mask of the tube x time-bump support, dilated by one stencil width.

        Derivatives of a_0 reach one node beyond |p| < eps (and one level beyond the
        time window); the dilation keeps those values so that the closed-form
        residual stays consistent with the discrete operator.
        """
        tube = _tube_mask(self.ray, self.bump, self.grid, pad=self.grid.h)
        tmask = self.bump.time_mask(self.axis.t, pad=self.axis.dt)
        return tmask[:, None, None] & tube[None]

    @property
    def K(self) -> sp.csr_matrix:
        if self._K is None:
            self._K = line_integration_matrix(self.ray, self.grid, _tube_mask(self.ray, self.bump, self.grid, pad=self.grid.h))
        return self._K


def op_T1(a: np.ndarray, grid: SpatialGrid, axis: TimeAxis) -> np.ndarray:
    return time_derivative(a, axis.dt, 1) - laplacian_extended(a, grid.h) - a


def op_T2(a: np.ndarray, omega, grid: SpatialGrid, axis: TimeAxis) -> np.ndarray:
    gx, gy = gradient_array(a + time_derivative(a, axis.dt, 1), grid.h)
    return 2 * (omega[0] * gx + omega[1] * gy)


def op_Pq(a: np.ndarray, q: np.ndarray, grid: SpatialGrid, axis: TimeAxis) -> np.ndarray:
    at = time_derivative(a, axis.dt, 1)
    return time_derivative(a, axis.dt, 2) - laplacian_extended(a + at, grid.h) + q * a


def op_Tomega(a: np.ndarray, omega, grid: SpatialGrid) -> np.ndarray:
    gx, gy = gradient_array(a, grid.h)
    return 2 * (omega[0] * gx + omega[1] * gy)


def _cascade_rhs(j: int, chain: list[np.ndarray], ctx: ProbeContext) -> np.ndarray:
    g, ax, om = ctx.grid, ctx.axis, ctx.ray.omega
    rhs = op_T1(chain[j - 1], g, ax)
    if j >= 2:
        rhs = rhs + op_T2(chain[j - 2], om, g, ax)
    if j >= 3:
        rhs = rhs + op_Pq(chain[j - 3], ctx.q.values.real, g, ax)
    return rhs


def transport_step(j: int, chain: list, ctx: ProbeContext) -> SpaceTimeField:
    """a_j = -1/2 int_Sigma^x (T_1 a_{j-1} + T_2 a_{j-2} + (P+q) a_{j-3}) along the ray."""
    if j < 1:
        raise ValueError("transport steps start at j = 1")
    arrs = [c.values if isinstance(c, SpaceTimeField) else np.asarray(c) for c in chain]
    if len(arrs) < j:
        raise ValueError(f"transport step {j} needs a_0..a_{j - 1}")
    rhs = _cascade_rhs(j, arrs, ctx) * ctx.support
    nt1 = ctx.axis.n_t + 1
    N = ctx.grid.n ** 2
    active = np.flatnonzero(np.any(rhs != 0, axis=(1, 2)))
    out = np.zeros((nt1, N), dtype=complex)
    if active.size:
        flat = rhs.reshape(nt1, N)[active].T
        out[active] = (-0.5 * (ctx.K @ flat)).T
    vals = out.reshape(rhs.shape) * ctx.support
    return SpaceTimeField(vals, ctx.grid, ctx.axis)


def residual_FN(amps: list[np.ndarray], rho: float, ctx: ProbeContext) -> np.ndarray:
    N = len(amps) - 1
    g, ax, om = ctx.grid, ctx.axis, ctx.ray.omega
    q = ctx.q.values.real
    get = lambda k: amps[k] if k >= 0 else None  # noqa: E731
    F = op_T1(amps[N], g, ax) + op_T2(amps[N], om, g, ax) / rho + op_Pq(amps[N], q, g, ax) / rho**2
    if get(N - 1) is not None:
        F = F + op_T2(amps[N - 1], om, g, ax) + op_Pq(amps[N - 1], q, g, ax) / rho
    if get(N - 2) is not None:
        F = F + op_Pq(amps[N - 2], q, g, ax)
    return F * ctx.support


def apply_gauged_operator(A: np.ndarray, q: np.ndarray, gauge: GaugeShift, grid: SpatialGrid, axis: TimeAxis) -> np.ndarray:
    """(P_o + q) A with the forward-gauge coefficients, second-order stencils everywhere."""
    c = coefficients_for(gauge)
    h, dt = grid.h, axis.dt
    At = time_derivative(A, dt, 1)
    Att = time_derivative(A, dt, 2)
    gx, gy = gradient_array(A, h)
    gtx, gty = gradient_array(At, h)
    return (
        Att + c.c_t * At - c.alpha * laplacian_extended(A, h) - c.gamma * laplacian_extended(At, h)
        + c.b[0] * gx + c.b[1] * gy + c.e[0] * gtx + c.e[1] * gty + c.kappa * A + q * A
    )


# ---------------------------------------------------------------------------
# probes


@dataclass(frozen=True, eq=False)
class CgoProbe:
    sense: str
    rho: float
    ray: RaySpec
    order: int
    bump: BumpSpec
    amplitudes: tuple
    gauged_total: SpaceTimeField
    residual: SpaceTimeField
    residual_norm: float
    consistency: float

    @property
    def gauge(self) -> GaugeShift:
        return GaugeShift(self.rho, self.ray.direction, self.sense)

    @property
    def boundary_trace(self) -> BoundaryTimeTrace:
        return BoundaryTimeTrace.of(self.gauged_total)

    def manifest(self) -> dict:
        return {
            "sense": self.sense,
            "rho": self.rho,
            "ray": {"anchor": list(self.ray.anchor), "direction": list(self.ray.direction)},
            "bump": {"eps": self.bump.eps, "t_center": self.bump.t_center, "t_width": self.bump.t_width},
            "N": self.order,
            "amplitude_l2": [a.l2_norm() for a in self.amplitudes],
            "residual_l2": self.residual_norm,
            "consistency_l2": self.consistency,
        }


def _assemble_forward(rho, ray, N, bump, q) -> tuple:
    grid, axis = q.grid, q.axis
    ctx = ProbeContext(ray, bump, q)
    a0 = amplitude_a0(ray, bump, axis, grid)
    amps = [a0.values]
    for j in range(1, N + 1):
        amps.append(transport_step(j, amps, ctx).values)
    A = sum(a / rho**j for j, a in enumerate(amps))
    F = residual_FN(amps, rho, ctx)
    gauge = GaugeShift(rho, ray.direction, FORWARD)
    lhs = apply_gauged_operator(A, q.values.real, gauge, grid, axis)
    diag = lhs - rho ** (2 - N) * F
    # compare on interior nodes away from the first/last time level (one-sided stencils there)
    core = diag[1:-1, 1:-1, 1:-1]
    consistency = float(np.sqrt(np.sum(np.abs(core) ** 2) * grid.h**2 * axis.dt))
    return amps, A, F, consistency


def assemble_probe(sense: str, rho: float, ray: RaySpec, N: int, bump: BumpSpec, q: SpaceTimeField) -> CgoProbe:
    """Build a_0..a_N, the gauged total A and the residual F_N.

    ``ray.direction`` is the probe's own direction (omega forward, varpi backward);
    the residual diagnostic measures the discrete (P_o+q)A - rho^(2-N) F_N.
    """
    if not 0 <= N <= 2:
        raise ValueError("probe order N must be 0, 1 or 2")
    if sense not in (FORWARD, BACKWARD):
        raise ValueError(f"unknown sense {sense!r}")
    axis = q.axis
    if sense == FORWARD:
        amps, A, F, cons = _assemble_forward(rho, ray, N, bump, q)
    else:
        amps, A, F, cons = _assemble_forward(rho, ray, N, bump.reflected(axis.T), q.reflect_time())
        amps = [a[::-1] for a in amps]
        A, F = A[::-1], F[::-1]
    grid = q.grid
    fields = tuple(SpaceTimeField(a, grid, axis) for a in amps)
    Ff = SpaceTimeField(F, grid, axis)
    return CgoProbe(sense, float(rho), ray, N, bump, fields, SpaceTimeField(A, grid, axis), Ff, Ff.l2_norm(), cons)


@dataclass(frozen=True, eq=False)
class RemainderRecord:
    r: SpaceTimeField
    l2_norm: float


def remainder_measure(probe: CgoProbe, q: SpaceTimeField, cfg: SolverConfig = SolverConfig(), source: str = "closed_form") -> RemainderRecord:
    """Solve (P_o + q) r = -rho^(2-N) F_N with zero initial and Dirichlet data (final data when backward).

    ``source="discrete"`` replaces the closed-form right side by the discrete
    residual -(P_o + q)_h A, so that A + r is the exact discrete solution with
    boundary data A.
    """
    grid, axis = q.grid, q.axis
    rho, N = probe.rho, probe.order
    F = probe.residual.values
    qv = q.values.real
    A = probe.gauged_total.values
    if probe.sense == BACKWARD:
        F, qv, A = F[::-1], qv[::-1], A[::-1]
    gauge = GaugeShift(rho, probe.ray.direction, FORWARD)
    if source == "closed_form":
        rhs = -(rho ** (2 - N)) * F
    elif source == "discrete":
        rhs = -_discrete_residual(A, qv, gauge, grid, axis)
    else:
        raise ValueError(f"unknown source {source!r}")
    coef = coefficients_for(gauge)
    Nn = grid.n * grid.n
    nb = len(grid.boundary_nodes)
    out = np.zeros((axis.n_t + 1, Nn), dtype=complex)
    for k, U in march_columns(
        grid, axis, coef, cfg,
        np.zeros((axis.n_t + 1, nb, 1)), np.zeros((Nn, 1)), np.zeros((Nn, 1)),
        q=qv.reshape(axis.n_t + 1, Nn) if np.any(qv) else None,
        forcing=rhs.reshape(axis.n_t + 1, Nn, 1),
    ):
        out[k] = U[:, 0]
    r = out.reshape(axis.n_t + 1, grid.n, grid.n)
    if probe.sense == BACKWARD:
        r = r[::-1]
    rf = SpaceTimeField(r, grid, axis)
    return RemainderRecord(rf, rf.l2_norm())


def _discrete_residual(A, q, gauge, grid, axis):
    """The scheme's own residual for A at interior nodes, levels 1..n_t-1 (the levels the march uses)."""
    c = coefficients_for(gauge)
    from .solver import _Assembly  # local: assembly is an implementation detail of the solver

    asm = _Assembly(grid, c)
    dt = axis.dt
    nt1 = axis.n_t + 1
    Nn = grid.n**2
    Af = A.reshape(nt1, Nn)
    res = np.zeros_like(Af)
    th = 0.25
    for n in range(1, nt1 - 1):
        Up, U, Um = Af[n + 1], Af[n], Af[n - 1]
        res[n] = (
            (Up - 2 * U + Um) / dt**2 + c.c_t * (Up - Um) / (2 * dt)
            + asm.S @ (th * Up + (1 - 2 * th) * U + th * Um) + asm.D @ (Up - Um) / (2 * dt) + q.reshape(nt1, Nn)[n] * U
        )
    res = res.reshape(A.shape)
    res[:, ~grid.interior_mask] = 0
    return res


def remainder_slope(rhos, norms) -> float:
    """Least-squares slope of log(norm) against log(rho)."""
    x = np.log(np.asarray(rhos, dtype=float))
    y = np.log(np.asarray(norms, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def reference_ray(angle: float = math.pi / 6) -> RaySpec:
    """A ray through the square's center at the given angle (used by examples and CLI defaults)."""
    return RaySpec.through((0.5, 0.5), (math.cos(angle), math.sin(angle)))
