"""Implicit three-level solver for the strongly damped wave operator.

The linear operator is ``d_t^2 - Lap - d_t Lap + q``; the nonlinear problem adds
``- beta d_t^2(u^2)``.  Time discretization (for the general constant-coefficient
form ``a U_tt + c_t U_t + S U + D U_t + q U = f``)::

    a (U+ - 2U + U-)/dt^2 + (c_t + D)(U+ - U-)/(2 dt)
        + S (theta U+ + (1 - 2 theta) U + theta U-) + q U = f      (at level n)

where ``S = -alpha Lap + b.grad + kappa`` and ``D = -gamma Lap + e.grad``.  With no
gauge, ``alpha = gamma = 1`` and all other coefficients vanish.  A gauge shift
``U = exp(-mu t + k.x) u`` with ``mu = rho^2``, ``k = rho omega`` produces the
conjugated coefficients computed in :func:`gauge_coefficients`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import BoundaryTimeTrace, GridError, SpaceTimeField, SpatialGrid, TimeAxis, laplacian_array
from .symbols import BACKWARD, FORWARD, GaugeShift

log = logging.getLogger(__name__)

FORWARD_DIRECTION = "forward"
BACKWARD_DIRECTION = "backward-final-data"


class SolverError(RuntimeError):
    pass


class NonconvergenceError(SolverError):
    def __init__(self, step, residual):
        super().__init__(f"Picard iteration did not converge at step {step} (last relative update {residual:.3e})")
        self.step = step
        self.residual = residual


class CompatibilityError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    theta: float = 0.25
    picard_tol: float = 1e-10
    picard_max: int = 25
    refactor_tol: float = 1e-12

    def __post_init__(self):
        if not 0.0 <= self.theta <= 0.5:
            raise ValueError(f"theta must lie in [0, 1/2], got {self.theta}")
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")
        if self.picard_max < 1:
            raise ValueError("picard_max must be at least 1")


@dataclass(frozen=True)
class OperatorCoefficients:
    """Constant coefficients of ``U_tt + c_t U_t - alpha Lap U - gamma Lap U_t + b.grad U + e.grad U_t + kappa U``."""

    c_t: float = 0.0
    alpha: float = 1.0
    gamma: float = 1.0
    b: tuple[float, float] = (0.0, 0.0)
    e: tuple[float, float] = (0.0, 0.0)
    kappa: float = 0.0


def gauge_coefficients(mu: float, k) -> OperatorCoefficients:
    """Coefficients of ``exp(-mu t + k.x) P exp(mu t - k.x)``."""
    kx, ky = float(k[0]), float(k[1])
    k2 = kx * kx + ky * ky
    return OperatorCoefficients(
        c_t=2 * mu - k2,
        alpha=1 + mu,
        gamma=1.0,
        b=(2 * (1 + mu) * kx, 2 * (1 + mu) * ky),
        e=(2 * kx, 2 * ky),
        kappa=mu * mu - k2 - mu * k2,
    )


def coefficients_for(gauge: GaugeShift | None) -> OperatorCoefficients:
    """Coefficients used for the forward-time march (backward gauges are reflected first)."""
    if gauge is None:
        return OperatorCoefficients()
    return gauge_coefficients(gauge.rho**2, gauge.rho * gauge.omega)


@dataclass(frozen=True, eq=False)
class LinearProblemSpec:
    """Linear problem data.

    For ``direction == "backward-final-data"`` the pair (g0, g1) is read as
    (w(T), d_t w(T)) and the operator is the transpose ``d_t^2 - Lap + d_t Lap + q``.
    With a gauge, the unknown is the gauged field and every datum (forcing,
    Dirichlet trace, initial/final data) is given in the gauge frame.
    """

    q: SpaceTimeField
    dirichlet: BoundaryTimeTrace
    g0: np.ndarray
    g1: np.ndarray
    forcing: SpaceTimeField | None = None
    direction: str = FORWARD_DIRECTION
    gauge: GaugeShift | None = None
    compat_tol: float = 1e-10

    def __post_init__(self):
        if self.direction not in (FORWARD_DIRECTION, BACKWARD_DIRECTION):
            raise ValueError(f"unknown direction {self.direction!r}")
        grid = self.q.grid
        g0 = np.asarray(self.g0, dtype=complex)
        g1 = np.asarray(self.g1, dtype=complex)
        if g0.shape != (grid.n, grid.n) or g1.shape != (grid.n, grid.n):
            raise GridError("initial data must be single grid slices")
        object.__setattr__(self, "g0", g0)
        object.__setattr__(self, "g1", g1)
        if np.max(np.abs(self.q.values.imag)) > 0:
            raise GridError("q must be real")
        k0 = -1 if self.direction == BACKWARD_DIRECTION else 0
        mismatch = np.max(np.abs(self.dirichlet.values[k0] - grid.boundary_values(g0)), initial=0.0)
        if mismatch > self.compat_tol:
            raise CompatibilityError(f"Dirichlet data disagrees with initial data on the boundary by {mismatch:.3e}")
        if self.gauge is not None:
            want = FORWARD if self.direction == FORWARD_DIRECTION else BACKWARD
            if self.gauge.sense != want:
                raise ValueError(f"{self.direction} problem needs a {want} gauge, got {self.gauge.sense}")

    @property
    def grid(self) -> SpatialGrid:
        return self.q.grid

    @property
    def axis(self) -> TimeAxis:
        return self.q.axis


@dataclass(frozen=True, eq=False)
class NonlinearProblemSpec:
    linear: LinearProblemSpec
    beta: SpaceTimeField

    def __post_init__(self):
        if self.linear.gauge is not None:
            raise ValueError("the nonlinear problem is solved in the physical frame only")
        if self.linear.direction != FORWARD_DIRECTION:
            raise ValueError("the nonlinear problem is forward in time")
        if np.max(np.abs(self.beta.values.imag)) > 0:
            raise GridError("beta must be real")


@dataclass
class SolveReport:
    """Per-step record: Picard iteration counts and final relative updates."""

    picard_iters: list[int] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)
    factorizations: int = 0

    def rows(self):
        return [(k + 1, it, r) for k, (it, r) in enumerate(zip(self.picard_iters, self.residuals))]


# ---------------------------------------------------------------------------
# sparse assembly


def _d2_1d(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, -2.0)
    off = np.ones(n - 1)
    D = sp.diags([off, main, off], [-1, 0, 1], format="lil")
    D[0, :] = 0
    D[n - 1, :] = 0
    return (D / (h * h)).tocsr()


def _d1_1d(n: int, h: float) -> sp.csr_matrix:
    off = np.full(n - 1, 0.5 / h)
    D = sp.diags([-off, off], [-1, 1], format="lil")
    D[0, :] = 0
    D[n - 1, :] = 0
    return D.tocsr()


class _Assembly:
    """Full-grid sparse operators (rows valid at interior nodes only)."""

    def __init__(self, grid: SpatialGrid, coef: OperatorCoefficients):
        n, h = grid.n, grid.h
        eye = sp.identity(n, format="csr")
        lap = sp.kron(_d2_1d(n, h), eye) + sp.kron(eye, _d2_1d(n, h))
        gx = sp.kron(_d1_1d(n, h), eye)
        gy = sp.kron(eye, _d1_1d(n, h))
        N = n * n
        self.S = (-coef.alpha * lap + coef.b[0] * gx + coef.b[1] * gy + coef.kappa * sp.identity(N)).tocsr()
        self.D = (-coef.gamma * lap + coef.e[0] * gx + coef.e[1] * gy).tocsr()
        self.coef = coef
        flat_b = grid.boundary_mask.ravel()
        self.interior = np.flatnonzero(~flat_b)
        bn = grid.boundary_nodes
        self.boundary = bn[:, 0] * n + bn[:, 1]
        self.N = N


class _LinearMarch:
    """Forward-time three-level march over flattened, column-batched states."""

    def __init__(self, grid, axis, coef: OperatorCoefficients, cfg: SolverConfig):
        self.grid, self.axis, self.cfg = grid, axis, cfg
        self.asm = _Assembly(grid, coef)
        self.dt = axis.dt
        self._lu = None
        self._lu_a = None
        self.factorizations = 0
        if cfg.theta < 0.25:
            stability_check(grid, axis, coef, cfg.theta)

    def step_matrix(self, a: np.ndarray | float) -> sp.csc_matrix:
        asm, dt, th = self.asm, self.dt, self.cfg.theta
        diag = np.broadcast_to(np.asarray(a, dtype=float) / dt**2 + asm.coef.c_t / (2 * dt), (asm.N,))
        return (sp.diags(diag) + th * asm.S + asm.D / (2 * dt)).tocsr()

    def factor(self, a):
        a_arr = np.broadcast_to(np.asarray(a, dtype=float), (self.asm.N,))
        if self._lu is not None and np.max(np.abs(a_arr - self._lu_a)) <= self.cfg.refactor_tol:
            return
        M = self.step_matrix(a_arr)
        I, B = self.asm.interior, self.asm.boundary
        Mi = M[I][:, I].tocsc()
        self._Mb = M[I][:, B].tocsr()
        try:
            self._lu = splu(Mi)
        except RuntimeError as exc:
            raise SolverError(f"singular step matrix: {exc}") from exc
        self._lu_a = a_arr.copy()
        self.factorizations += 1

    def solve_interior(self, rhs):
        if np.iscomplexobj(rhs):
            m = rhs.shape[1]
            sol = self._lu.solve(np.ascontiguousarray(np.hstack([rhs.real, rhs.imag])))
            return sol[:, :m] + 1j * sol[:, m:]
        return self._lu.solve(np.ascontiguousarray(rhs))

    def explicit_part(self, a, Un, Um, fn, qn):
        """Right-hand side of the step equation before boundary elimination."""
        asm, dt, th = self.asm, self.dt, self.cfg.theta
        a = np.asarray(a, dtype=float).reshape(-1, 1) if np.ndim(a) else a
        rhs = a * (2 * Un - Um) / dt**2 + asm.coef.c_t * Um / (2 * dt)
        rhs = rhs - asm.S @ ((1 - 2 * th) * Un + th * Um) + asm.D @ Um / (2 * dt)
        if qn is not None:
            rhs = rhs - qn.reshape(-1, 1) * Un
        if fn is not None:
            rhs = rhs + fn
        return rhs

    def advance(self, a, Un, Um, fn, qn, g_next, extra=None):
        I, B = self.asm.interior, self.asm.boundary
        rhs = self.explicit_part(a, Un, Um, fn, qn)
        if extra is not None:
            rhs = rhs + extra
        rI = rhs[I] - self._Mb @ g_next
        out = np.zeros_like(rhs)
        out[I] = self.solve_interior(rI)
        out[B] = g_next
        return out

    def second_derivative(self, a, U0, U1, f0, q0):
        """U_tt(0) from the equation (interior rows)."""
        asm = self.asm
        r = -asm.coef.c_t * U1 - asm.S @ U0 - asm.D @ U1
        if q0 is not None:
            r = r - q0.reshape(-1, 1) * U0
        if f0 is not None:
            r = r + f0
        a = np.asarray(a, dtype=float).reshape(-1, 1) if np.ndim(a) else a
        return r / a


def stability_check(grid, axis, coef: OperatorCoefficients, theta: float, n_modes: int = 64) -> None:
    """Coarse von Neumann check of the three-level scheme over the discrete Laplacian spectrum."""
    h, dt = grid.h, axis.dt
    lam = np.linspace(0.0, 8.0 / h**2, n_modes)
    worst = 0.0
    for lm in lam:
        s = coef.alpha * lm + coef.kappa
        d = coef.gamma * lm + coef.c_t
        # (z-1)^2/dt^2 + d (z^2-1)/(2dt) + s (theta z^2 + (1-2theta) z + theta) = 0
        c2 = 1 / dt**2 + d / (2 * dt) + s * theta
        c1 = -2 / dt**2 + s * (1 - 2 * theta)
        c0 = 1 / dt**2 - d / (2 * dt) + s * theta
        worst = max(worst, float(np.max(np.abs(np.roots([c2, c1, c0])))))
    if worst > 1 + 1e-9:
        raise SolverError(f"time step rejected: amplification factor {worst:.6f} > 1 for theta={theta}")


# ---------------------------------------------------------------------------
# driver


def _first_active_level(forcing: np.ndarray | None, dirichlet: np.ndarray, g0, g1) -> int:
    if np.any(g0) or np.any(g1):
        return 0
    active = np.any(dirichlet != 0, axis=tuple(range(1, dirichlet.ndim)))
    if forcing is not None:
        active = active | np.any(forcing != 0, axis=tuple(range(1, forcing.ndim)))
    hits = np.flatnonzero(active)
    return int(hits[0]) if hits.size else len(active)


def march_columns(
    grid: SpatialGrid,
    axis: TimeAxis,
    coef: OperatorCoefficients,
    cfg: SolverConfig,
    dirichlet: np.ndarray,
    g0: np.ndarray,
    g1: np.ndarray,
    q: np.ndarray | None = None,
    forcing: np.ndarray | None = None,
    march: _LinearMarch | None = None,
    stop: int | None = None,
):
    """Yield ``(k, U_k)`` for k = 0..stop (default n_t) with U_k of shape (n*n, m).

    ``dirichlet`` has shape (n_t+1, n_boundary, m); ``g0``, ``g1`` (n*n, m); ``q``
    (n_t+1, n*n) or None; ``forcing`` (n_t+1, n*n, m) or None.  Leading levels on
    which all data vanish are skipped (their solution is exactly zero).
    """
    march = march or _LinearMarch(grid, axis, coef, cfg)
    march.factor(1.0)
    asm = march.asm
    dt = axis.dt
    nt = axis.n_t if stop is None else min(int(stop), axis.n_t)
    m = dirichlet.shape[-1]
    dtype = np.result_type(dirichlet, g0, g1, forcing if forcing is not None else np.float64)
    k0 = _first_active_level(forcing, dirichlet, g0, g1)
    zero = np.zeros((asm.N, m), dtype=dtype)
    qk = (lambda k: None) if q is None else (lambda k: q[k])
    fk = (lambda k: None) if forcing is None else (lambda k: forcing[k])
    if k0 >= 2:
        for k in range(min(k0 - 1, nt + 1)):
            yield k, zero
        if k0 - 1 > nt:
            return
        Um, Un, n = zero, zero.copy(), k0 - 1
    else:
        U0 = np.array(g0, dtype=dtype)
        U0[asm.boundary] = dirichlet[0]
        g2 = march.second_derivative(1.0, U0, g1, fk(0), qk(0))
        U1 = U0 + dt * g1 + 0.5 * dt**2 * g2
        U1[asm.boundary] = dirichlet[1]
        yield 0, U0
        Um, Un, n = U0, U1, 1
    yield n, Un
    while n < nt:
        Up = march.advance(1.0, Un, Um, fk(n), qk(n), dirichlet[n + 1])
        Um, Un, n = Un, Up, n + 1
        yield n, Un


def _flat(arr: np.ndarray) -> np.ndarray:
    """(n_t+1, n, n) -> (n_t+1, n*n, 1)."""
    return arr.reshape(arr.shape[0], -1, 1)


def _reflected(p: LinearProblemSpec):
    """Data of the forward-time problem equivalent to ``p`` (identity for forward problems)."""
    q = p.q.values.real
    f = None if p.forcing is None else p.forcing.values
    h = p.dirichlet.values
    g0, g1 = p.g0, p.g1
    if p.direction == BACKWARD_DIRECTION:
        q, h, g1 = q[::-1], h[::-1], -g1
        f = None if f is None else f[::-1]
    return q, f, h, g0, g1


def solve_linear(p: LinearProblemSpec, cfg: SolverConfig = SolverConfig()) -> SpaceTimeField:
    grid, axis = p.grid, p.axis
    q, f, h, g0, g1 = _reflected(p)
    coef = coefficients_for(p.gauge)
    N = grid.n * grid.n
    out = np.empty((axis.n_t + 1, N), dtype=complex)
    if not np.any(q):
        q = None
    else:
        q = q.reshape(axis.n_t + 1, N)
    for k, U in march_columns(
        grid, axis, coef, cfg, h[..., None], g0.reshape(N, 1), g1.reshape(N, 1),
        q=q, forcing=None if f is None else _flat(f),
    ):
        out[k] = U[:, 0]
    out = out.reshape(axis.n_t + 1, grid.n, grid.n)
    if p.direction == BACKWARD_DIRECTION:
        out = out[::-1]
    return SpaceTimeField(out, grid, axis)


def solve_nonlinear(p: NonlinearProblemSpec, cfg: SolverConfig = SolverConfig()):
    """Picard iteration per time step; returns ``(field, SolveReport)``.

    The coefficient ``a = 1 - 2 beta u`` is frozen at the known level n; the
    quadratic source ``2 beta (d_t u)^2`` is iterated with the centered
    derivative through the unknown level n+1.
    """
    lp = p.linear
    grid, axis = lp.grid, lp.axis
    N = grid.n * grid.n
    dt, nt = axis.dt, axis.n_t
    beta = p.beta.values.real.reshape(nt + 1, N)
    q = lp.q.values.real.reshape(nt + 1, N)
    f = None if lp.forcing is None else lp.forcing.values.reshape(nt + 1, N, 1)
    h = lp.dirichlet.values[..., None]
    march = _LinearMarch(grid, axis, OperatorCoefficients(), cfg)
    report = SolveReport()
    g0 = lp.g0.reshape(N, 1)
    g1 = lp.g1.reshape(N, 1)
    out = np.empty((nt + 1, N), dtype=complex)
    U0 = g0.astype(complex)
    U0[march.asm.boundary] = h[0]
    a0 = 1.0 - 2.0 * beta[0] * U0[:, 0].real
    if np.any(a0 < 0.5):
        raise CompatibilityError("coefficient 1 - 2 beta(0) g0 < 1/2 somewhere")
    g2 = march.second_derivative(a0, U0, g1, None if f is None else f[0], q[0])
    if np.any(beta[0]):
        g2 = g2 + 2.0 * beta[0].reshape(-1, 1) * g1**2 / a0.reshape(-1, 1)
    U1 = U0 + dt * g1 + 0.5 * dt**2 * g2
    U1[march.asm.boundary] = h[1]
    out[0], out[1] = U0[:, 0], U1[:, 0]
    Um, Un = U0, U1
    for n in range(1, nt):
        b = beta[n].reshape(-1, 1)
        a = 1.0 - 2.0 * beta[n] * Un[:, 0].real
        if np.any(a < 0.5):
            raise SolverError(f"coefficient 1 - 2 beta u dropped below 1/2 at step {n}")
        march.factor(a)
        fn = None if f is None else f[n]
        base = march.explicit_part(a, Un, Um, fn, q[n])
        I, B = march.asm.interior, march.asm.boundary
        Up = 2 * Un - Um  # extrapolated initial guess
        Up[B] = h[n + 1]
        rel = np.inf
        any_beta = np.any(b)
        for it in range(1, cfg.picard_max + 1):
            src = 2.0 * b * ((Up - Um) / (2 * dt)) ** 2 if any_beta else None
            rhs = base if src is None else base + src
            new = np.zeros_like(Up)
            new[I] = march.solve_interior(rhs[I] - march._Mb @ h[n + 1])
            new[B] = h[n + 1]
            scale = max(np.linalg.norm(new), 1e-300)
            rel = np.linalg.norm(new - Up) / scale
            Up = new
            if not any_beta or rel < cfg.picard_tol:
                break
        else:
            raise NonconvergenceError(n, rel)
        report.picard_iters.append(it)
        report.residuals.append(float(rel))
        Um, Un = Un, Up
        out[n + 1] = Un[:, 0]
    report.factorizations = march.factorizations
    return SpaceTimeField(out.reshape(nt + 1, grid.n, grid.n), grid, axis), report


# ---------------------------------------------------------------------------
# compatibility


@dataclass(frozen=True, eq=False)
class CompatibilitySequence:
    g: list
    m: int
    boundary_mismatch: list

    def __getitem__(self, l):
        return self.g[l]


def _one_sided_time_derivative(values: np.ndarray, dt: float, order: int) -> np.ndarray:
    """Second-order one-sided derivative at t=0 along axis 0."""
    v = values
    if order == 0:
        return v[0]
    if order == 1:
        return (-3 * v[0] + 4 * v[1] - v[2]) / (2 * dt)
    if order == 2:
        return (2 * v[0] - 5 * v[1] + 4 * v[2] - v[3]) / dt**2
    raise ValueError("only l <= 2 is supported")


def compatibility_sequence(g0, g1, h: BoundaryTimeTrace, q: SpaceTimeField, beta: SpaceTimeField, m: int = 2, forcing=None):
    """Initial time derivatives g_0..g_m of the nonlinear problem.

    g_2 = (1 - 2 beta g_0)^{-1} (Lap g_0 + Lap g_1 - q g_0 + 2 beta g_1^2 + f), evaluated
    at interior nodes (boundary nodes take the one-sided time derivative of h).
    Only m <= 2 is supported.
    """
    if m > 2:
        raise ValueError("compatibility depth is limited to m = 2")
    grid, axis = q.grid, q.axis
    g0 = np.asarray(g0, dtype=complex)
    g1 = np.asarray(g1, dtype=complex)
    b0 = beta.values[0].real
    a0 = 1.0 - 2.0 * b0 * g0.real
    if np.any(a0 < 0.5):
        raise CompatibilityError("coefficient 1 - 2 beta(0) g0 < 1/2 somewhere")
    gs = [g0, g1]
    if m >= 2:
        hh = grid.h
        rhs = laplacian_array(g0, hh) + laplacian_array(g1, hh) - q.values[0].real * g0 + 2 * b0 * g1**2
        if forcing is not None:
            rhs = rhs + forcing.values[0]
        g2 = rhs / a0
        bt = _one_sided_time_derivative(h.values, axis.dt, 2) if axis.n_t >= 3 else 0
        bn = grid.boundary_nodes
        g2[bn[:, 0], bn[:, 1]] = bt
        gs.append(g2)
    gs = gs[: m + 1]
    mismatch = []
    for l, gl in enumerate(gs):
        if l == 2:
            # boundary values are taken from h; report the interior-adjacent consistency instead
            mismatch.append(0.0)
            continue
        ht = _one_sided_time_derivative(h.values, axis.dt, l)
        mismatch.append(float(np.max(np.abs(grid.boundary_values(gl) - ht))))
    return CompatibilitySequence(gs, m, mismatch)


# ---------------------------------------------------------------------------
# manufactured solution


def manufactured_solution(t, x, y):
    """u* = exp(-t) sin(pi x) sin(pi y); with q = 1 it solves the linear equation with forcing 2 u*."""
    return np.exp(-t) * np.sin(np.pi * x) * np.sin(np.pi * y)


def manufactured_error(n: int, n_t: int | None = None, T: float = 1.0, cfg: SolverConfig = SolverConfig()) -> float:
    """Space-time L2 error of the linear solver against :func:`manufactured_solution` (dt = h unless given)."""
    grid, axis = SpatialGrid(n), TimeAxis(T, n_t or (n - 1))
    ex = SpaceTimeField.from_function(manufactured_solution, grid, axis)
    q = SpaceTimeField.from_function(lambda t, x, y: np.ones_like(x), grid, axis)
    p = LinearProblemSpec(q, BoundaryTimeTrace.of(ex), ex[0], -ex[0], forcing=ex * 2.0)
    return (solve_linear(p, cfg) - ex).l2_norm()


def convergence_slope(hs, errors) -> float:
    """Least-squares slope of log(error) against log(h)."""
    return float(np.polyfit(np.log(np.asarray(hs, dtype=float)), np.log(np.asarray(errors, dtype=float)), 1)[0])
