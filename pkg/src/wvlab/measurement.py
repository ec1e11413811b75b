"""Simulated boundary measurements, their linearizations, and boundary pairings.

Green's identity for the damped operator (u with zero Dirichlet and initial data,
w arbitrary)::

    int int (P u) w - u (tP w) = int_Omega [u_t w - u w_t - (Lap u) w](T) dx
                                 + int int_{boundary} d_nu u (d_t w - w)

is the source of both pairing functionals below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import (
    BoundaryTimeTrace,
    Phantom,
    SpaceTimeField,
    SpatialGrid,
    TimeAxis,
    gradient_array,
    integrate_boundary,
    laplacian_array,
    neumann_trace,
    time_derivative,
)
from .solver import (
    FORWARD_DIRECTION,
    LinearProblemSpec,
    NonlinearProblemSpec,
    SolverConfig,
    solve_linear,
    solve_nonlinear,
)
from .symbols import BACKWARD, FORWARD, GaugeShift

LATERAL = "lateral_dtn"
ALL_BOUNDARY = "all_boundary"


class GaugeMismatchError(ValueError):
    pass


class MeasurementError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Scenario:
    phantom: Phantom
    cfg: SolverConfig = SolverConfig()
    kind: str = LATERAL

    def __post_init__(self):
        if self.kind not in (LATERAL, ALL_BOUNDARY):
            raise ValueError(f"unknown scenario kind {self.kind!r}")

    @property
    def grid(self) -> SpatialGrid:
        return self.phantom.q.grid

    @property
    def axis(self) -> TimeAxis:
        return self.phantom.q.axis

    def with_phantom(self, phantom: Phantom) -> Scenario:
        return Scenario(phantom, self.cfg, self.kind)


@dataclass(frozen=True, eq=False)
class InputData:
    dirichlet: BoundaryTimeTrace
    g0: np.ndarray | None = None
    g1: np.ndarray | None = None

    def initial(self):
        g = self.dirichlet.grid
        z = np.zeros((g.n, g.n), dtype=complex)
        return (z if self.g0 is None else np.asarray(self.g0, dtype=complex),
                z if self.g1 is None else np.asarray(self.g1, dtype=complex))

    def scaled(self, c) -> InputData:
        g0, g1 = self.initial()
        return InputData(self.dirichlet * c, g0 * c, g1 * c)

    def __add__(self, other: InputData) -> InputData:
        a0, a1 = self.initial()
        b0, b1 = other.initial()
        return InputData(self.dirichlet + other.dirichlet, a0 + b0, a1 + b1)


@dataclass(frozen=True, eq=False)
class MeasurementRecord:
    data: InputData | None
    neumann: BoundaryTimeTrace
    final_u: np.ndarray | None = None
    final_ut: np.ndarray | None = None
    gauge: GaugeShift | None = None
    field: SpaceTimeField | None = None

    def __sub__(self, other: MeasurementRecord) -> MeasurementRecord:
        if not _same_gauge(self.gauge, other.gauge):
            raise GaugeMismatchError("records carry different gauge tags")
        fu = None if self.final_u is None or other.final_u is None else self.final_u - other.final_u
        fut = None if self.final_ut is None or other.final_ut is None else self.final_ut - other.final_ut
        fld = None if self.field is None or other.field is None else self.field - other.field
        return MeasurementRecord(self.data, self.neumann - other.neumann, fu, fut, self.gauge, fld)

    def scaled(self, c) -> MeasurementRecord:
        f = lambda v: None if v is None else v * c  # noqa: E731
        return MeasurementRecord(self.data, self.neumann * c, f(self.final_u), f(self.final_ut), self.gauge, f(self.field))


def _same_gauge(a: GaugeShift | None, b: GaugeShift | None) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.sense == b.sense and np.isclose(a.rho, b.rho, rtol=1e-12) and np.allclose(a.omega, b.omega, atol=1e-12)


def _record_from_field(s: Scenario, data, u: SpaceTimeField, gauge, keep_field: bool) -> MeasurementRecord:
    fu = fut = None
    if s.kind == ALL_BOUNDARY:
        fu = u.values[-1].copy()
        fut = time_derivative(u.values, s.axis.dt, 1)[-1]
    return MeasurementRecord(data, neumann_trace(u), fu, fut, gauge, u if keep_field else None)


def apply_measurement(
    s: Scenario, data: InputData, mode: str = "linear", gauge: GaugeShift | None = None, keep_field: bool = False
) -> MeasurementRecord:
    """Solve the forward problem for ``data`` in the scenario's medium and record boundary outputs."""
    g0, g1 = data.initial()
    if s.kind == LATERAL and (np.any(g0) or np.any(g1)):
        raise MeasurementError("lateral DtN measurements require zero initial data")
    if s.kind == LATERAL:
        h = data.dirichlet.values
        if data.dirichlet.axis.n_t >= 3:
            d1 = (-3 * h[0] + 4 * h[1] - h[2]) / (2 * s.axis.dt)
            scale = max(np.max(np.abs(h)), 1e-300)
            if np.max(np.abs(h[0])) > 1e-10 * scale or np.max(np.abs(d1)) * s.axis.dt > 1e-6 * scale:
                raise MeasurementError("lateral DtN data must vanish to first order at t=0")
    lp = LinearProblemSpec(s.phantom.q, data.dirichlet, g0, g1, gauge=gauge)
    if mode == "linear":
        u = solve_linear(lp, s.cfg)
    elif mode == "nonlinear":
        if gauge is not None:
            raise MeasurementError("nonlinear measurements are taken in the physical frame")
        u, _ = solve_nonlinear(NonlinearProblemSpec(lp, s.phantom.beta), s.cfg)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return _record_from_field(s, data, u, gauge, keep_field)


def combined_gauge(g1: GaugeShift | None, g2: GaugeShift | None) -> GaugeShift | None:
    """Gauge of a product of two forward-gauged fields; requires orthogonal directions (or equal rates)."""
    if g1 is None and g2 is None:
        return None
    if g1 is None or g2 is None or g1.sense != FORWARD or g2.sense != FORWARD:
        raise GaugeMismatchError("both factors must be forward-gauged (or both physical)")
    mu = g1.rho**2 + g2.rho**2
    k = g1.rho * g1.omega + g2.rho * g2.omega
    if abs(k @ k - mu) > 1e-9 * mu:
        raise GaugeMismatchError("product of the two gauges is not a gauge shift (directions must be orthogonal)")
    rho = float(np.sqrt(mu))
    return GaugeShift(rho, tuple(k / rho), FORWARD)


def shifted_second_derivative(W: np.ndarray, mu: float, dt: float) -> np.ndarray:
    """(d_t + mu)^2 W along axis 0."""
    return time_derivative(W, dt, 2) + 2 * mu * time_derivative(W, dt, 1) + mu * mu * W


def linearize_second(
    s: Scenario,
    h1: InputData,
    h2: InputData,
    method: str = "direct",
    eps=(1e-3, 1e-3),
    gauges=(None, None),
    keep_field: bool = False,
) -> MeasurementRecord:
    """Mixed second derivative U_2 = d_e1 d_e2 u(e1 h1 + e2 h2) at e = 0.

    U_2 solves (P + q) U_2 = 2 beta d_t^2(u_1 u_2) with zero data.  The direct
    method forms that source (in the combined gauge when the inputs are gauged);
    the stencil method differences four nonlinear solves.
    """
    if method == "direct":
        gauge = combined_gauge(*gauges)
        u1 = apply_measurement(s, h1, "linear", gauges[0], keep_field=True).field
        u2 = apply_measurement(s, h2, "linear", gauges[1], keep_field=True).field
        mu = 0.0 if gauge is None else gauge.rho**2
        beta = s.phantom.beta.values.real
        src = 2.0 * beta * shifted_second_derivative(u1.values * u2.values, mu, s.axis.dt)
        src[:, ~s.grid.interior_mask] = 0
        zero = BoundaryTimeTrace.zeros(s.grid, s.axis)
        z = np.zeros((s.grid.n, s.grid.n))
        lp = LinearProblemSpec(s.phantom.q, zero, z, z, forcing=SpaceTimeField(src, s.grid, s.axis), gauge=gauge)
        U2 = solve_linear(lp, s.cfg)
        return _record_from_field(s, None, U2, gauge, keep_field)
    if method == "stencil":
        if gauges != (None, None):
            raise GaugeMismatchError("the stencil method works in the physical frame only")
        e1, e2 = eps
        fields = {}
        for a, b in ((e1, e2), (e1, 0.0), (0.0, e2)):
            data = h1.scaled(a) + h2.scaled(b)
            fields[(a, b)] = apply_measurement(s, data, "nonlinear", keep_field=True).field.values
        U2 = (fields[(e1, e2)] - fields[(e1, 0.0)] - fields[(0.0, e2)]) / (e1 * e2)  # u_{0,0} = 0 for zero data
        return _record_from_field(s, None, SpaceTimeField(U2, s.grid, s.axis), None, keep_field)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# pairings


@dataclass(frozen=True, eq=False)
class ProbeBoundaryData:
    """What a pairing needs from a backward probe: its boundary values, final data and gauge."""

    boundary: BoundaryTimeTrace
    gauge: GaugeShift | None
    final: np.ndarray | None = None
    final_t: np.ndarray | None = None

    @classmethod
    def from_probe(cls, probe) -> ProbeBoundaryData:
        A = probe.gauged_total.values
        return cls(BoundaryTimeTrace.of(probe.gauged_total), probe.gauge, A[-1].copy(),
                   time_derivative(A, probe.gauged_total.axis.dt, 1)[-1])

    @classmethod
    def from_field(cls, w: SpaceTimeField, gauge: GaugeShift | None) -> ProbeBoundaryData:
        return cls(BoundaryTimeTrace.of(w), gauge, w.values[-1].copy(), time_derivative(w.values, w.axis.dt, 1)[-1])


def check_cancellation(fwd: GaugeShift | None, bwd: GaugeShift | None) -> None:
    """The exponential weights of a forward record and a backward probe must multiply to 1."""
    if fwd is None and bwd is None:
        return
    if fwd is None or bwd is None:
        raise GaugeMismatchError("one side is gauged and the other is not")
    if fwd.sense != FORWARD or bwd.sense != BACKWARD:
        raise GaugeMismatchError("pairing needs a forward record and a backward probe")
    if np.max(np.abs(fwd.value + bwd.value)) > 1e-9 * (1 + fwd.rho**2):
        raise GaugeMismatchError("gauge weights do not cancel (need equal rho and opposite directions)")


def _final_terms(D, Dt, LapD_full, B, Bt, fwd: GaugeShift | None, grid: SpatialGrid) -> complex:
    """int [u_t w - u w_t - (Lap u) w](T) dx written for gauged factors."""
    w = grid.quadrature_weights
    if fwd is None:
        return complex(np.sum(w * (Dt * B - D * Bt - LapD_full * B)))
    mu, k = fwd.rho**2, fwd.rho * fwd.omega
    gx, gy = gradient_array(D, grid.h)
    lap_phys = LapD_full - 2 * (k[0] * gx + k[1] * gy) + (k @ k) * D
    return complex(np.sum(w * ((Dt + mu * D) * B - D * (Bt - mu * B) - lap_phys * B)))


def boundary_pairing(kind: str, record_diff: MeasurementRecord, w_probe: ProbeBoundaryData, scenario_kind: str = LATERAL) -> complex:
    """Boundary side of the q- or beta-identity; equals the interior integral it is paired with.

    q_identity:    -int int d_nu D (d_t B - (1 + mu) B)  (+ final-data terms)  =  int int q u w
    beta_identity: -int int (d_t d_nu U + (1 + mu) d_nu U) B + [d_nu U B](T)  (+ final terms)
                   =  int int 2 beta d_t^2(u_1 u_2) u_0
    with mu the rate of the forward gauge (0 in the physical frame).
    """
    check_cancellation(record_diff.gauge, w_probe.gauge)
    grid, axis = record_diff.neumann.grid, record_diff.neumann.axis
    mu = 0.0 if record_diff.gauge is None else record_diff.gauge.rho**2
    dN = record_diff.neumann.values
    B = w_probe.boundary.values
    if kind == "q_identity":
        Bt = time_derivative(B, axis.dt, 1)
        val = -integrate_boundary(dN * (Bt - (1 + mu) * B), grid, axis)
    elif kind == "beta_identity":
        dNt = time_derivative(dN, axis.dt, 1)
        val = -integrate_boundary((dNt + (1 + mu) * dN) * B, grid, axis)
        val += complex(np.dot(dN[-1] * B[-1], grid.boundary_weights))
    else:
        raise ValueError(f"unknown pairing kind {kind!r}")
    if scenario_kind == ALL_BOUNDARY:
        if record_diff.final_u is None or w_probe.final is None:
            raise MeasurementError("all-boundary pairing needs final data on both sides")
        D, Dt = record_diff.final_u, record_diff.final_ut
        lap = laplacian_array(D, grid.h)
        ft = _final_terms(D, Dt, lap, w_probe.final, w_probe.final_t, record_diff.gauge, grid)
        # the q identity moves the volume term to the other side; the beta identity keeps it
        val = val - ft if kind == "q_identity" else val + ft
    return val
