"""Polynomial symbols of the strongly damped wave operator and its transpose.

``P(tau, xi) = -tau^2 + xi.xi + i tau xi.xi`` is the symbol of
``d_t^2 - Lap - d_t Lap`` with the convention D = -i d; the transpose (backward)
operator flips the sign of the ``i tau xi.xi`` term.  All dot products are
bilinear, so the formulas are valid for complex arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FORWARD = "forward"
BACKWARD = "backward"


@dataclass(frozen=True)
class SymbolSpec:
    kind: str = FORWARD

    def __post_init__(self):
        if self.kind not in (FORWARD, BACKWARD):
            raise ValueError(f"symbol kind must be forward or backward, got {self.kind!r}")

    @property
    def damping_sign(self) -> float:
        return 1.0 if self.kind == FORWARD else -1.0


@dataclass(frozen=True)
class GaugeShift:
    """Complex frequency shift of a linear exponential phase.

    A forward shift (-i rho^2, i rho omega) corresponds to the weight
    exp(rho^2 t - rho omega.x); a backward one (i rho^2, i rho omega) to
    exp(-rho^2 t - rho omega.x).
    """

    rho: float
    direction: tuple[float, float]
    sense: str = FORWARD

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if d.shape != (2,):
            raise ValueError("direction must be a 2-vector")
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError(f"direction must be a unit vector, |d| = {np.linalg.norm(d)!r}")
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.sense not in (FORWARD, BACKWARD):
            raise ValueError(f"unknown sense {self.sense!r}")
        object.__setattr__(self, "direction", (float(d[0]), float(d[1])))

    @property
    def omega(self) -> np.ndarray:
        return np.array(self.direction)

    @property
    def value(self) -> np.ndarray:
        """zeta^o as a complex (tau, xi1, xi2) triple."""
        s = -1.0 if self.sense == FORWARD else 1.0
        return np.array([s * 1j * self.rho**2, 1j * self.rho * self.direction[0], 1j * self.rho * self.direction[1]])

    def log_weight(self, t, x, y):
        """Exponent of the physical-frame weight multiplying the gauged field."""
        s = 1.0 if self.sense == FORWARD else -1.0
        return s * self.rho**2 * t - self.rho * (self.direction[0] * x + self.direction[1] * y)


def _split(zeta):
    z = np.asarray(zeta, dtype=complex)
    return z[..., 0], z[..., 1], z[..., 2]


def eval_symbol(spec: SymbolSpec, zeta) -> complex:
    tau, x1, x2 = _split(zeta)
    R = x1 * x1 + x2 * x2
    return -tau**2 + R + spec.damping_sign * 1j * tau * R


def symbol_derivatives(spec: SymbolSpec, zeta) -> dict[tuple[int, int, int], complex]:
    """Every nonzero partial derivative of the cubic symbol, keyed by multi-index (a_tau, a_1, a_2)."""
    tau, x1, x2 = _split(zeta)
    s = spec.damping_sign * 1j
    R = x1 * x1 + x2 * x2
    one = np.ones_like(tau)
    return {
        (0, 0, 0): -tau**2 + R + s * tau * R,
        (1, 0, 0): -2 * tau + s * R,
        (0, 1, 0): 2 * x1 * (1 + s * tau),
        (0, 0, 1): 2 * x2 * (1 + s * tau),
        (2, 0, 0): -2 * one,
        (1, 1, 0): 2 * s * x1,
        (1, 0, 1): 2 * s * x2,
        (0, 2, 0): 2 * (1 + s * tau),
        (0, 0, 2): 2 * (1 + s * tau),
        (0, 1, 1): 0 * one,
        (1, 2, 0): 2 * s * one,
        (1, 0, 2): 2 * s * one,
    }


def ptilde_sq(spec: SymbolSpec, zeta) -> float:
    """Hormander weight squared: sum over all multi-indices of |d^alpha P|^2."""
    return np.real(sum(np.abs(v) ** 2 for v in symbol_derivatives(spec, zeta).values()))


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    ok: bool


def shifted_bound_check(spec: SymbolSpec, shift: GaugeShift, center) -> BoundCheck:
    """Check the shifted weight against 4 rho^6 at a real point."""
    c = np.asarray(center, dtype=complex)
    lhs = float(ptilde_sq(spec, c + shift.value))
    rhs = 4.0 * shift.rho**6
    return BoundCheck(lhs, rhs, lhs >= rhs - 1e-9 * rhs)


def lower_bound_factor(shift: GaugeShift, center) -> float:
    """Closed form 4(|xi|^2 + rho^2)((1 + rho^2)^2 + tau^2) of the forward estimate."""
    tau, x1, x2 = (float(v) for v in center)
    r = shift.rho
    return 4.0 * (x1 * x1 + x2 * x2 + r * r) * ((1 + r * r) ** 2 + tau * tau)


def _normal(spec: SymbolSpec) -> np.ndarray:
    return np.array([1.0, 0.0, 0.0]) if spec.kind == FORWARD else np.array([-1.0, 0.0, 0.0])


def sigma_roots(spec: SymbolSpec, shift: GaugeShift, center) -> tuple[complex, complex]:
    """Both roots sigma of P(center + zeta^o + sigma N) = 0.

    The half-space normal N is (1, 0, 0) forward and (-1, 0, 0) backward.
    Writing xi' = xi + i rho omega and R = xi'.xi', the admissible tau-values are
    (s i R +- sqrt(4R - R^2)) / 2 with s the damping sign; sigma follows by
    undoing the shift along N.  The smaller root is recovered from the product
    of roots to avoid cancellation at large rho.
    """
    z0 = np.asarray(center, dtype=complex) + shift.value
    x1, x2 = z0[1], z0[2]
    R = x1 * x1 + x2 * x2
    s = spec.damping_sign
    n0 = _normal(spec)[0]
    # P(kappa + n0 sigma) = -(kappa + n0 sigma)^2 + s i R (kappa + n0 sigma) + R, a quadratic in sigma
    kappa = z0[0]
    a2 = -(n0 * n0)
    a1 = -2 * kappa * n0 + s * 1j * R * n0
    a0 = -kappa * kappa + s * 1j * R * kappa + R
    assert a2 != 0, "degenerate quadratic"
    disc = np.sqrt(a1 * a1 - 4 * a2 * a0)
    # pick the sign that avoids cancellation, then use Vieta for the partner root
    qv = -0.5 * (a1 + disc) if abs(a1 + disc) >= abs(a1 - disc) else -0.5 * (a1 - disc)
    r1 = qv / a2
    r2 = a0 / qv if qv != 0 else -a1 / a2 - r1
    return complex(r1), complex(r2)


def sigma_imag_closed_form(shift: GaugeShift, r: float, theta: float) -> tuple[float, float]:
    """Im sigma_(+/-) at the center (0, r theta) from the closed form (c + 2 rho^2 +/- b) / 2."""
    rho = shift.rho
    om = shift.omega
    th = np.array([np.cos(theta), np.sin(theta)])
    c = r * r - rho * rho
    d = 2 * r * rho * float(om @ th)
    C = d * d - c * c + 4 * c
    D = 2 * d * (2 - c)
    b = np.sqrt(0.5 * (-C + np.hypot(C, D)))
    return 0.5 * (c + 2 * rho * rho + b), 0.5 * (c + 2 * rho * rho - b)


def root_residual(spec: SymbolSpec, shift: GaugeShift, center, sigma: complex) -> float:
    z = np.asarray(center, dtype=complex) + shift.value + sigma * _normal(spec)
    return float(abs(eval_symbol(spec, z)))


@dataclass
class RootScan:
    rows: list[dict]
    min_imag: float
    min_imag_r1: float
    max_residual_ratio: float

    @property
    def violations(self) -> int:
        return sum(1 for row in self.rows if row["tau"] == 0.0 and min(row["im_plus"], row["im_minus"]) < -1e-12)


def root_scan(
    spec: SymbolSpec,
    rhos,
    n_radii: int = 64,
    n_angles: int = 64,
    r_max: float = 50.0,
    taus=(0.0,),
    direction=(1.0, 0.0),
) -> RootScan:
    """Sample centers (tau, r theta) for r in [1, r_max] log-spaced and report root imaginary parts.

    Only tau = 0 rows count as violations; other tau values are reported.
    """
    radii = np.geomspace(1.0, r_max, n_radii)
    angles = np.linspace(0.0, 2 * np.pi, n_angles, endpoint=False)
    rows = []
    min_imag = np.inf
    min_r1 = np.inf
    worst = 0.0
    for rho in rhos:
        shift = GaugeShift(rho, direction, spec.kind)
        for tau in taus:
            for r in radii:
                for th in angles:
                    center = (tau, r * np.cos(th), r * np.sin(th))
                    s1, s2 = sigma_roots(spec, shift, center)
                    res = max(root_residual(spec, shift, center, s) for s in (s1, s2))
                    worst = max(worst, res / (1 + rho**4))
                    hi, lo = max(s1.imag, s2.imag), min(s1.imag, s2.imag)
                    rows.append(
                        {"rho": rho, "tau": tau, "xi1": center[1], "xi2": center[2], "r": r, "im_plus": hi, "im_minus": lo}
                    )
                    if tau == 0.0:
                        min_imag = min(min_imag, lo)
                        if r == 1.0:
                            min_r1 = min(min_r1, lo)
    return RootScan(rows, float(min_imag), float(min_r1), float(worst))


def condition_b_surrogate(spec: SymbolSpec, rho: float, r_max: float = 50.0, n_radii: int = 64, n_angles: int = 64) -> float:
    """min over sampled real centers of max(Im sigma_+, Im sigma_-)."""
    scan = root_scan(spec, [rho], n_radii, n_angles, r_max)
    return min(max(row["im_plus"], row["im_minus"]) for row in scan.rows)


def bound_lattice(rhos, n: int = 41, extent: float = 20.0, spec: SymbolSpec = SymbolSpec(FORWARD), direction=(1.0, 0.0)):
    """Vectorized shifted-bound check on an n^3 lattice; returns (violations, min lhs/rhs ratio, rows)."""
    g = np.linspace(-extent, extent, n)
    T, X1, X2 = np.meshgrid(g, g, g, indexing="ij")
    violations = 0
    worst = np.inf
    rows = []
    for rho in rhos:
        shift = GaugeShift(rho, direction, spec.kind)
        zeta = np.stack([T, X1, X2], axis=-1).astype(complex) + shift.value
        lhs = ptilde_sq(spec, zeta)
        rhs = 4.0 * rho**6
        bad = lhs < rhs - 1e-9 * rhs
        violations += int(bad.sum())
        worst = min(worst, float((lhs / rhs).min()))
        rows.append({"rho": rho, "min_lhs": float(lhs.min()), "bound": rhs, "violations": int(bad.sum())})
    return violations, worst, rows
