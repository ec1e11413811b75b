"""Built-in coefficient phantoms (q, beta) on a space-time grid."""

from __future__ import annotations

import numpy as np

from .grid import Phantom, SpaceTimeField, SpatialGrid, TimeAxis
from .probes import smooth_step

PHANTOM_NAMES = ("zero", "bump_q", "bump_beta", "separable", "shepp-like")


def radial_bump(X, Y, center=(0.5, 0.5), radius: float = 0.4):
    """Smooth radial bump: 1 at the center, 0 outside ``radius``, C-infinity."""
    r = np.hypot(X - center[0], Y - center[1])
    return smooth_step(1.0 - r / radius)


def _field(values, grid, axis) -> SpaceTimeField:
    return SpaceTimeField(np.asarray(values, dtype=float), grid, axis)


def q_bump(grid: SpatialGrid, axis: TimeAxis, amplitude: float = 2.0, radius: float = 0.4, center=(0.5, 0.5)):
    """q(t, x) = amplitude * (1 + 0.5 sin(pi t)) * bump(x)."""
    X, Y = grid.coords
    g = radial_bump(X, Y, center, radius)
    tf = 1.0 + 0.5 * np.sin(np.pi * axis.t)
    return _field(amplitude * tf[:, None, None] * g[None], grid, axis)


def beta_bump(grid: SpatialGrid, axis: TimeAxis, amplitude: float = 0.5, radius: float = 0.45, center=(0.5, 0.5)):
    """beta(t, x) = amplitude * (1 + 0.2 t) * bump(x)."""
    X, Y = grid.coords
    g = radial_bump(X, Y, center, radius)
    tf = 1.0 + 0.2 * axis.t
    return _field(amplitude * tf[:, None, None] * g[None], grid, axis)


def shepp_like(grid: SpatialGrid, axis: TimeAxis, amplitude: float = 2.0):
    """A few smoothed ellipses of different contrast (time independent)."""
    X, Y = grid.coords
    out = np.zeros_like(X)
    for (cx, cy, a, b, ang, c) in (
        (0.5, 0.5, 0.30, 0.38, 0.0, 1.0),
        (0.42, 0.55, 0.08, 0.14, 0.3, -0.4),
        (0.60, 0.45, 0.07, 0.10, -0.4, 0.5),
    ):
        ca, sa = np.cos(ang), np.sin(ang)
        u = (ca * (X - cx) + sa * (Y - cy)) / a
        v = (-sa * (X - cx) + ca * (Y - cy)) / b
        out += c * smooth_step(3.0 * (1.0 - np.hypot(u, v)))
    return _field(np.broadcast_to(amplitude * out, (axis.n_t + 1,) + X.shape), grid, axis)


def build_phantom(name: str, grid: SpatialGrid, axis: TimeAxis, scale: float = 1.0) -> Phantom:
    """Named phantom; ``scale`` multiplies the coefficient(s) the phantom is about."""
    zero = SpaceTimeField.zeros(grid, axis)
    if name == "zero":
        return Phantom(zero, zero)
    if name == "bump_q":
        return Phantom(q_bump(grid, axis) * scale, zero)
    if name == "bump_beta":
        return Phantom(q_bump(grid, axis), beta_bump(grid, axis) * scale)
    if name == "separable":
        X, Y = grid.coords
        g = np.sin(np.pi * X) * np.sin(np.pi * Y)
        q = _field(scale * np.exp(-axis.t)[:, None, None] * g[None], grid, axis)
        return Phantom(q, zero)
    if name == "shepp-like":
        return Phantom(shepp_like(grid, axis) * scale, zero)
    raise ValueError(f"unknown phantom {name!r}; expected one of {PHANTOM_NAMES}")
