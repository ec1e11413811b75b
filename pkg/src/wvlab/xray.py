"""Parallel-beam X-ray transform on the unit square and filtered backprojection.

A line is indexed by its angle theta (direction omega = (cos theta, sin theta)) and
its signed offset s from the square's center along omega_perp = (-sin theta, cos theta).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .grid import SpatialGrid

CENTER = np.array([0.5, 0.5])
CIRCUMRADIUS = math.sqrt(2.0) / 2.0


class SinogramError(ValueError):
    pass


@dataclass(frozen=True)
class LineSpec:
    angle: float
    offset: float

    @property
    def direction(self) -> np.ndarray:
        return np.array([math.cos(self.angle), math.sin(self.angle)])

    @property
    def normal(self) -> np.ndarray:
        return np.array([-math.sin(self.angle), math.cos(self.angle)])

    @property
    def anchor(self) -> np.ndarray:
        return CENTER + self.offset * self.normal

    def chord(self) -> tuple[float, float] | None:
        from .probes import chord

        return chord(self.anchor, self.direction)


def _sample(f: np.ndarray, grid: SpatialGrid, px, py) -> np.ndarray:
    """Bilinear samples of a real nodal array; points outside the square give 0."""
    coords = np.vstack([np.ravel(px) / grid.h, np.ravel(py) / grid.h])
    vals = map_coordinates(f, coords, order=1, mode="constant", cval=0.0)
    inside = (coords[0] >= -1e-9) & (coords[0] <= grid.n - 1 + 1e-9) & (coords[1] >= -1e-9) & (coords[1] <= grid.n - 1 + 1e-9)
    return np.where(inside, vals, 0.0).reshape(np.shape(px))


def _as_real(f) -> np.ndarray:
    arr = np.asarray(f)
    if np.iscomplexobj(arr):
        if np.max(np.abs(arr.imag), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(arr.real), initial=0.0)):
            raise SinogramError("X-ray transform expects a real field")
        arr = arr.real
    return np.asarray(arr, dtype=float)


def line_integral(f, grid: SpatialGrid, line: LineSpec) -> tuple[float, bool]:
    """Composite trapezoid along the chord at step <= h/2; returns (value, hit)."""
    arr = _as_real(f)
    ch = line.chord()
    if ch is None or ch[1] - ch[0] <= 0:
        return 0.0, False
    s0, s1 = ch
    m = max(int(math.ceil((s1 - s0) / (0.5 * grid.h))), 1)
    s = np.linspace(s0, s1, m + 1)
    # chord points are inside the square by construction; clip away rounding at the ends
    p = np.clip(line.anchor[:, None] + line.direction[:, None] * s[None], 0.0, 1.0)
    vals = _sample(arr, grid, p[0], p[1])
    return float(np.trapezoid(vals, s)), True


@dataclass(frozen=True, eq=False)
class Sinogram:
    angles: np.ndarray
    offsets: np.ndarray
    values: np.ndarray
    t_index: int = 0

    def __post_init__(self):
        a = np.asarray(self.angles, dtype=float)
        o = np.asarray(self.offsets, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if np.any(np.diff(a) <= 0) or a[0] < 0 or a[-1] >= math.pi:
            raise SinogramError("angles must be strictly increasing in [0, pi)")
        if not np.allclose(o, -o[::-1], atol=1e-12):
            raise SinogramError("offsets must be symmetric about 0")
        if np.max(np.abs(o)) > CIRCUMRADIUS + 1e-12:
            raise SinogramError("offsets exceed the square's circumradius")
        if v.shape != (a.size, o.size):
            raise SinogramError(f"values shape {v.shape} != ({a.size}, {o.size})")
        object.__setattr__(self, "angles", a)
        object.__setattr__(self, "offsets", o)
        object.__setattr__(self, "values", v)

    def __add__(self, other: Sinogram) -> Sinogram:
        return Sinogram(self.angles, self.offsets, self.values + other.values, self.t_index)

    def __mul__(self, c) -> Sinogram:
        return Sinogram(self.angles, self.offsets, self.values * c, self.t_index)

    __rmul__ = __mul__


def default_geometry(n_angles: int, n_offsets: int, radius: float = CIRCUMRADIUS):
    angles = np.arange(n_angles) * (math.pi / n_angles)
    offsets = np.linspace(-radius, radius, n_offsets)
    return angles, offsets


def xray_forward(f, grid: SpatialGrid, angles, offsets, t_index: int = 0) -> Sinogram:
    """Sinogram of one real time slice; all offsets of an angle are sampled in one batch.

    Each chord uses the same number of trapezoid nodes (that of the longest chord),
    so every line is sampled at spacing <= h/2.
    """
    arr = _as_real(f)
    angles = np.asarray(angles, dtype=float)
    offsets = np.asarray(offsets, dtype=float)
    out = np.zeros((angles.size, offsets.size))
    m = int(math.ceil(2 * CIRCUMRADIUS / (0.5 * grid.h)))
    u = np.linspace(0.0, 1.0, m + 1)
    for i, th in enumerate(angles):
        lines = [LineSpec(th, s) for s in offsets]
        chords = [ln.chord() for ln in lines]
        hit = np.array([c is not None and c[1] > c[0] for c in chords])
        if not hit.any():
            continue
        s0 = np.array([c[0] if h else 0.0 for c, h in zip(chords, hit)])
        s1 = np.array([c[1] if h else 0.0 for c, h in zip(chords, hit)])
        S = s0[:, None] + (s1 - s0)[:, None] * u[None]
        anchors = np.array([ln.anchor for ln in lines])
        om = lines[0].direction
        px = np.clip(anchors[:, 0:1] + om[0] * S, 0.0, 1.0)
        py = np.clip(anchors[:, 1:2] + om[1] * S, 0.0, 1.0)
        vals = _sample(arr, grid, px, py)
        out[i] = np.where(hit, np.trapezoid(vals, S, axis=1), 0.0)
    return Sinogram(angles, offsets, out, t_index)


def ramlak_filter(proj: np.ndarray, d: float) -> np.ndarray:
    """Ram-Lak (ramp) filtering along the last axis using the band-limited spatial kernel and 2x zero padding."""
    m = proj.shape[-1]
    L = 1 << int(math.ceil(math.log2(2 * m)))
    k = np.arange(-(m - 1), m)
    h = np.zeros(k.size)
    h[k == 0] = 1.0 / (4 * d * d)
    odd = (k % 2) != 0
    h[odd] = -1.0 / (math.pi**2 * k[odd].astype(float) ** 2 * d * d)
    kern = np.zeros(L)
    kern[: m] = h[m - 1:]
    kern[L - (m - 1):] = h[: m - 1]
    P = np.fft.rfft(proj, n=L, axis=-1)
    H = np.fft.rfft(kern)
    return d * np.fft.irfft(P * H, n=L, axis=-1)[..., :m]


def fbp_invert(s: Sinogram, grid: SpatialGrid, min_angles: int = 60, min_offsets: int | None = None) -> np.ndarray:
    """Filtered backprojection onto the grid nodes."""
    need_o = grid.n if min_offsets is None else min_offsets
    if s.angles.size < min_angles or s.offsets.size < need_o:
        raise SinogramError(
            f"FBP needs at least {min_angles} angles and {need_o} offsets, got {s.angles.size} and {s.offsets.size}"
        )
    d = float(s.offsets[1] - s.offsets[0])
    if not np.allclose(np.diff(s.offsets), d):
        raise SinogramError("FBP needs uniformly spaced offsets")
    filt = ramlak_filter(s.values, d)
    X, Y = grid.coords
    dx, dy = X - CENTER[0], Y - CENTER[1]
    out = np.zeros_like(X)
    for i, th in enumerate(s.angles):
        sp = -math.sin(th) * dx + math.cos(th) * dy
        out += np.interp(sp, s.offsets, filt[i], left=0.0, right=0.0)
    return out * (math.pi / s.angles.size)


def write_sinogram_csv(path, sinos) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_index", "angle", "offset", "value"])
        for sg in sinos:
            for i, a in enumerate(sg.angles):
                for j, o in enumerate(sg.offsets):
                    w.writerow([sg.t_index, repr(float(a)), repr(float(o)), repr(float(sg.values[i, j]))])


def read_sinogram_csv(path) -> list[Sinogram]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    out = []
    for t in np.unique(data[:, 0]).astype(int):
        rows = data[data[:, 0] == t]
        angles = np.unique(rows[:, 1])
        offsets = np.unique(rows[:, 2])
        vals = rows[:, 3].reshape(angles.size, offsets.size)
        out.append(Sinogram(angles, offsets, vals, int(t)))
    return out


def fourier_slice_residual(f, grid: SpatialGrid, sino: Sinogram, k_max: int | None = None) -> float:
    """Max relative mismatch between projection spectra and central slices of the 2D spectrum.

    Frequencies are k / (2 R) cycles per unit length for |k| <= k_max (default n/4),
    with R the offset half-span; both transforms are evaluated by direct quadrature.
    """
    arr = _as_real(f)
    k_max = grid.n // 4 if k_max is None else k_max
    R = float(sino.offsets[-1])
    freqs = np.arange(0, k_max + 1) / (2 * R)
    X, Y = grid.coords
    w = grid.quadrature_weights * arr
    worst = 0.0
    scale = abs(np.sum(w))
    for i, th in enumerate(sino.angles):
        nm = np.array([-math.sin(th), math.cos(th)])
        proj_ft = np.array([np.trapezoid(sino.values[i] * np.exp(-2j * math.pi * k * sino.offsets), sino.offsets) for k in freqs])
        sp = nm[0] * (X - 0.5) + nm[1] * (Y - 0.5)
        img_ft = np.array([np.sum(w * np.exp(-2j * math.pi * k * sp)) for k in freqs])
        worst = max(worst, float(np.max(np.abs(proj_ft - img_ft)) / scale))
    return worst
