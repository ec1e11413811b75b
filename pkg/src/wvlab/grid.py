"""Uniform space-time discretization of (0, T) x [0, 1]^2.

Arrays are indexed ``[..., i, j]`` with ``i`` the x-index and ``j`` the
y-index, so ``values[k, i, j] = f(t_k, x_i, y_j)``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

MAGIC = b"WVLT"
FORMAT_VERSION = 1


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class SpatialGrid:
    n: int

    def __post_init__(self):
        if self.n < 5:
            raise GridError(f"grid needs n >= 5 nodes per side, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n - 1)

    @cached_property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n)

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        X, Y = np.meshgrid(self.x, self.x, indexing="ij")
        return X, Y

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        m = np.zeros((self.n, self.n), dtype=bool)
        m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
        return m

    @property
    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        """(nb, 2) integer node indices walking the perimeter counter-clockwise from (0, 0)."""
        n = self.n
        bottom = [(i, 0) for i in range(n - 1)]
        right = [(n - 1, j) for j in range(n - 1)]
        top = [(i, n - 1) for i in range(n - 1, 0, -1)]
        left = [(0, j) for j in range(n - 1, 0, -1)]
        return np.array(bottom + right + top + left, dtype=np.intp)

    @cached_property
    def boundary_points(self) -> np.ndarray:
        return self.boundary_nodes * self.h

    @cached_property
    def outward_normal(self) -> np.ndarray:
        """Unit outward normals per boundary node; corners get the normalized edge sum."""
        idx = self.boundary_nodes
        nu = np.zeros((len(idx), 2))
        nu[idx[:, 0] == 0, 0] -= 1.0
        nu[idx[:, 0] == self.n - 1, 0] += 1.0
        nu[idx[:, 1] == 0, 1] -= 1.0
        nu[idx[:, 1] == self.n - 1, 1] += 1.0
        return nu / np.linalg.norm(nu, axis=1, keepdims=True)

    @cached_property
    def boundary_weights(self) -> np.ndarray:
        # trapezoid along each edge; a corner collects h/2 from both adjacent edges
        return np.full(len(self.boundary_nodes), self.h)

    @cached_property
    def quadrature_weights(self) -> np.ndarray:
        w1 = np.full(self.n, self.h)
        w1[0] = w1[-1] = 0.5 * self.h
        return np.outer(w1, w1)

    def boundary_values(self, arr: np.ndarray) -> np.ndarray:
        idx = self.boundary_nodes
        return arr[..., idx[:, 0], idx[:, 1]]


@dataclass(frozen=True)
class TimeAxis:
    T: float
    n_t: int

    def __post_init__(self):
        if not self.T > 0:
            raise GridError(f"final time must be positive, got {self.T}")
        if self.n_t < 8:
            raise GridError(f"time axis needs n_t >= 8 steps, got {self.n_t}")

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    @cached_property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_t + 1)

    @cached_property
    def weights(self) -> np.ndarray:
        w = np.full(self.n_t + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.complex128)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class SpaceTimeField:
    """Complex samples over every time level and grid node."""

    values: np.ndarray
    grid: SpatialGrid
    axis: TimeAxis
    valid: np.ndarray | None = field(default=None)

    def __post_init__(self):
        vals = _frozen(self.values)
        expected = (self.axis.n_t + 1, self.grid.n, self.grid.n)
        if vals.shape != expected:
            raise GridError(f"field shape {vals.shape} does not match grid/axis {expected}")
        if not np.all(np.isfinite(vals)):
            raise GridError("field contains non-finite values")
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, grid: SpatialGrid, axis: TimeAxis) -> SpaceTimeField:
        return cls(np.zeros((axis.n_t + 1, grid.n, grid.n)), grid, axis)

    @classmethod
    def from_function(cls, fn, grid: SpatialGrid, axis: TimeAxis) -> SpaceTimeField:
        """Sample ``fn(t, x, y)`` (numpy-broadcastable) on the space-time lattice."""
        X, Y = grid.coords
        t = axis.t[:, None, None]
        vals = np.broadcast_to(fn(t, X[None], Y[None]), (axis.n_t + 1, grid.n, grid.n))
        return cls(np.array(vals, dtype=np.complex128), grid, axis)

    def like(self, values: np.ndarray) -> SpaceTimeField:
        return SpaceTimeField(values, self.grid, self.axis)

    def __getitem__(self, k) -> np.ndarray:
        return self.values[k]

    def _coerce(self, other):
        if isinstance(other, SpaceTimeField):
            if other.grid != self.grid or other.axis != self.axis:
                raise GridError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return self.like(self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.like(self.values - self._coerce(other))

    def __rsub__(self, other):
        return self.like(self._coerce(other) - self.values)

    def __mul__(self, other):
        return self.like(self.values * self._coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.like(-self.values)

    def reflect_time(self) -> SpaceTimeField:
        return self.like(self.values[::-1])

    def l2_norm(self) -> float:
        return float(np.sqrt(integrate(self.like(np.abs(self.values) ** 2)).real))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


@dataclass(frozen=True, eq=False)
class BoundaryTimeTrace:
    """Values per (time level, boundary node), nodes in ``grid.boundary_nodes`` order."""

    values: np.ndarray
    grid: SpatialGrid
    axis: TimeAxis

    def __post_init__(self):
        vals = _frozen(self.values)
        expected = (self.axis.n_t + 1, len(self.grid.boundary_nodes))
        if vals.shape != expected:
            raise GridError(f"trace shape {vals.shape} does not match {expected}")
        if not np.all(np.isfinite(vals)):
            raise GridError("trace contains non-finite values")
        object.__setattr__(self, "values", vals)

    @classmethod
    def of(cls, f: SpaceTimeField) -> BoundaryTimeTrace:
        """Dirichlet trace of a field."""
        return cls(f.grid.boundary_values(f.values), f.grid, f.axis)

    @classmethod
    def zeros(cls, grid: SpatialGrid, axis: TimeAxis) -> BoundaryTimeTrace:
        return cls(np.zeros((axis.n_t + 1, len(grid.boundary_nodes))), grid, axis)

    def __sub__(self, other: BoundaryTimeTrace) -> BoundaryTimeTrace:
        return BoundaryTimeTrace(self.values - other.values, self.grid, self.axis)

    def __add__(self, other: BoundaryTimeTrace) -> BoundaryTimeTrace:
        return BoundaryTimeTrace(self.values + other.values, self.grid, self.axis)

    def __mul__(self, c) -> BoundaryTimeTrace:
        return BoundaryTimeTrace(self.values * c, self.grid, self.axis)

    __rmul__ = __mul__

    def reflect_time(self) -> BoundaryTimeTrace:
        return BoundaryTimeTrace(self.values[::-1], self.grid, self.axis)


@dataclass(frozen=True, eq=False)
class Phantom:
    q: SpaceTimeField
    beta: SpaceTimeField
    beta_boundary_flat: bool = False
    flat_order: int = 2

    def __post_init__(self):
        for name in ("q", "beta"):
            f = getattr(self, name)
            if np.max(np.abs(f.values.imag)) > 0:
                raise GridError(f"phantom {name} must be real")
        if self.beta_boundary_flat:
            bvals = self.beta.grid.boundary_values(self.beta.values[: self.flat_order + 1])
            if np.max(np.abs(bvals)) > 1e-14:
                raise GridError("beta_boundary_flat set but beta does not vanish on the boundary at early times")


# ---------------------------------------------------------------------------
# stencils on raw arrays (last two axes are space)


def laplacian_array(u: np.ndarray, h: float) -> np.ndarray:
    """5-point Laplacian on interior nodes; boundary entries are zero."""
    out = np.zeros_like(u)
    out[..., 1:-1, 1:-1] = (
        u[..., 2:, 1:-1] + u[..., :-2, 1:-1] + u[..., 1:-1, 2:] + u[..., 1:-1, :-2] - 4.0 * u[..., 1:-1, 1:-1]
    ) / h**2
    return out


def _d2_axis(u: np.ndarray, h: float, axis: int) -> np.ndarray:
    u = np.moveaxis(u, axis, -1)
    out = np.empty_like(u)
    out[..., 1:-1] = (u[..., 2:] - 2 * u[..., 1:-1] + u[..., :-2]) / h**2
    out[..., 0] = (2 * u[..., 0] - 5 * u[..., 1] + 4 * u[..., 2] - u[..., 3]) / h**2
    out[..., -1] = (2 * u[..., -1] - 5 * u[..., -2] + 4 * u[..., -3] - u[..., -4]) / h**2
    return np.moveaxis(out, -1, axis)


def _d1_axis(u: np.ndarray, h: float, axis: int) -> np.ndarray:
    u = np.moveaxis(u, axis, -1)
    out = np.empty_like(u)
    out[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2 * h)
    out[..., 0] = (-3 * u[..., 0] + 4 * u[..., 1] - u[..., 2]) / (2 * h)
    out[..., -1] = (3 * u[..., -1] - 4 * u[..., -2] + u[..., -3]) / (2 * h)
    return np.moveaxis(out, -1, axis)


def laplacian_extended(u: np.ndarray, h: float) -> np.ndarray:
    """Second-order Laplacian at every node (one-sided second differences on the boundary).

    Agrees with :func:`laplacian_array` on interior nodes.
    """
    return _d2_axis(u, h, -2) + _d2_axis(u, h, -1)


def gradient_array(u: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    return _d1_axis(u, h, -2), _d1_axis(u, h, -1)


def time_derivative(u: np.ndarray, dt: float, order: int = 1) -> np.ndarray:
    """Second-order accurate d/dt or d^2/dt^2 along axis 0, one-sided at both ends."""
    if order == 1:
        return _d1_axis(u, dt, 0)
    if order == 2:
        return _d2_axis(u, dt, 0)
    raise ValueError(order)


# ---------------------------------------------------------------------------
# public operations

DIFF_KINDS = ("laplacian", "grad_dot", "dt", "dt2", "dt_laplacian")


def differential_apply(kind: str, f: SpaceTimeField, omega=None) -> SpaceTimeField:
    """Apply a discrete differential operator to a space-time field.

    ``laplacian`` and ``dt_laplacian`` are only defined on interior nodes; the
    returned field then carries ``valid`` marking the boundary as invalid (and
    holds zeros there).
    """
    h, dt = f.grid.h, f.axis.dt
    u = f.values
    if kind == "laplacian":
        out = f.like(laplacian_array(u, h))
    elif kind == "dt_laplacian":
        out = f.like(laplacian_array(time_derivative(u, dt, 1), h))
    elif kind == "grad_dot":
        if omega is None:
            raise ValueError("grad_dot requires a direction omega")
        om = np.asarray(omega, dtype=float)
        gx, gy = gradient_array(u, h)
        return f.like(om[0] * gx + om[1] * gy)
    elif kind == "dt":
        return f.like(time_derivative(u, dt, 1))
    elif kind == "dt2":
        return f.like(time_derivative(u, dt, 2))
    else:
        raise ValueError(f"unknown operator kind {kind!r}; expected one of {DIFF_KINDS}")
    return SpaceTimeField(out.values, f.grid, f.axis, valid=f.grid.interior_mask)


def normal_derivative_array(u: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    """Outward normal derivative at boundary nodes, second-order one-sided stencils."""
    h = grid.h
    n = grid.n
    # derivative along +x / +y at the low and high edges
    dx_lo = (-3 * u[..., 0, :] + 4 * u[..., 1, :] - u[..., 2, :]) / (2 * h)
    dx_hi = (3 * u[..., n - 1, :] - 4 * u[..., n - 2, :] + u[..., n - 3, :]) / (2 * h)
    dy_lo = (-3 * u[..., :, 0] + 4 * u[..., :, 1] - u[..., :, 2]) / (2 * h)
    dy_hi = (3 * u[..., :, n - 1] - 4 * u[..., :, n - 2] + u[..., :, n - 3]) / (2 * h)

    idx = grid.boundary_nodes
    nu = grid.outward_normal
    i, j = idx[:, 0], idx[:, 1]
    gx = np.zeros(u.shape[:-2] + (len(idx),), dtype=u.dtype)
    gy = np.zeros_like(gx)
    lo_x, hi_x = i == 0, i == n - 1
    lo_y, hi_y = j == 0, j == n - 1
    gx[..., lo_x] = dx_lo[..., j[lo_x]]
    gx[..., hi_x] = dx_hi[..., j[hi_x]]
    gy[..., lo_y] = dy_lo[..., i[lo_y]]
    gy[..., hi_y] = dy_hi[..., i[hi_y]]
    return nu[:, 0] * gx + nu[:, 1] * gy


def normal_derivative_matrix(grid: SpatialGrid):
    """Sparse (nb, n*n) matrix of :func:`normal_derivative_array` acting on flattened nodes."""
    import scipy.sparse as sp

    n, h = grid.n, grid.h
    idx = grid.boundary_nodes
    nu = grid.outward_normal
    rows, cols, vals = [], [], []
    for r, ((i, j), (nx, ny)) in enumerate(zip(idx, nu)):
        # x-direction stencil at the low / high edge, y-direction likewise
        if i == 0 or i == n - 1:
            s = 1.0 if i == 0 else -1.0
            for step, c in ((0, -3.0), (1, 4.0), (2, -1.0)):
                ii = i + step if i == 0 else i - step
                rows.append(r), cols.append(ii * n + j), vals.append(nx * s * c / (2 * h))
        if j == 0 or j == n - 1:
            s = 1.0 if j == 0 else -1.0
            for step, c in ((0, -3.0), (1, 4.0), (2, -1.0)):
                jj = j + step if j == 0 else j - step
                rows.append(r), cols.append(i * n + jj), vals.append(ny * s * c / (2 * h))
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(idx), n * n))


def neumann_trace(f: SpaceTimeField) -> BoundaryTimeTrace:
    return BoundaryTimeTrace(normal_derivative_array(f.values, f.grid), f.grid, f.axis)


def integrate(f: SpaceTimeField, region: str = "spacetime", t_index: int | None = None) -> complex:
    """Trapezoidal quadrature over space at one time level or over all of space-time."""
    w = f.grid.quadrature_weights
    if region == "space":
        if t_index is None or not -len(f.axis.t) <= t_index < len(f.axis.t):
            raise IndexError(f"t_index {t_index} out of range for {f.axis.n_t + 1} levels")
        return complex(np.sum(w * f.values[t_index]))
    if region != "spacetime":
        raise ValueError(f"unknown region {region!r}")
    per_slice = np.einsum("kij,ij->k", f.values, w)
    return complex(np.dot(f.axis.weights, per_slice))


def integrate_boundary(values: np.ndarray, grid: SpatialGrid, axis: TimeAxis) -> complex:
    """Trapezoid over (time x perimeter) of an array shaped like a trace."""
    return complex(np.dot(axis.weights, values @ grid.boundary_weights))


# ---------------------------------------------------------------------------
# file formats


def write_field(path, f: SpaceTimeField) -> None:
    header = MAGIC + struct.pack("<IIId", FORMAT_VERSION, f.grid.n, f.axis.n_t, f.axis.T)
    data = np.empty(f.values.shape + (2,), dtype="<f8")
    data[..., 0] = f.values.real
    data[..., 1] = f.values.imag
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes(order="C"))


def read_field(path) -> SpaceTimeField:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise GridError(f"{path}: bad magic {raw[:4]!r}")
    version, n, n_t, T = struct.unpack("<IIId", raw[4:24])
    if version != FORMAT_VERSION:
        raise GridError(f"{path}: unsupported format version {version}")
    data = np.frombuffer(raw[24:], dtype="<f8").reshape(n_t + 1, n, n, 2)
    return SpaceTimeField(data[..., 0] + 1j * data[..., 1], SpatialGrid(n), TimeAxis(T, n_t))


def write_trace_csv(path, trace: BoundaryTimeTrace) -> None:
    pts = trace.grid.boundary_points
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "node_x", "node_y", "re", "im"])
        for k, t in enumerate(trace.axis.t):
            for b, (px, py) in enumerate(pts):
                v = trace.values[k, b]
                w.writerow([repr(float(t)), repr(float(px)), repr(float(py)), repr(float(v.real)), repr(float(v.imag))])


def read_trace_csv(path, grid: SpatialGrid, axis: TimeAxis) -> BoundaryTimeTrace:
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    vals = (data[:, 3] + 1j * data[:, 4]).reshape(axis.n_t + 1, len(grid.boundary_nodes))
    return BoundaryTimeTrace(vals, grid, axis)
