"""Grids, triangular kernel storage, quadrature and norms shared by every module."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class InvalidInputError(ValueError):
    """Malformed or inconsistent numerical input."""


class DomainError(ValueError):
    """Query point outside the triangle 0 <= y <= x <= 1."""


class ConvergenceError(RuntimeError):
    """A fixed-point iteration did not reach its tolerance."""

    def __init__(self, message: str, last_change: float):
        super().__init__(f"{message} (last sup change {last_change:.3e})")
        self.last_change = last_change


@dataclass(frozen=True)
class UniformGrid1D:
    """Uniform grid of ``n_points`` nodes spanning [0, 1]."""

    n_points: int

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 3:
            raise InvalidInputError(f"n_points must be an integer >= 3, got {self.n_points}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n_points - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_points)

    @property
    def n_triangle(self) -> int:
        return self.n_points * (self.n_points + 1) // 2


@dataclass(frozen=True, eq=False)
class ReactionProfile:
    """Samples of the reaction coefficient lambda(x) on a uniform grid."""

    grid: UniformGrid1D
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.n_points,):
            raise InvalidInputError(
                f"expected {self.grid.n_points} lambda samples, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("lambda samples must be finite")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, fn, n_points: int) -> "ReactionProfile":
        grid = UniformGrid1D(n_points)
        return cls(grid, np.asarray(fn(grid.nodes), dtype=np.float64) * np.ones(n_points))

    @classmethod
    def constant(cls, c: float, n_points: int) -> "ReactionProfile":
        return cls(UniformGrid1D(n_points), np.full(n_points, float(c)))

    @property
    def sup_norm(self) -> float:
        return sup_norm(self.values)

    def resample(self, n_points: int) -> "ReactionProfile":
        """Linear interpolation onto another uniform grid."""
        if n_points == self.grid.n_points:
            return self
        grid = UniformGrid1D(n_points)
        return ReactionProfile(grid, np.interp(grid.nodes, self.grid.nodes, self.values))

    def __call__(self, x):
        return np.interp(x, self.grid.nodes, self.values)


def tril_indices(n_points: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major (i, j) indices of the lower triangle j <= i."""
    return np.tril_indices(n_points)


@dataclass(frozen=True, eq=False)
class KernelField:
    """Kernel k(x_i, y_j) on the lower-triangular grid, packed row-major.

    Row ``i`` holds ``k(x_i, y_0) .. k(x_i, y_i)``; the packed vector has
    ``n_points * (n_points + 1) / 2`` entries.
    """

    grid: UniformGrid1D
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.n_triangle,):
            raise InvalidInputError(
                f"expected {self.grid.n_triangle} triangle values, got shape {v.shape}")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "KernelField":
        dense = np.asarray(dense, dtype=np.float64)
        n = dense.shape[0]
        if dense.shape != (n, n):
            raise InvalidInputError("dense kernel must be square")
        return cls(UniformGrid1D(n), dense[tril_indices(n)])

    @classmethod
    def zeros(cls, n_points: int) -> "KernelField":
        grid = UniformGrid1D(n_points)
        return cls(grid, np.zeros(grid.n_triangle))

    @cached_property
    def _dense(self) -> np.ndarray:
        n = self.grid.n_points
        out = np.zeros((n, n))
        out[tril_indices(n)] = self.values
        out.flags.writeable = False
        return out

    def dense(self) -> np.ndarray:
        """Square array with zeros above the diagonal (a writable copy)."""
        return self._dense.copy()

    def row(self, i: int) -> np.ndarray:
        """k(x_i, y_j) for j = 0..i."""
        start = i * (i + 1) // 2
        return self.values[start:start + i + 1]

    @property
    def gain(self) -> np.ndarray:
        """Feedback gain k(1, y) on the full grid."""
        return self.row(self.grid.n_points - 1)

    @property
    def diagonal(self) -> np.ndarray:
        return np.diagonal(self._dense).copy()

    @property
    def first_column(self) -> np.ndarray:
        return self._dense[:, 0].copy()

    @property
    def sup_norm(self) -> float:
        return sup_norm(self.values)

    def __call__(self, x: float, y: float) -> float:
        return triangle_interpolate(self, x, y)


@dataclass(frozen=True, eq=False)
class PdeState:
    """Spatial profile u(x_i, t) at time ``t``."""

    grid: UniformGrid1D
    u: np.ndarray
    t: float = 0.0
    dirichlet_left: bool = field(default=True, repr=False)

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        if u.shape != (self.grid.n_points,):
            raise InvalidInputError(f"state must have {self.grid.n_points} entries, got {u.shape}")
        if not np.all(np.isfinite(u)):
            raise InvalidInputError("state must be finite")
        if self.dirichlet_left and u[0] != 0.0:
            raise InvalidInputError("u(0, t) must vanish under the Dirichlet condition")
        object.__setattr__(self, "u", u)


def trapezoid(values, h: float) -> float:
    """Composite trapezoid rule with uniform spacing ``h``."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise InvalidInputError("trapezoid needs a 1-D vector of length >= 2")
    return float(h * (v.sum() - 0.5 * (v[0] + v[-1])))


def cumulative_trapezoid(values, h: float) -> np.ndarray:
    """Running trapezoid integral, starting at 0 on the first node."""
    v = np.asarray(values, dtype=np.float64)
    out = np.zeros_like(v)
    out[1:] = np.cumsum(0.5 * h * (v[1:] + v[:-1]))
    return out


def l2_norm(state: PdeState | np.ndarray, h: float | None = None) -> float:
    """L2(0,1) norm by the trapezoid rule."""
    if isinstance(state, PdeState):
        u, h = state.u, state.grid.h
    else:
        u = np.asarray(state, dtype=np.float64)
        if h is None:
            h = 1.0 / (u.size - 1)
    return float(np.sqrt(max(trapezoid(u * u, h), 0.0)))


def sup_norm(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise InvalidInputError("sup_norm of an empty array")
    return float(np.max(np.abs(v)))


def triangle_interpolate(field: KernelField, x: float, y: float) -> float:
    """Interpolate ``field`` at (x, y) with 0 <= y <= x <= 1.

    Bilinear inside full cells; cells cut by the diagonal use linear
    interpolation on their lower half, so no value above the diagonal is
    ever touched.
    """
    tol = 1e-14
    if not (-tol <= y <= x + tol and x <= 1.0 + tol):
        raise DomainError(f"({x}, {y}) is outside 0 <= y <= x <= 1")
    n = field.grid.n_points
    h = field.grid.h
    x = min(max(x, 0.0), 1.0)
    y = min(max(y, 0.0), x)
    d = field._dense

    fi, fj = x / h, y / h
    i0 = min(int(np.floor(fi)), n - 2)
    j0 = min(int(np.floor(fj)), n - 2)
    tx, ty = fi - i0, fj - j0

    if j0 < i0:
        return float((1 - tx) * (1 - ty) * d[i0, j0] + tx * (1 - ty) * d[i0 + 1, j0]
                     + (1 - tx) * ty * d[i0, j0 + 1] + tx * ty * d[i0 + 1, j0 + 1])
    # diagonal cell: barycentric on the lower triangle (i0,i0), (i0+1,i0), (i0+1,i0+1)
    return float((1 - tx) * d[i0, i0] + (tx - ty) * d[i0 + 1, i0] + ty * d[i0 + 1, i0 + 1])
