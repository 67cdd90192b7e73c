"""Backstepping gain kernel k(x, y) for u_t = u_xx + lambda(x) u.

The kernel solves the Goursat problem

    k_xx - k_yy = lambda(y) k     on 0 <= y <= x <= 1,
    k(x, 0) = 0,
    k(x, x) = -1/2 int_0^x lambda,

and is produced here by two independent routes: a characteristic
finite-difference march in x, and Picard iteration of the equivalent
integral equation in the rotated variables xi = x + y, eta = x - y.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import (ConvergenceError, InvalidInputError, KernelField, ReactionProfile,
                   UniformGrid1D, cumulative_trapezoid, sup_norm)


class SolveMethod(str, enum.Enum):
    FD_MARCHING = "fd_marching"
    INTEGRAL_FIXED_POINT = "integral_fixed_point"


class NearDiagonal(str, enum.Enum):
    # k(x_{i+1}, y_i) = k(x_i, y_{i-1}) - h/2 lambda_i + h^2/2 lambda_i k(x_i, x_i)
    CHARACTERISTIC = "characteristic"
    # k(x_{i+1}, y_i) = k(x_i, y_i) + h/2 lambda_i, as printed in the FD scheme we adapt
    PRINTED = "printed"


@dataclass(frozen=True)
class GoursatSolveOptions:
    n_points: int = 101
    method: SolveMethod = SolveMethod.FD_MARCHING
    max_iters: int = 500
    tol: float = 1e-10
    near_diagonal: NearDiagonal = NearDiagonal.CHARACTERISTIC

    def __post_init__(self):
        object.__setattr__(self, "method", SolveMethod(self.method))
        object.__setattr__(self, "near_diagonal", NearDiagonal(self.near_diagonal))
        if self.tol <= 0:
            raise InvalidInputError("tol must be positive")
        if self.max_iters < 1:
            raise InvalidInputError("max_iters must be >= 1")
        UniformGrid1D(self.n_points)


@dataclass(frozen=True)
class KernelResidualReport:
    pde_residual_sup: float
    bc_zero_sup: float
    bc_diag_sup: float
    bound_margin: float

    def as_dict(self) -> dict:
        return {
            "pde_residual_sup": self.pde_residual_sup,
            "bc_zero_sup": self.bc_zero_sup,
            "bc_diag_sup": self.bc_diag_sup,
            "bound_margin": self.bound_margin,
        }


def _profile_on(lam: ReactionProfile, n_points: int | None) -> ReactionProfile:
    if n_points is None:
        return lam
    return lam.resample(n_points)


def solve_kernel(lam: ReactionProfile, options: GoursatSolveOptions | None = None) -> KernelField:
    options = options or GoursatSolveOptions(lam.grid.n_points)
    if options.method is SolveMethod.FD_MARCHING:
        return solve_kernel_fd(lam, options.n_points, near_diagonal=options.near_diagonal)
    return solve_kernel_integral(lam, options.n_points, options.max_iters, options.tol)


def solve_kernel_fd(lam: ReactionProfile, n_points: int | None = None,
                    near_diagonal: NearDiagonal | str = NearDiagonal.CHARACTERISTIC) -> KernelField:
    """March the kernel row by row in x.

    Interior nodes use the five-point characteristic stencil with the
    reaction term averaged over the two y-neighbours; the diagonal is the
    running trapezoid of -lambda/2 and column y = 0 is held at zero.
    """
    lam = _profile_on(lam, n_points)
    near_diagonal = NearDiagonal(near_diagonal)
    n = lam.grid.n_points
    h = lam.grid.h
    lv = lam.values
    k = np.zeros((n, n))
    diag = -0.5 * cumulative_trapezoid(lv, h)
    k[0, 0] = diag[0]
    if n > 1:
        k[1, 1] = diag[1]
        k[1, 0] = 0.0
    for i in range(1, n - 1):
        # row i+1 from rows i and i-1; interior j = 1 .. i-1
        if i >= 2:
            j = np.arange(1, i)
            side = k[i, j + 1] + k[i, j - 1]
            k[i + 1, 1:i] = -k[i - 1, 1:i] + side + 0.5 * h * h * lv[1:i] * side
        if near_diagonal is NearDiagonal.CHARACTERISTIC:
            k[i + 1, i] = k[i, i - 1] - 0.5 * h * lv[i] + 0.5 * h * h * lv[i] * k[i, i]
        else:
            k[i + 1, i] = k[i, i] + 0.5 * h * lv[i]
        k[i + 1, i + 1] = diag[i + 1]
        k[i + 1, 0] = 0.0
    return KernelField.from_dense(k)


def solve_kernel_integral(lam: ReactionProfile, n_points: int | None = None,
                          max_iters: int = 500, tol: float = 1e-10,
                          return_history: bool = False):
    """Successive approximation of the integral equation for G(xi, eta) = k(x, y).

        G(xi, eta) = -1/4 int_eta^xi lambda(s/2) ds
                     + 1/4 int_eta^xi int_0^eta lambda((sigma - s)/2) G(sigma, s) ds dsigma

    on a (xi, eta) lattice of spacing h, so that (x_i, y_j) sits at
    (xi, eta) index (i + j, i - j). Lambda at half-integer x positions is
    linearly interpolated. Both integrals use the trapezoid rule.
    """
    lam = _profile_on(lam, n_points)
    n = lam.grid.n_points
    h = lam.grid.h
    na = 2 * (n - 1) + 1          # xi index 0..2(n-1)
    nb = n                        # eta index 0..n-1
    half = np.interp(np.arange(na) * 0.5 * h, lam.grid.nodes, lam.values)  # lambda(m h / 2)

    a = np.arange(na)[:, None]
    b = np.arange(nb)[None, :]
    inside = (b <= a) & (a + b <= 2 * (n - 1))
    lam_sig = np.where(inside, half[np.clip(a - b, 0, na - 1)], 0.0)  # lambda((sigma - s)/2)

    # forcing: -1/4 int_eta^xi lambda(s/2) ds
    c = cumulative_trapezoid(half, h)
    forcing = np.where(inside, -0.25 * (c[a] - c[np.minimum(b, na - 1)]), 0.0)

    G = np.zeros((na, nb))
    history = []
    last = np.inf
    for it in range(1, max_iters + 1):
        F = lam_sig * G
        # H[a, b] = int_0^{eta_b} F(sigma_a, s) ds
        H = np.zeros_like(F)
        H[:, 1:] = np.cumsum(0.5 * h * (F[:, 1:] + F[:, :-1]), axis=1)
        # C[a, b] = int_0^{xi_a} H(sigma, b) dsigma; double integral = C[a, b] - C[b, b]
        C = np.zeros_like(H)
        C[1:, :] = np.cumsum(0.5 * h * (H[1:, :] + H[:-1, :]), axis=0)
        Cbb = C[np.arange(nb), np.arange(nb)]
        G_new = np.where(inside, forcing + 0.25 * (C - Cbb[None, :]), 0.0)
        last = float(np.max(np.abs(G_new - G)))
        history.append(last)
        G = G_new
        if last <= tol:
            break
    else:
        raise ConvergenceError(f"integral kernel solve did not converge in {max_iters} iterations",
                               last)

    i, j = np.tril_indices(n)
    field = KernelField(lam.grid, G[i + j, i - j])
    if return_history:
        return field, history
    return field


def _second_difference_residual(k: np.ndarray, lv: np.ndarray, h: float):
    """(k_xx - k_yy - lambda(y) k) at interior nodes, centered stencils.

    Interior means 2 <= j <= i - 2 and i <= n - 2, so every stencil
    point is a genuine triangle node and nodes adjacent to y = 0, the
    diagonal and x = 1 are left out. Returns (residual, mask) as dense arrays.
    """
    n = k.shape[0]
    res = np.zeros_like(k)
    mask = np.zeros(k.shape, dtype=bool)
    if n < 6:
        return res, mask
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    mask = (j >= 2) & (j <= i - 2) & (i <= n - 2)
    kxx = np.zeros_like(k)
    kyy = np.zeros_like(k)
    kxx[1:-1, :] = k[2:, :] - 2 * k[1:-1, :] + k[:-2, :]
    kyy[:, 1:-1] = k[:, 2:] - 2 * k[:, 1:-1] + k[:, :-2]
    res = np.where(mask, (kxx - kyy) / (h * h) - lv[None, :] * k, 0.0)
    return res, mask


def diagonal_derivative(diag: np.ndarray, h: float) -> np.ndarray:
    """d/dx of k(x, x): second-order centered inside, second-order one-sided at the ends."""
    return np.gradient(diag, h, edge_order=2)


def kernel_bound(lam_bar: float, x: np.ndarray) -> np.ndarray:
    """Pointwise bound lam_bar * exp(2 lam_bar x) on |k(x, y)|."""
    return lam_bar * np.exp(2.0 * lam_bar * x)


def kernel_residuals(k: KernelField, lam: ReactionProfile) -> KernelResidualReport:
    if k.grid != lam.grid:
        raise InvalidInputError("kernel and lambda must share a grid")
    h = k.grid.h
    d = k._dense
    res, mask = _second_difference_residual(d, lam.values, h)
    pde = float(np.max(np.abs(res[mask]))) if mask.any() else 0.0
    bc_zero = sup_norm(k.first_column)
    bc_diag = sup_norm(k.diagonal + 0.5 * cumulative_trapezoid(lam.values, h))
    i, _ = np.tril_indices(k.grid.n_points)
    x = k.grid.nodes[i]
    margin = float(np.min(kernel_bound(lam.sup_norm, x) - np.abs(k.values)))
    return KernelResidualReport(pde, bc_zero, bc_diag, margin)


def inverse_kernel(k_hat: KernelField, max_iters: int = 500, tol: float = 1e-12) -> KernelField:
    """Kernel l of the inverse transform, u = w + int_0^x l(x, y) w(y) dy.

    Picard iteration on l(x, y) = k(x, y) + int_y^x k(x, s) l(s, y) ds with
    the inner integral by the trapezoid rule.
    """
    h = k_hat.grid.h
    K = k_hat._dense
    dK = np.diagonal(K)
    L = np.zeros_like(K)
    last = np.inf
    for _ in range(max_iters):
        # full-weight sum over s in [y, x], minus half of each endpoint term
        integral = h * (K @ L - 0.5 * K * np.diagonal(L)[None, :] - 0.5 * dK[:, None] * L)
        L_new = np.tril(K + integral)
        last = float(np.max(np.abs(L_new - L)))
        L = L_new
        if last <= tol:
            return KernelField.from_dense(L)
    raise ConvergenceError(f"inverse kernel did not converge in {max_iters} iterations", last)


def volterra_apply(kernel: KernelField, u: np.ndarray, sign: float = -1.0) -> np.ndarray:
    """u(x) + sign * int_0^x kernel(x, y) u(y) dy, trapezoid rule row by row."""
    h = kernel.grid.h
    K = kernel._dense
    u = np.asarray(u, dtype=np.float64)
    integral = h * (K @ u - 0.5 * K[:, 0] * u[0] - 0.5 * np.diagonal(K) * u)
    return u + sign * integral
