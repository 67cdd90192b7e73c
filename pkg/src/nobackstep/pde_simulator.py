"""Time-domain simulation of u_t = u_xx + lambda(x) u, u(0,t) = 0, u(1,t) = U(t).

Covers the open-loop plant, full-state backstepping feedback, the
flux-injection observer and their output-feedback composition. Time
stepping is implicit (Crank-Nicolson or backward Euler) on the interior
nodes; the Dirichlet input enters through the last interior row.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import lapack, lu_factor, lu_solve

from .core import (InvalidInputError, KernelField, PdeState, ReactionProfile, UniformGrid1D,
                   l2_norm, trapezoid)
from .kernel_solver import volterra_apply


class Stepper(str, enum.Enum):
    BACKWARD_EULER = "backward_euler"
    CRANK_NICOLSON = "crank_nicolson"


@dataclass(frozen=True)
class SimulationConfig:
    n_points: int = 101
    dt: float = 1e-4
    T: float = 1.0
    stepper: Stepper = Stepper.CRANK_NICOLSON
    initial: object = "constant10"
    sample_stride: int = 10
    snapshot_stride: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stepper", Stepper(self.stepper))
        UniformGrid1D(self.n_points)
        if self.dt <= 0:
            raise InvalidInputError("dt must be positive")
        if self.T < self.dt:
            raise InvalidInputError("T must be at least dt")
        if self.sample_stride < 1 or self.snapshot_stride < 0:
            raise InvalidInputError("sample_stride >= 1 and snapshot_stride >= 0 required")

    @property
    def grid(self) -> UniformGrid1D:
        return UniformGrid1D(self.n_points)

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def initial_state(self, initial=None) -> PdeState:
        return initial_condition(self.initial if initial is None else initial, self.n_points)


def initial_condition(spec, n_points: int, scale: float = 1.0) -> PdeState:
    """Named preset ("constant10", "constant20", "sin") or an explicit vector.

    Presets are pinned to zero at x = 0; the value carried at x = 1 only
    enters the first explicit half-step.
    """
    grid = UniformGrid1D(n_points)
    x = grid.nodes
    if isinstance(spec, str):
        if spec.startswith("constant"):
            level = float(spec[len("constant"):] or 1.0)
            u = np.full(n_points, level)
        elif spec == "sin":
            u = np.sin(np.pi * x)
        else:
            raise InvalidInputError(f"unknown initial condition preset {spec!r}")
    else:
        u = np.asarray(spec, dtype=np.float64)
        if u.shape != (n_points,):
            if u.ndim == 1 and u.size >= 2:
                u = np.interp(x, np.linspace(0, 1, u.size), u)
            else:
                raise InvalidInputError("initial condition vector has the wrong shape")
    u = scale * u
    u[0] = 0.0
    return PdeState(grid, u, 0.0)


@dataclass
class SimulationTrace:
    times: np.ndarray
    l2_norms: np.ndarray
    control: np.ndarray
    err_norms: np.ndarray | None = None
    snapshot_times: np.ndarray | None = None
    snapshots: np.ndarray | None = None
    observer_snapshots: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.times)
        if len(self.l2_norms) != n or len(self.control) != n:
            raise InvalidInputError("trace columns must have equal length")
        if self.err_norms is not None and len(self.err_norms) != n:
            raise InvalidInputError("trace columns must have equal length")

    def write_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = ["t", "l2_norm", "control"]
            if self.err_norms is not None:
                header.append("err_norm")
            w.writerow(header)
            for k in range(len(self.times)):
                row = [repr(float(self.times[k])), repr(float(self.l2_norms[k])),
                       repr(float(self.control[k]))]
                if self.err_norms is not None:
                    row.append(repr(float(self.err_norms[k])))
                w.writerow(row)

    def write_snapshots(self, path, which: str = "plant") -> None:
        data = self.snapshots if which == "plant" else self.observer_snapshots
        if data is None:
            raise InvalidInputError(f"trace has no {which} snapshots")
        np.savetxt(path, data, delimiter=",", fmt="%.17g")

    @classmethod
    def read_csv(cls, path) -> "SimulationTrace":
        with Path(path).open() as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=np.float64).reshape(-1, len(rows[0]))
        err = body[:, 3] if "err_norm" in header else None
        return cls(body[:, 0], body[:, 1], body[:, 2], err)


class _Tridiagonal:
    """Prefactored (I - theta dt A) for A = D2 + diag(lambda) on interior nodes."""

    def __init__(self, lam: np.ndarray, h: float, dt: float, stepper: Stepper):
        self.h = h
        self.dt = dt
        self.stepper = stepper
        self.theta = 0.5 if stepper is Stepper.CRANK_NICOLSON else 1.0
        interior = lam[1:-1]
        m = interior.size
        self.main_A = -2.0 / h**2 + interior
        self.off_A = np.full(m - 1, 1.0 / h**2)
        th = self.theta * dt
        dl = -th * self.off_A
        d = 1.0 - th * self.main_A
        du = -th * self.off_A
        self.lu = lapack.dgttrf(dl, d, du)
        if self.lu[-1] != 0:
            raise AssertionError("singular implicit step matrix")

    def apply_A(self, v: np.ndarray) -> np.ndarray:
        out = self.main_A * v
        out[:-1] += self.off_A * v[1:]
        out[1:] += self.off_A * v[:-1]
        return out

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        dl, d, du, du2, ipiv, _ = self.lu
        x, info = lapack.dgttrs(dl, d, du, du2, ipiv, rhs)
        return x

    def step(self, u: np.ndarray, u_right_new: float, source_old=None, source_new=None):
        """Advance full-grid vector ``u`` one step with new boundary value ``u_right_new``."""
        h2 = self.h**2
        v = u[1:-1]
        dt = self.dt
        rhs = v.copy()
        if self.stepper is Stepper.CRANK_NICOLSON:
            rhs += 0.5 * dt * self.apply_A(v)
            rhs[-1] += 0.5 * dt * (u[-1] + u_right_new) / h2
            if source_old is not None:
                rhs += 0.5 * dt * (source_old + source_new)
        else:
            rhs[-1] += dt * u_right_new / h2
            if source_new is not None:
                rhs += dt * source_new
        out = np.empty_like(u)
        out[0] = 0.0
        out[1:-1] = self.solve(rhs)
        out[-1] = u_right_new
        return out


def step_plant(state: PdeState, lam: ReactionProfile, U_now: float, dt: float,
               stepper: Stepper | str = Stepper.CRANK_NICOLSON) -> PdeState:
    if state.grid != lam.grid:
        raise InvalidInputError("state and lambda must share a grid")
    solver = _Tridiagonal(lam.values, state.grid.h, dt, Stepper(stepper))
    return PdeState(state.grid, solver.step(state.u, float(U_now)), state.t + dt)


def full_state_control(gain_row: np.ndarray, state: PdeState) -> float:
    """U = int_0^1 k(1, y) u(y) dy by the trapezoid rule."""
    gain_row = np.asarray(gain_row, dtype=np.float64)
    if gain_row.shape != state.u.shape:
        raise InvalidInputError("gain row and state must share a grid")
    return trapezoid(gain_row * state.u, state.grid.h)


def boundary_flux(u: np.ndarray, h: float) -> float:
    """u_x(1) by the one-sided second-order stencil."""
    return (3.0 * u[-1] - 4.0 * u[-2] + u[-3]) / (2.0 * h)


class _Recorder:
    def __init__(self, config: SimulationConfig, observer: bool = False):
        self.cfg = config
        self.observer = observer
        self.times, self.norms, self.control, self.errs = [], [], [], []
        self.snap_t, self.snaps, self.obs_snaps = [], [], []

    def record(self, step: int, t: float, u: np.ndarray, U: float, u_hat=None, force=False):
        h = self.cfg.grid.h
        if step % self.cfg.sample_stride == 0 or force:
            self.times.append(t)
            self.norms.append(l2_norm(u, h))
            self.control.append(U)
            if u_hat is not None:
                self.errs.append(l2_norm(u - u_hat, h))
        if self.cfg.snapshot_stride and (step % self.cfg.snapshot_stride == 0 or force):
            self.snap_t.append(t)
            self.snaps.append(u.copy())
            if u_hat is not None:
                self.obs_snaps.append(u_hat.copy())

    def trace(self, **meta) -> SimulationTrace:
        snaps = np.array(self.snaps) if self.snaps else None
        return SimulationTrace(
            np.array(self.times), np.array(self.norms), np.array(self.control),
            np.array(self.errs) if self.observer else None,
            np.array(self.snap_t) if self.snaps else None, snaps,
            np.array(self.obs_snaps) if self.obs_snaps else None, dict(meta))


def _check(lam: ReactionProfile, k_hat: KernelField | None, config: SimulationConfig):
    if lam.grid.n_points != config.n_points:
        lam = lam.resample(config.n_points)
    if k_hat is not None and k_hat.grid.n_points != config.n_points:
        raise InvalidInputError("kernel grid does not match the simulation grid")
    return lam


def simulate_open_loop(lam: ReactionProfile, config: SimulationConfig,
                       U_signal: Callable[[float], float] | None = None, u0=None
                       ) -> SimulationTrace:
    lam = _check(lam, None, config)
    stepper = _Tridiagonal(lam.values, config.grid.h, config.dt, config.stepper)
    u = config.initial_state(u0).u.copy()
    U = 0.0 if U_signal is None else float(U_signal(0.0))
    rec = _Recorder(config)
    rec.record(0, 0.0, u, U)
    n = config.n_steps
    for s in range(1, n + 1):
        t = s * config.dt
        U = 0.0 if U_signal is None else float(U_signal(t))
        u = stepper.step(u, U)
        rec.record(s, t, u, U, force=(s == n))
    return rec.trace(mode="open")


def simulate_closed_loop(lam: ReactionProfile, k_hat: KernelField, config: SimulationConfig,
                         u0=None) -> SimulationTrace:
    """Full-state feedback U(t) = int_0^1 k_hat(1, y) u(y, t) dy, sampled at step start."""
    lam = _check(lam, k_hat, config)
    h = config.grid.h
    stepper = _Tridiagonal(lam.values, h, config.dt, config.stepper)
    gain = k_hat.gain
    u = config.initial_state(u0).u.copy()
    U = trapezoid(gain * u, h)
    rec = _Recorder(config)
    rec.record(0, 0.0, u, U)
    n = config.n_steps
    for s in range(1, n + 1):
        U = trapezoid(gain * u, h)
        u = stepper.step(u, U)
        rec.record(s, s * config.dt, u, U, force=(s == n))
    return rec.trace(mode="closed")


class _Observer:
    """Implicit step for u_hat_t = u_hat_xx + lambda u_hat + q(x) [u_x(1) - u_hat_x(1)].

    With q(x) = k(1, x) the error e = u - u_hat obeys
    e_t = e_xx + lambda e - k(1, x) e_x(1), which the transform
    e = w - int_x^1 k(y, x) w(y) dy maps onto the heat equation.
    The u_hat_x(1) part of the injection couples every interior row to the
    last two interior unknowns, so the step matrix is factored densely.
    """

    def __init__(self, lam: np.ndarray, gain: np.ndarray, h: float, dt: float, stepper: Stepper,
                 gain_sign: float = 1.0):
        self.h, self.dt = h, dt
        self.theta = 0.5 if stepper is Stepper.CRANK_NICOLSON else 1.0
        m = lam.size - 2
        q = gain_sign * gain[1:-1]
        A = (np.diag(np.full(m, -2.0 / h**2) + lam[1:-1])
             + np.diag(np.full(m - 1, 1.0 / h**2), 1) + np.diag(np.full(m - 1, 1.0 / h**2), -1))
        # -q u_hat_x(1) with u_hat_x(1) = (3 U - 4 v[-1] + v[-2]) / (2h); the U part is affine
        A[:, -1] += q * 4.0 / (2 * h)
        A[:, -2] -= q / (2 * h)
        self.A = A
        self.q = q
        self.lu = lu_factor(np.eye(m) - self.theta * dt * A)

    def affine(self, U: float, plant_flux: float) -> np.ndarray:
        f = self.q * (plant_flux - 3.0 * U / (2 * self.h))
        f[-1] += U / self.h**2
        return f

    def step(self, u_hat, U_old, U_new, flux_old, flux_new):
        v = u_hat[1:-1]
        dt = self.dt
        if self.theta == 0.5:
            rhs = v + 0.5 * dt * (self.A @ v + self.affine(U_old, flux_old)
                                  + self.affine(U_new, flux_new))
        else:
            rhs = v + dt * self.affine(U_new, flux_new)
        out = np.empty_like(u_hat)
        out[0] = 0.0
        out[1:-1] = lu_solve(self.lu, rhs)
        out[-1] = U_new
        return out


def _envelope_violations(times, norms, M: float) -> int:
    from .analysis import count_envelope_violations
    return count_envelope_violations(np.asarray(times), np.asarray(norms), M)


def simulate_observer(lam: ReactionProfile, k_hat: KernelField, plant_config: SimulationConfig,
                      observer_ic, U_signal: Callable[[float], float], u0=None,
                      envelope_M: float | None = None, gain_sign: float = 1.0
                      ) -> SimulationTrace:
    """Co-simulate plant and observer under an open-loop boundary signal.

    The observer measures the plant flux u_x(1, t). ``err_norms`` holds
    ||u - u_hat||; ``meta["envelope_violations"]`` counts samples above
    M e^{-t/2} ||u0 - u_hat0|| with M = M(0, lambda_bar) unless given.
    ``gain_sign=-1`` injects -k_hat(1, x) instead, which destabilizes the
    error dynamics for large enough lambda.
    """
    config = plant_config
    lam = _check(lam, k_hat, config)
    h = config.grid.h
    plant = _Tridiagonal(lam.values, h, config.dt, config.stepper)
    obs = _Observer(lam.values, k_hat.gain, h, config.dt, config.stepper, gain_sign)
    u = config.initial_state(u0).u.copy()
    u_hat = initial_condition(observer_ic, config.n_points).u.copy()
    U = float(U_signal(0.0))
    u[-1] = U
    u_hat[-1] = U
    rec = _Recorder(config, observer=True)
    rec.record(0, 0.0, u, U, u_hat)
    flux = boundary_flux(u, h)
    n = config.n_steps
    for s in range(1, n + 1):
        t = s * config.dt
        U_new = float(U_signal(t))
        u = plant.step(u, U_new)
        flux_new = boundary_flux(u, h)
        u_hat = obs.step(u_hat, U, U_new, flux, flux_new)
        U, flux = U_new, flux_new
        rec.record(s, t, u, U, u_hat, force=(s == n))
    trace = rec.trace(mode="observer")
    if envelope_M is None:
        from .analysis import overshoot_M
        envelope_M = overshoot_M(0.0, lam.sup_norm)
    trace.meta["envelope_M"] = envelope_M
    trace.meta["envelope_violations"] = _envelope_violations(trace.times, trace.err_norms,
                                                             envelope_M)
    return trace


def simulate_output_feedback(lam: ReactionProfile, k_hat: KernelField, u0, u_hat0,
                             config: SimulationConfig) -> SimulationTrace:
    """Observer-based feedback U(t) = int_0^1 k_hat(1, x) u_hat(x, t) dx.

    No stability certificate is attached to this composition.
    """
    lam = _check(lam, k_hat, config)
    h = config.grid.h
    plant = _Tridiagonal(lam.values, h, config.dt, config.stepper)
    obs = _Observer(lam.values, k_hat.gain, h, config.dt, config.stepper)
    gain = k_hat.gain
    u = initial_condition(u0, config.n_points).u.copy()
    u_hat = initial_condition(u_hat0, config.n_points).u.copy()
    u_hat[-1] = u[-1]
    U = trapezoid(gain * u_hat, h)
    rec = _Recorder(config, observer=True)
    rec.record(0, 0.0, u, U, u_hat)
    flux = boundary_flux(u, h)
    U_prev = u[-1]
    n = config.n_steps
    for s in range(1, n + 1):
        U = trapezoid(gain * u_hat, h)
        u = plant.step(u, U)
        flux_new = boundary_flux(u, h)
        u_hat = obs.step(u_hat, U_prev, U, flux, flux_new)
        U_prev, flux = U, flux_new
        rec.record(s, s * config.dt, u, U, u_hat, force=(s == n))
    return rec.trace(mode="output-feedback")


def backstepping_transform(state: PdeState, k_hat: KernelField) -> PdeState:
    """w(x) = u(x) - int_0^x k_hat(x, y) u(y) dy."""
    if state.grid != k_hat.grid:
        raise InvalidInputError("state and kernel must share a grid")
    return PdeState(state.grid, volterra_apply(k_hat, state.u, -1.0), state.t)
