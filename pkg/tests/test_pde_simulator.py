import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import chebyshev
from nobackstep.core import InvalidInputError, KernelField, PdeState, ReactionProfile, l2_norm
from nobackstep.kernel_solver import solve_kernel_fd
from nobackstep.pde_simulator import (SimulationConfig, SimulationTrace, Stepper,
                                      backstepping_transform, boundary_flux,
                                      full_state_control, initial_condition, simulate_closed_loop,
                                      simulate_observer, simulate_open_loop,
                                      simulate_output_feedback, step_plant)

FIG7_SIGNAL = lambda t: 7 * np.sin(16 * np.pi * t) + 10 * np.cos(2 * np.pi * t)


def test_heat_eigenmode_decay():
    cfg = SimulationConfig(T=0.1, initial="sin")
    tr = simulate_open_loop(ReactionProfile.constant(0.0, 101), cfg)
    assert tr.l2_norms[-1] / tr.l2_norms[0] == pytest.approx(np.exp(-0.1 * np.pi**2), rel=0.02)


def test_heat_eigenmode_backward_euler():
    cfg = SimulationConfig(T=0.1, initial="sin", stepper="backward_euler")
    tr = simulate_open_loop(ReactionProfile.constant(0.0, 101), cfg)
    assert tr.l2_norms[-1] / tr.l2_norms[0] == pytest.approx(np.exp(-0.1 * np.pi**2), rel=0.02)


def test_subcritical_constant_lambda_nonincreasing():
    cfg = SimulationConfig(T=0.3, initial="constant10")
    tr = simulate_open_loop(ReactionProfile.constant(5.0, 101), cfg)
    tail = tr.l2_norms[tr.times >= 0.05]
    assert np.all(np.diff(tail) <= 1e-12)


def test_open_loop_instability():
    tr = simulate_open_loop(chebyshev(50, 5), SimulationConfig())
    assert tr.l2_norms[-1] / tr.l2_norms[0] > 10


def test_full_state_control_trapezoid():
    g = ReactionProfile.constant(0, 11).grid
    zero = PdeState(g, np.zeros(11))
    assert full_state_control(np.ones(11), zero) == 0.0
    ones = np.ones(11)
    ones[0] = 0.0
    # trapezoid of a vector with u(0)=0 and 1 elsewhere: 1 - h/2
    assert full_state_control(np.ones(11), PdeState(g, ones)) == pytest.approx(1 - 0.05)
    with pytest.raises(InvalidInputError):
        full_state_control(np.ones(5), zero)


def test_closed_loop_zero_gain_is_heat():
    cfg = SimulationConfig(T=0.1, initial="sin")
    lam = ReactionProfile.constant(0.0, 101)
    a = simulate_closed_loop(lam, KernelField.zeros(101), cfg)
    b = simulate_open_loop(lam, cfg)
    np.testing.assert_array_equal(a.l2_norms, b.l2_norms)


def test_closed_loop_exact_kernel_stabilizes():
    lam = chebyshev(50, 5)
    tr = simulate_closed_loop(lam, solve_kernel_fd(lam), SimulationConfig())
    assert tr.l2_norms[-1] <= 0.05 * tr.l2_norms[0]
    # frozen: ratio 8.27e-4 at t=1
    assert tr.l2_norms[-1] / tr.l2_norms[0] == pytest.approx(8.2746e-4, rel=1e-3)


def test_target_system_rate():
    lam = chebyshev(50, 5)
    k = solve_kernel_fd(lam)
    cfg = SimulationConfig(T=0.6, snapshot_stride=100)
    tr = simulate_closed_loop(lam, k, cfg)
    g = cfg.grid
    w = [l2_norm(backstepping_transform(PdeState(g, u), k)) for u in tr.snapshots]
    t = tr.snapshot_times
    sel = t >= 0.2
    rate = np.diff(np.log(np.array(w)[sel])) / np.diff(t[sel])
    assert np.all(rate <= -np.pi**2 + 0.5)


def test_transform_trivial_cases():
    g = ReactionProfile.constant(0, 11).grid
    u = np.linspace(0, 1, 11) ** 2
    np.testing.assert_array_equal(backstepping_transform(PdeState(g, u), KernelField.zeros(11)).u, u)
    k = solve_kernel_fd(chebyshev(20, 5, 11))
    assert np.all(backstepping_transform(PdeState(g, np.zeros(11)), k).u == 0.0)


def test_boundary_flux_second_order():
    x = np.linspace(0, 1, 101)
    assert boundary_flux(x**2, 0.01) == pytest.approx(2.0, abs=1e-12)


def test_observer_identical_start_stays_exact():
    lam = chebyshev(20, 5)
    tr = simulate_observer(lam, solve_kernel_fd(lam), SimulationConfig(), "constant10", FIG7_SIGNAL)
    u0 = tr.l2_norms[0]
    assert np.max(tr.err_norms) <= 1e-8 * u0


def test_observer_fig7_error_decays():
    lam = chebyshev(20, 5)
    tr = simulate_observer(lam, solve_kernel_fd(lam), SimulationConfig(), "constant20", FIG7_SIGNAL)
    assert tr.err_norms[-1] <= 0.1 * tr.err_norms[0]
    assert tr.meta["envelope_violations"] == 0


def test_observer_printed_sign_diverges():
    lam = chebyshev(20, 5)
    tr = simulate_observer(lam, solve_kernel_fd(lam), SimulationConfig(), "constant20", FIG7_SIGNAL,
                           gain_sign=-1.0)
    assert tr.err_norms[-1] > 100 * tr.err_norms[0]


def test_observer_heat_error_mode():
    lam = ReactionProfile.constant(0.0, 101)
    cfg = SimulationConfig(T=0.1, initial=np.zeros(101))
    tr = simulate_observer(lam, KernelField.zeros(101), cfg, "sin", lambda t: 0.0)
    assert tr.err_norms[-1] / tr.err_norms[0] == pytest.approx(np.exp(-0.1 * np.pi**2), rel=0.02)


def test_output_feedback_matches_closed_loop():
    lam = chebyshev(50, 5)
    k = solve_kernel_fd(lam)
    cfg = SimulationConfig()
    a = simulate_output_feedback(lam, k, "constant10", "constant10", cfg)
    b = simulate_closed_loop(lam, k, cfg)
    assert np.max(np.abs(a.l2_norms - b.l2_norms)) <= 1e-8 * b.l2_norms[0]


def test_output_feedback_doubled_estimate_decays():
    lam = chebyshev(20, 5)
    k = solve_kernel_fd(lam)
    u0 = initial_condition("sin", 101).u
    tr = simulate_output_feedback(lam, k, u0, 2 * u0, SimulationConfig(T=2.0))
    assert tr.l2_norms[-1] < tr.l2_norms[0] and tr.err_norms[-1] < tr.err_norms[0]


def test_output_feedback_decoupled_heat():
    lam = ReactionProfile.constant(0.0, 101)
    tr = simulate_output_feedback(lam, KernelField.zeros(101), "sin", "constant1",
                                  SimulationConfig(T=0.5))
    assert tr.l2_norms[-1] < 0.05 * tr.l2_norms[0] and tr.err_norms[-1] < tr.err_norms[0]


@pytest.mark.parametrize("stepper,order", [("backward_euler", 1), ("crank_nicolson", 2)])
def test_time_refinement_order(stepper, order):
    lam = ReactionProfile.constant(0.0, 51)
    ends = []
    for dt in (4e-3, 2e-3, 1e-3):
        tr = simulate_open_loop(lam, SimulationConfig(51, dt, 0.2, stepper, "sin", 1))
        ends.append(tr.l2_norms[-1])
    observed = np.log2(abs(ends[0] - ends[1]) / abs(ends[1] - ends[2]))
    assert observed == pytest.approx(order, abs=0.3)


@settings(max_examples=8, deadline=None)
@given(scale=st.floats(-5, 5).filter(lambda s: abs(s) > 1e-3), gamma=st.floats(4, 9))
def test_linearity(scale, gamma):
    lam = chebyshev(20, gamma, 31)
    k = solve_kernel_fd(lam)
    cfg = SimulationConfig(31, 1e-3, 0.1, snapshot_stride=10)
    u0 = initial_condition("sin", 31).u
    a = simulate_closed_loop(lam, k, cfg, u0)
    b = simulate_closed_loop(lam, k, cfg, scale * u0)
    np.testing.assert_allclose(b.snapshots, scale * a.snapshots, rtol=1e-10, atol=1e-12)


def test_step_plant_dirichlet_values():
    lam = ReactionProfile.constant(1.0, 21)
    s = step_plant(initial_condition("sin", 21), lam, 0.5, 1e-3, Stepper.CRANK_NICOLSON)
    assert s.u[0] == 0.0 and s.u[-1] == 0.5


def test_trace_csv_roundtrip(tmp_path):
    tr = simulate_observer(chebyshev(20, 5, 21), solve_kernel_fd(chebyshev(20, 5, 21)),
                           SimulationConfig(21, 1e-3, 0.05), "constant20", FIG7_SIGNAL)
    tr.write_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "t,l2_norm,control,err_norm"
    back = SimulationTrace.read_csv(tmp_path / "t.csv")
    np.testing.assert_array_equal(back.err_norms, tr.err_norms)
    np.testing.assert_array_equal(back.l2_norms, tr.l2_norms)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        SimulationConfig(dt=0)
    with pytest.raises(InvalidInputError):
        SimulationConfig(T=1e-5, dt=1e-4)
    with pytest.raises(InvalidInputError):
        initial_condition("triangle", 11)
