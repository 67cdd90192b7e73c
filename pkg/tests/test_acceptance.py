"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The two 900-sample datasets and the two trained operators are built once
per session (roughly 15 minutes on one core).
"""

import hashlib
import json
import math
import time

import numpy as np
import pytest
from scipy.optimize import brentq

from conftest import chebyshev, record_criterion
from nobackstep.analysis import (certify_trace, delta_star, epsilon_star, log_epsilon_star,
                                 overshoot_M, speedup_benchmark, stability_report)
from nobackstep.cli import main as cli_main
from nobackstep.core import KernelField, ReactionProfile, l2_norm
from nobackstep.dataset import (CONTROL_FAMILY, OBSERVER_FAMILY, build_dataset, sample_lambda)
from nobackstep.kernel_solver import kernel_residuals, solve_kernel_fd, solve_kernel_integral
from nobackstep.neural_operator import (DeepOperatorModel, TrainingConfig, gradient_check,
                                        operator_error, predict_kernel, train)
from nobackstep.pde_simulator import (SimulationConfig, simulate_closed_loop, simulate_observer,
                                      simulate_open_loop)

FIG7_SIGNAL = lambda t: 7 * math.sin(16 * math.pi * t) + 10 * math.cos(2 * math.pi * t)


def _train_operator(family):
    _, data = build_dataset(family, 900, 101)
    model = DeepOperatorModel.create(101, lambda_scale=1.0 / family.amplitude, seed=0)
    t0 = time.perf_counter()
    result = train(model, data, TrainingConfig(seed=0))
    return model, result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def control_operator():
    return _train_operator(CONTROL_FAMILY)


@pytest.fixture(scope="session")
def observer_operator():
    return _train_operator(OBSERVER_FAMILY)


# -- 1, 2: kernel solver ---------------------------------------------------------


def _kernel_study():
    out = {}
    for gamma in (5.0, 8.0):
        for n in (51, 101, 201):
            lam = chebyshev(50, gamma, n)
            out[gamma, n] = (lam, solve_kernel_fd(lam), solve_kernel_integral(lam))
    return out


def test_criterion_01_cross_validation():
    t0 = time.perf_counter()
    study = _kernel_study()
    elapsed = time.perf_counter() - t0
    ok, parts = elapsed <= 10.0, []
    for gamma in (5.0, 8.0):
        errs = []
        for n in (51, 101, 201):
            _, kf, ki = study[gamma, n]
            errs.append(np.max(np.abs(kf.values - ki.values)) / np.max(np.abs(ki.values)))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        ok &= errs[1] <= 0.02 and errs[0] > errs[1] > errs[2] and bool(np.all(orders >= 1.0))
        parts.append(f"gamma={gamma:g}: rel@101={errs[1]:.4f} orders={np.round(orders, 2).tolist()}")
    record_criterion(1, ok, "; ".join(parts) + f"; {elapsed:.2f}s")
    assert ok


def test_criterion_02_defining_relations():
    study = _kernel_study()
    ok, worst_bc, worst_diag, worst_margin, ratios = True, 0.0, 0.0, math.inf, []
    for (gamma, n), (lam, kf, ki) in study.items():
        for k in (kf, ki):
            rep = kernel_residuals(k, lam)
            worst_bc = max(worst_bc, rep.bc_zero_sup)
            worst_diag = max(worst_diag, rep.bc_diag_sup)
            worst_margin = min(worst_margin, rep.bound_margin)
    for gamma in (5.0, 8.0):
        res = [kernel_residuals(study[gamma, n][1], study[gamma, n][0]).pde_residual_sup
               for n in (51, 101, 201)]
        ratios += [res[0] / res[1], res[1] / res[2]]
    ok = (worst_bc <= 1e-12 and worst_diag <= 1e-12 and worst_margin >= -1e-9
          and all(3.0 <= r <= 5.0 for r in ratios))
    record_criterion(2, ok, f"bc_zero={worst_bc:.1e} diag={worst_diag:.1e} "
                            f"residual ratios={np.round(ratios, 2).tolist()} "
                            f"min bound margin={worst_margin:.3g}")
    assert ok


# -- 3, 4, 5: simulation with exact gains ------------------------------------------


def test_criterion_03_heat_benchmark():
    tr = simulate_open_loop(ReactionProfile.constant(0.0, 101),
                            SimulationConfig(101, 1e-4, 0.1, "crank_nicolson", "sin"))
    ratio = tr.l2_norms[-1] / tr.l2_norms[0]
    target = math.exp(-0.1 * math.pi**2)
    ok = abs(ratio / target - 1) <= 0.02
    record_criterion(3, ok, f"ratio={ratio:.6f} expected={target:.6f}")
    assert ok


def test_criterion_04_open_loop_instability():
    t0 = time.perf_counter()
    tr = simulate_open_loop(chebyshev(50, 5), SimulationConfig(initial="constant10"))
    elapsed = time.perf_counter() - t0
    ratio = tr.l2_norms[-1] / tr.l2_norms[0]
    ok = ratio > 10 and elapsed <= 5.0
    record_criterion(4, ok, f"||u(1)||/||u0||={ratio:.3e} in {elapsed:.2f}s")
    assert ok


def test_criterion_05_exact_kernel_stabilization():
    lam = chebyshev(50, 5)
    tr = simulate_closed_loop(lam, solve_kernel_fd(lam), SimulationConfig())
    rep = certify_trace(tr, stability_report(lam.sup_norm, 0.0))
    ratio = tr.l2_norms[-1] / tr.l2_norms[0]
    ok = rep.envelope_violations == 0 and ratio <= 0.05
    record_criterion(5, ok, f"violations={rep.envelope_violations} vacuous_bound={rep.vacuous_bound} "
                            f"||u(1)||/||u0||={ratio:.3e}")
    assert ok


# -- 6, 7, 8: learned operator ------------------------------------------------------


def test_criterion_06_operator_training(control_operator):
    probe = DeepOperatorModel.create(11, (16, 16), (16, 16), 8, "tanh", 1 / 50, seed=3)
    assert probe.n_params <= 10_000
    grad_err = gradient_check(probe, sample_lambda(CONTROL_FAMILY, 0, 11))
    model, result, elapsed = control_operator
    test_err = result.final_test_rel_l2
    ok = grad_err <= 1e-5 and test_err <= 5e-2 and elapsed <= 1800
    record_criterion(6, ok, f"test rel_l2={test_err:.4f} train rel_l2={result.train_rel_l2[-1]:.4f} "
                            f"gradient_check={grad_err:.1e} training {elapsed:.0f}s")
    assert ok


def test_criterion_07_learned_gain_closed_loop(control_operator):
    model = control_operator[0]
    lam = chebyshev(50, 5)
    cfg = SimulationConfig(snapshot_stride=10)
    exact = simulate_closed_loop(lam, solve_kernel_fd(lam), cfg)
    k_hat = predict_kernel(model, lam, 101)
    learned = simulate_closed_loop(lam, k_hat, cfg)
    h = cfg.grid.h
    gap = max(l2_norm(a - b, h) for a, b in zip(learned.snapshots, exact.snapshots))
    deviation = gap / np.max(exact.l2_norms)
    ratio = learned.l2_norms[-1] / learned.l2_norms[0]
    err = operator_error(model, lam, solve_kernel_fd(lam))
    rep = certify_trace(learned, stability_report(lam.sup_norm, err))
    ok = ratio <= 0.1 and deviation <= 0.2
    record_criterion(7, ok, f"||u(1)||/||u0||={ratio:.3e} max deviation={deviation:.4f} "
                            f"eps={err.epsilon:.3g} certified={rep.certified}")
    assert ok


def test_criterion_08_observer(observer_operator):
    model = observer_operator[0]
    lam = chebyshev(20, 5)
    cfg = SimulationConfig(initial="constant10", snapshot_stride=10)
    exact = simulate_observer(lam, solve_kernel_fd(lam), cfg, "constant20", FIG7_SIGNAL)
    learned = simulate_observer(lam, predict_kernel(model, lam, 101), cfg, "constant20",
                                FIG7_SIGNAL)
    err_ratio = exact.err_norms[-1] / exact.err_norms[0]
    scale = np.max(np.abs(exact.snapshots))
    discrepancy = np.max(np.abs(learned.observer_snapshots - exact.observer_snapshots)) / scale
    learned_ratio = learned.err_norms[-1] / learned.err_norms[0]
    ok = err_ratio <= 0.1 and discrepancy <= 0.05
    record_criterion(8, ok, f"error(1)/error(0)={err_ratio:.2e} (learned {learned_ratio:.2e}) "
                            f"peak discrepancy={discrepancy:.4f} of state scale {scale:.2f}")
    assert ok


# -- 9: certificates ------------------------------------------------------------------


EPS_GRID = np.linspace(0.0, 1.0, 21)
LAM_GRID = np.linspace(0.0, 50.0, 51)


def test_criterion_09_certificate_formulas():
    checks = {
        "M(0,0)=1": overshoot_M(0.0, 0.0) == 1.0,
        "delta*(0,.)=0": all(delta_star(0.0, lb) == 0.0 for lb in (0.0, 1.0, 50.0)),
        "M increasing": all(
            overshoot_M(e2, 0.5) > overshoot_M(e1, 0.5)
            for e1, e2 in zip(EPS_GRID[:-1], EPS_GRID[1:])),
        "delta* increasing": all(
            delta_star(e2, 1.0) > delta_star(e1, 1.0)
            for e1, e2 in zip(EPS_GRID[:-1], EPS_GRID[1:])),
        "eps* decreasing": all(log_epsilon_star(b) < log_epsilon_star(a)
                               for a, b in zip(LAM_GRID[:-1], LAM_GRID[1:])),
    }
    root = epsilon_star(0.0)
    checks["eps*(0) matches brentq"] = abs(
        root - brentq(lambda e: 2 * e * (1 + e) * math.exp(e) - 0.5, 0, 1, xtol=1e-15)) <= 1e-12
    checks["eps*(0) in (0.19, 0.21)"] = 0.19 < root < 0.21
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record_criterion(9, ok, f"eps*(0)={root:.12f}; failed checks: {failed or 'none'}")
    assert ok


# -- 10, 11 ----------------------------------------------------------------------------


def test_criterion_10_speedup(control_operator):
    model = control_operator[0]
    lams = [sample_lambda(CONTROL_FAMILY, i, 101) for i in range(20)]
    rep = speedup_benchmark(model, lams, 101, repeats=3)
    ok = rep.ratio >= 10
    record_criterion(10, ok, f"solver {rep.solver_median_s * 1e3:.3f} ms / operator "
                             f"{rep.operator_median_s * 1e3:.3f} ms = {rep.ratio:.1f}x "
                             f"(cv {rep.cv_operator:.2f}/{rep.cv_solver:.2f})")
    assert ok


def test_criterion_11_determinism(tmp_path, monkeypatch):
    (tmp_path / "cfg.json").write_text(json.dumps({
        "model": {"branch_hidden": [32], "trunk_hidden": [32], "p": 16},
        "training": {"epochs": 5}}))
    outputs = {}
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        monkeypatch.chdir(d)
        assert cli_main(["gen-data", "--out", "data", "--n", "60"]) == 0
        assert cli_main(["train", "--data", "data", "--config", "../cfg.json",
                         "--out-model", "model"]) == 0
        assert cli_main(["simulate", "--preset", "closedloop-gamma5", "--gain", "operator:model",
                         "--out", "sim"]) == 0
        outputs[run] = {p.relative_to(d).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
                        for p in sorted(d.rglob("*")) if p.is_file()}
    same = outputs["a"] == outputs["b"]
    record_criterion(11, same, f"{len(outputs['a'])} artifacts (gen-data, train, simulate) "
                               f"{'byte-identical' if same else 'differ'}")
    assert same
