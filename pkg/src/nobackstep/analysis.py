"""Closed-form stability certificates and their reconciliation with simulations.

With kbar = lambda_bar * exp(2 lambda_bar) and approximation accuracy eps:

    M(eps, lambda_bar)      = (1 + kbar)(1 + kbar + eps) exp(kbar + eps)
    delta*(eps, lambda_bar) = 2 eps (1 + kbar + eps) exp(kbar + eps)

and the decay argument closes when delta* <= 1/2. For moderate
lambda_bar these overflow double precision, so everything is also
available in log form; the float values saturate to inf (or 0 for
eps*) and reports carry a ``vacuous_bound`` flag.
"""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import InvalidInputError, KernelField, ReactionProfile, cumulative_trapezoid
from .kernel_solver import _second_difference_residual, diagonal_derivative, solve_kernel_fd
from .neural_operator import DeepOperatorModel, OperatorErrorReport, predict_kernel
from .pde_simulator import SimulationTrace

DELTA_THRESHOLD = 0.5


def _check_nonneg(**kw):
    for name, v in kw.items():
        if not v >= 0 or math.isnan(v):
            raise InvalidInputError(f"{name} must be nonnegative, got {v}")


def kbar(lam_bar: float) -> float:
    """lambda_bar e^{2 lambda_bar}, the sup bound on the exact kernel."""
    try:
        return lam_bar * math.exp(2.0 * lam_bar)
    except OverflowError:
        return math.inf


def log_overshoot_M(eps: float, lam_bar: float) -> float:
    _check_nonneg(eps=eps, lam_bar=lam_bar)
    kb = kbar(lam_bar)
    return math.log1p(kb) + math.log1p(kb + eps) + kb + eps


def overshoot_M(eps: float, lam_bar: float) -> float:
    lm = log_overshoot_M(eps, lam_bar)
    if lm > 709.0:
        return math.inf
    kb = kbar(lam_bar)
    return (1.0 + kb) * (1.0 + kb + eps) * math.exp(kb + eps)


def log_delta_star(eps: float, lam_bar: float) -> float:
    _check_nonneg(eps=eps, lam_bar=lam_bar)
    if eps == 0.0:
        return -math.inf
    kb = kbar(lam_bar)
    return math.log(2.0 * eps) + math.log1p(kb + eps) + kb + eps


def delta_star(eps: float, lam_bar: float) -> float:
    ld = log_delta_star(eps, lam_bar)
    if ld == -math.inf:
        return 0.0
    if ld > 709.0:
        return math.inf
    kb = kbar(lam_bar)
    return 2.0 * eps * (1.0 + kb + eps) * math.exp(kb + eps)


def log_epsilon_star(lam_bar: float) -> float:
    """log of the root of delta*(eps, lambda_bar) = 1/2, by bisection in log eps.

    delta* is strictly increasing in eps, vanishes at 0 and exceeds 1/2
    at eps = 1/4, so the root is bracketed and unique.
    """
    _check_nonneg(lam_bar=lam_bar)
    kb = kbar(lam_bar)
    if math.isinf(kb):
        return -math.inf
    target = math.log(DELTA_THRESHOLD)
    hi = math.log(0.25)
    lo = math.log(0.25) - math.log1p(kb) - kb - 1.0
    if not (log_delta_star(math.exp(lo) if lo > -745 else 0.0, lam_bar) < target
            or lo <= -745):
        raise InvalidInputError("bisection bracket failure")

    def f(le):
        # log delta* written in log eps so that tiny eps stays representable
        eps = math.exp(le)
        return math.log(2.0) + le + math.log1p(kb + eps) + kb + eps - target

    for _ in range(4000):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi) or hi - lo <= 1e-15 * max(1.0, abs(mid)):
            break
        if f(mid) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def epsilon_star(lam_bar: float) -> float:
    """Largest eps with delta*(eps, lambda_bar) <= 1/2 (0.0 once it underflows).

    The log-space bisection resolves log eps to ~1e-15 relative, which is
    far inside 1e-12 absolute for every representable root.
    """
    le = log_epsilon_star(lam_bar)
    return 0.0 if le == -math.inf else math.exp(le)


@dataclass
class StabilityReport:
    lambda_bar: float
    epsilon: float
    overshoot: float
    log_overshoot: float
    delta_star: float
    epsilon_star: float
    log_epsilon_star: float
    certified: bool
    vacuous_bound: bool
    envelope_violations: int | None = None
    epsilon_components: dict | None = None

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v
        return json.dumps({k: clean(v) for k, v in asdict(self).items()}, indent=2,
                          sort_keys=True)


def stability_report(lam_bar: float, eps: float | OperatorErrorReport = 0.0) -> StabilityReport:
    components = None
    if isinstance(eps, OperatorErrorReport):
        components = eps.as_dict()
        eps = eps.epsilon
    lm = log_overshoot_M(eps, lam_bar)
    les = log_epsilon_star(lam_bar)
    certified = (eps == 0.0) or (math.log(eps) < les)
    M = overshoot_M(eps, lam_bar)
    return StabilityReport(
        lambda_bar=lam_bar, epsilon=eps, overshoot=M, log_overshoot=lm,
        delta_star=delta_star(eps, lam_bar), epsilon_star=epsilon_star(lam_bar),
        log_epsilon_star=les, certified=certified, vacuous_bound=math.isinf(M),
        epsilon_components=components)


def count_envelope_violations(times: np.ndarray, norms: np.ndarray, M: float,
                              t0: float | None = None) -> int:
    """Samples with ||u(t)|| > M e^{-(t - t0)/2} ||u(t0)|| (1 + 1e-9)."""
    times = np.asarray(times, dtype=np.float64)
    norms = np.asarray(norms, dtype=np.float64)
    if times.size == 0:
        raise InvalidInputError("empty trace")
    if math.isinf(M):
        return 0
    if t0 is None:
        t0 = times[0]
    n0 = norms[np.argmin(np.abs(times - t0))]
    sel = times >= t0
    envelope = M * np.exp(-(times[sel] - t0) / 2.0) * n0 * (1.0 + 1e-9)
    return int(np.count_nonzero(norms[sel] > envelope))


def certify_trace(trace: SimulationTrace, report: StabilityReport,
                  use_error_norm: bool = False) -> StabilityReport:
    norms = trace.err_norms if use_error_norm else trace.l2_norms
    if norms is None or len(trace.times) == 0:
        raise InvalidInputError("empty trace")
    report.envelope_violations = count_envelope_violations(trace.times, norms, report.overshoot)
    return report


def perturbation_fields(k_hat: KernelField, k: KernelField, lam: ReactionProfile) -> dict:
    """delta_k0(x) = 2 d/dx k_hat(x, x) + lambda(x) and
    delta_k1 = k_hat_xx - k_hat_yy - lambda(y) k_hat, plus the residuals of the
    identities delta_k0 = -2 d/dx k_tilde(x, x) and delta_k1 = -(d_xx - d_yy) k_tilde + lambda k_tilde
    with k_tilde = k - k_hat (nonzero only through the exact kernel's own discretization error).
    """
    if not (k_hat.grid == k.grid == lam.grid):
        raise InvalidInputError("kernels and lambda must share a grid")
    h = lam.grid.h
    d0 = 2.0 * diagonal_derivative(k_hat.diagonal, h) + lam.values
    r1, mask = _second_difference_residual(k_hat._dense, lam.values, h)
    kt = k._dense - k_hat._dense
    d0_alt = -2.0 * diagonal_derivative(np.diagonal(kt), h)
    rt, _ = _second_difference_residual(kt, lam.values, h)
    d1_alt = -rt
    return {
        "delta_k0": d0,
        "delta_k1": KernelField.from_dense(r1),
        "interior_mask": mask,
        "delta_k0_identity_gap": float(np.max(np.abs(d0 - d0_alt))),
        "delta_k1_identity_gap": float(np.max(np.abs((r1 - d1_alt)[mask]))) if mask.any() else 0.0,
        "delta_k0_sup": float(np.max(np.abs(d0))),
        "delta_k1_sup": float(np.max(np.abs(r1[mask]))) if mask.any() else 0.0,
    }


def exact_diagonal(lam: ReactionProfile) -> np.ndarray:
    return -0.5 * cumulative_trapezoid(lam.values, lam.grid.h)


# -- benchmark ------------------------------------------------------------


@dataclass
class TimingReport:
    n_points: int
    n_samples: int
    repeats: int
    operator_median_s: float
    solver_median_s: float
    operator_medians: list
    solver_medians: list

    @property
    def ratio(self) -> float:
        return self.solver_median_s / self.operator_median_s

    @property
    def cv_operator(self) -> float:
        return _cv(self.operator_medians)

    @property
    def cv_solver(self) -> float:
        return _cv(self.solver_medians)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(ratio=self.ratio, cv_operator=self.cv_operator, cv_solver=self.cv_solver)
        return d


def _cv(values) -> float:
    if len(values) < 2:
        return 0.0
    return statistics.pstdev(values) / statistics.mean(values)


def _median_time(fn, args_list, inner: int) -> float:
    per_sample = []
    for args in args_list:
        t0 = time.perf_counter()
        for _ in range(inner):
            fn(*args)
        per_sample.append((time.perf_counter() - t0) / inner)
    return statistics.median(per_sample)


def speedup_benchmark(model: DeepOperatorModel, lams: list[ReactionProfile],
                      n_points: int = 101, repeats: int = 3, inner: int = 5) -> TimingReport:
    """Median wall time of operator inference vs the FD kernel solver on the same grid.

    Each call is warmed up once; the trunk basis on the output grid is
    cached by the model, so inference cost per new lambda is the branch
    pass plus one matrix-vector product.
    """
    lams = [lam.resample(n_points) for lam in lams]
    predict_kernel(model, lams[0], n_points)
    solve_kernel_fd(lams[0], n_points)
    op_meds, solver_meds = [], []
    for _ in range(repeats):
        op_meds.append(_median_time(lambda l: predict_kernel(model, l, n_points),
                                    [(l,) for l in lams], inner))
        solver_meds.append(_median_time(lambda l: solve_kernel_fd(l, n_points),
                                        [(l,) for l in lams], inner))
    return TimingReport(n_points, len(lams), repeats, statistics.median(op_meds),
                        statistics.median(solver_meds), op_meds, solver_meds)


def scaling_exponent(sizes, times) -> float:
    """Least-squares slope of log(time) against log(N)."""
    return float(np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(times, float)),
                            1)[0])


def write_benchmark(reports: list[TimingReport], out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sizes = [r.n_points for r in reports]
    summary = {"runs": [r.as_dict() for r in reports]}
    if len(reports) >= 2:
        summary["operator_exponent"] = scaling_exponent(sizes, [r.operator_median_s for r in reports])
        summary["solver_exponent"] = scaling_exponent(sizes, [r.solver_median_s for r in reports])
    (out_dir / "bench.json").write_text(json.dumps(summary, indent=2))
    with (out_dir / "bench.csv").open("w") as fh:
        fh.write("n_points,operator_median_s,solver_median_s,ratio\n")
        for r in reports:
            fh.write(f"{r.n_points},{r.operator_median_s!r},{r.solver_median_s!r},{r.ratio!r}\n")
    return summary
