"""Command-line entry point: ``nobackstep <command> ...``.

Every command writes its artifacts plus a ``run.json`` into the output
directory. Exit codes: 0 success, 2 invalid configuration, 3 numerical
failure, 4 I/O or data-integrity error.
"""

from __future__ import annotations

import argparse
import dataclasses
import enum
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (delta_star, epsilon_star, overshoot_M, speedup_benchmark,
                       stability_report, certify_trace, write_benchmark)
from .core import ConvergenceError, DomainError, InvalidInputError, KernelField, ReactionProfile
from .dataset import (CONTROL_FAMILY, OBSERVER_FAMILY, DatasetError, LambdaFamilySpec,
                      SampleSolveError, build_dataset, chebyshev_lambda, load_dataset,
                      sample_lambda)
from .kernel_solver import GoursatSolveOptions, kernel_residuals, solve_kernel
from .neural_operator import (DeepOperatorModel, TrainingConfig, TrainingDivergenceError,
                              load_model, operator_error, predict_kernel, save_model, train)
from .pde_simulator import (SimulationConfig, simulate_closed_loop, simulate_observer,
                            simulate_open_loop, simulate_output_feedback)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(InvalidInputError):
    pass


# -- experiment configuration -------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    n_sensors: int | None = None      # default: dataset grid size
    branch_hidden: tuple = (128, 128)
    trunk_hidden: tuple = (128, 128)
    p: int = 64
    activation: str = "tanh"
    lambda_scale: float | None = None  # default: 1 / family amplitude
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class Scenario:
    lambda_amplitude: float = 50.0
    lambda_gamma: float = 5.0
    mode: str = "closed"
    gain: str = "exact"
    observer_initial: str = "constant20"
    signal: str = "zero"


SECTIONS = {
    "family": LambdaFamilySpec,
    "solver": GoursatSolveOptions,
    "model": ModelSpec,
    "training": TrainingConfig,
    "simulation": SimulationConfig,
    "scenario": Scenario,
}

PRESETS = {
    "openloop-gamma5": {"scenario": {"lambda_amplitude": 50.0, "lambda_gamma": 5.0, "mode": "open"}},
    "openloop-gamma8": {"scenario": {"lambda_amplitude": 50.0, "lambda_gamma": 8.0, "mode": "open"}},
    "closedloop-gamma5": {"scenario": {"lambda_amplitude": 50.0, "lambda_gamma": 5.0,
                                       "mode": "closed", "gain": "exact"}},
    "observer-fig7": {"scenario": {"lambda_amplitude": 20.0, "lambda_gamma": 5.0,
                                   "mode": "observer", "gain": "exact",
                                   "observer_initial": "constant20", "signal": "fig7"},
                      "simulation": {"initial": "constant10"}},
}

SIGNALS = {
    "zero": lambda t: 0.0,
    "fig7": lambda t: 7.0 * math.sin(16.0 * math.pi * t) + 10.0 * math.cos(2.0 * math.pi * t),
}


def _merge(base: dict, over: dict) -> dict:
    out = {k: dict(v) for k, v in base.items()}
    for k, v in over.items():
        out.setdefault(k, {}).update(v)
    return out


def parse_config(raw: dict | None) -> dict:
    """Validate a raw config document; returns {section: {field: value}} with no defaults filled."""
    raw = dict(raw or {})
    version = raw.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    out = {}
    for name, body in raw.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section {name!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be an object")
        allowed = {f.name for f in dataclasses.fields(SECTIONS[name])}
        unknown = set(body) - allowed
        if unknown:
            raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
        out[name] = dict(body)
    return out


def build_section(name: str, values: dict):
    cls = SECTIONS[name]
    values = dict(values)
    for key in ("branch_hidden", "trunk_hidden"):
        if key in values:
            values[key] = tuple(values[key])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return parse_config(raw)


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_inputs(paths: list) -> dict:
    """Per-file git blob hashes (directories expand to their files) and a combined digest."""
    files = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        targets = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in targets:
            files[str(q)] = git_blob_hash(q.read_bytes())
    listing = "".join(f"{h} {Path(n).name}\n" for n, h in sorted(files.items(), key=lambda kv: kv[1]))
    return {"files": {Path(n).name if len(files) == 1 else n: h for n, h in files.items()},
            "combined": hashlib.sha1(listing.encode()).hexdigest()}


def write_run(out: Path, command: str, config: dict, inputs: list, extra: dict | None = None):
    record = {
        "tool": "nobackstep",
        "version": __version__,
        "command": command,
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "inputs": hash_inputs(inputs),
    }
    if extra:
        record.update(extra)
    _dump(out / "run.json", record)


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    base = CONTROL_FAMILY if args.spec == "control" else OBSERVER_FAMILY
    fam = {**_jsonable(base), **cfg.get("family", {})}
    if args.seed is not None:
        fam["seed"] = args.seed
    family = build_section("family", fam)
    solver_vals = cfg.get("solver", {})
    n_points = args.grid or solver_vals.get("n_points", 101)
    options = build_section("solver", {**solver_vals, "n_points": n_points})
    out = Path(args.out)
    manifest, _ = build_dataset(family, args.n, n_points, out, options=options, split=args.split,
                                workers=args.workers)
    print(f"samples={manifest['n_samples']} n_points={n_points} checksum={manifest['checksum']}")
    write_run(out, "gen-data", {"family": family, "solver": options, "n_samples": args.n,
                                "split": args.split}, [args.config],
              {"checksum": manifest["checksum"]})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data = load_dataset(args.data)
    tvals = dict(cfg.get("training", {}))
    if args.epochs is not None:
        tvals["epochs"] = args.epochs
    tconf = build_section("training", tvals)
    state = None
    if args.resume:
        model, state = load_model(args.resume, with_state=True)
    else:
        mspec = build_section("model", cfg.get("model", {}))
        amp = abs(float(data.manifest["family"]["amplitude"])) or 1.0
        model = DeepOperatorModel.create(
            mspec.n_sensors or data.n_points, mspec.branch_hidden, mspec.trunk_hidden, mspec.p,
            mspec.activation, mspec.lambda_scale if mspec.lambda_scale is not None else 1.0 / amp,
            mspec.seed)
    first_epoch = state.epoch if state is not None else 0

    def progress(epoch, loss, tr, te):
        if args.verbose and (epoch % 50 == 0 or epoch == first_epoch + tconf.epochs - 1):
            print(f"epoch {epoch} loss={loss:.6g} train_rel_l2={tr:.5f} test_rel_l2={te:.5f}",
                  flush=True)

    result = train(model, data, tconf, state=state, progress=progress)
    out = Path(args.out_model)
    final = {"train_rel_l2": result.train_rel_l2[-1] if result.train_rel_l2 else None,
             "test_rel_l2": result.final_test_rel_l2, "epochs_total": result.state.epoch}
    save_model(model, out, {"training": tconf.as_dict(), "dataset_checksum": data.manifest["checksum"],
                            "metrics": _jsonable(final)}, result.state)
    with (out / "loss.csv").open("w") as fh:
        fh.write("epoch,loss,train_rel_l2,test_rel_l2\n")
        for i, (l, a, b) in enumerate(zip(result.train_loss, result.train_rel_l2, result.test_rel_l2)):
            fh.write(f"{first_epoch + i},{l!r},{a!r},{b!r}\n")
    print(f"final test_rel_l2={result.final_test_rel_l2:.6g}")
    write_run(out, "train", {"training": tconf, "resumed_from_epoch": first_epoch},
              [Path(args.data) / "manifest.json", Path(args.data) / "data.bin", args.config,
               Path(args.resume) / "params.bin" if args.resume else None], {"metrics": final})
    return EXIT_OK


def parse_lambda_preset(text: str, n_points: int) -> ReactionProfile:
    """``zero``, ``constant:C``, ``chebyshev:C:GAMMA`` or a simulation preset name."""
    if text in PRESETS:
        sc = PRESETS[text]["scenario"]
        return chebyshev_lambda(sc["lambda_amplitude"], sc["lambda_gamma"], n_points)
    parts = text.split(":")
    try:
        if parts[0] == "zero" and len(parts) == 1:
            return ReactionProfile.constant(0.0, n_points)
        if parts[0] == "constant" and len(parts) == 2:
            return ReactionProfile.constant(float(parts[1]), n_points)
        if parts[0] == "chebyshev" and len(parts) == 3:
            return chebyshev_lambda(float(parts[1]), float(parts[2]), n_points)
    except ValueError as exc:
        raise ConfigError(f"bad lambda preset {text!r}") from exc
    raise ConfigError(f"bad lambda preset {text!r}")


def read_lambda_file(path, n_points: int | None) -> ReactionProfile:
    values = np.array(Path(path).read_text().replace(",", " ").split(), dtype=np.float64)
    if values.size < 3:
        raise ConfigError("lambda file needs at least 3 values")
    lam = ReactionProfile.from_function(lambda x: np.interp(x, np.linspace(0, 1, values.size),
                                                            values), values.size)
    return lam if n_points is None else lam.resample(n_points)


def cmd_solve_kernel(args) -> int:
    cfg = load_config(args.config)
    svals = dict(cfg.get("solver", {}))
    if args.method:
        svals["method"] = {"fd": "fd_marching", "integral": "integral_fixed_point"}.get(
            args.method, args.method)
    if args.lambda_file:
        lam = read_lambda_file(args.lambda_file, args.grid or svals.get("n_points"))
    else:
        lam = parse_lambda_preset(args.lambda_preset, args.grid or svals.get("n_points", 101))
    svals["n_points"] = lam.grid.n_points
    options = build_section("solver", svals)
    k = solve_kernel(lam, options)
    report = kernel_residuals(k, lam)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    i, j = np.tril_indices(lam.grid.n_points)
    x = lam.grid.nodes
    with (out / "kernel.csv").open("w") as fh:
        fh.write("x,y,k\n")
        for a, b, v in zip(i, j, k.values):
            fh.write(f"{x[a]!r},{x[b]!r},{float(v)!r}\n")
    _dump(out / "residuals.json", {**report.as_dict(), "lambda_bar": lam.sup_norm,
                                   "kernel_sup": k.sup_norm, "method": options.method.value})
    print(json.dumps(report.as_dict()))
    write_run(out, "solve-kernel", {"solver": options, "lambda": args.lambda_preset or "file"},
              [args.lambda_file, args.config])
    return EXIT_OK


def _resolve_gain(spec: str, lam: ReactionProfile, n_points: int):
    """Returns (kernel used for feedback, exact kernel, error report or None)."""
    exact = solve_kernel(lam, GoursatSolveOptions(n_points))
    if spec == "exact":
        return exact, exact, None
    if spec == "zero":
        return KernelField.zeros(n_points), exact, None
    if spec.startswith("operator:"):
        model = load_model(spec.split(":", 1)[1])
        return predict_kernel(model, lam, n_points), exact, operator_error(model, lam, exact)
    raise ConfigError(f"bad --gain {spec!r}; expected exact, zero or operator:PATH")


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    layered = _merge(PRESETS.get(args.preset, {}), cfg) if args.preset else cfg
    if args.preset and args.preset not in PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}")
    scen_vals = dict(layered.get("scenario", {}))
    if args.mode:
        scen_vals["mode"] = args.mode
    if args.gain:
        scen_vals["gain"] = args.gain
    scen = build_section("scenario", scen_vals)
    sim = build_section("simulation", layered.get("simulation", {}))
    if scen.mode not in ("open", "closed", "observer", "output-feedback"):
        raise ConfigError(f"unknown mode {scen.mode!r}")
    if scen.signal not in SIGNALS:
        raise ConfigError(f"unknown signal {scen.signal!r}")
    lam = chebyshev_lambda(scen.lambda_amplitude, scen.lambda_gamma, sim.n_points)
    signal = SIGNALS[scen.signal]
    summary = {"mode": scen.mode, "gain": scen.gain, "lambda_bar": lam.sup_norm}

    if scen.mode == "open":
        trace = simulate_open_loop(lam, sim, signal if scen.signal != "zero" else None)
    else:
        k_hat, exact, err = _resolve_gain(scen.gain, lam, sim.n_points)
        if err is not None:
            summary["operator_error"] = err.as_dict() | {"epsilon": err.epsilon}
        eps = err.epsilon if err is not None else 0.0
        if scen.mode == "closed":
            trace = simulate_closed_loop(lam, k_hat, sim)
            rep = certify_trace(trace, stability_report(lam.sup_norm, eps))
            summary["stability"] = json.loads(rep.to_json())
            summary["envelope_violations"] = rep.envelope_violations
        elif scen.mode == "observer":
            trace = simulate_observer(lam, k_hat, sim, scen.observer_initial, signal,
                                      envelope_M=overshoot_M(eps, lam.sup_norm))
            summary["envelope_violations"] = trace.meta["envelope_violations"]
            summary["err_ratio_final"] = float(trace.err_norms[-1] / trace.err_norms[0])
        else:
            trace = simulate_output_feedback(lam, k_hat, sim.initial, scen.observer_initial, sim)
            summary["err_ratio_final"] = float(trace.err_norms[-1] / trace.err_norms[0])
    n0 = trace.l2_norms[0]
    summary.update(initial_norm=float(n0), final_norm=float(trace.l2_norms[-1]),
                   final_ratio=float(trace.l2_norms[-1] / n0) if n0 > 0 else None,
                   peak_ratio=float(np.max(trace.l2_norms) / n0) if n0 > 0 else None)
    if not np.all(np.isfinite(trace.l2_norms)):
        raise FloatingPointError("simulation produced non-finite norms")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace.write_csv(out / "trace.csv")
    if trace.snapshots is not None:
        trace.write_snapshots(out / "snapshots.csv")
    if trace.observer_snapshots is not None:
        trace.write_snapshots(out / "observer_snapshots.csv", which="observer")
    _dump(out / "summary.json", summary)
    print(json.dumps(_jsonable({k: summary[k] for k in ("mode", "final_ratio", "peak_ratio")})))
    gain_input = scen.gain.split(":", 1)[1] if scen.gain.startswith("operator:") else None
    write_run(out, "simulate", {"preset": args.preset, "scenario": scen, "simulation": sim},
              [args.config, Path(gain_input) / "params.bin" if gain_input else None])
    return EXIT_OK


def self_test_values() -> dict:
    return {
        "M(0,0)": overshoot_M(0.0, 0.0),
        "delta_star(0,0)": delta_star(0.0, 0.0),
        "delta_star(0,1)": delta_star(0.0, 1.0),
        "delta_star(0,50)": delta_star(0.0, 50.0),
        "epsilon_star(0)": epsilon_star(0.0),
        "vacuous_bound(50)": stability_report(50.0, 0.0).vacuous_bound,
    }


def cmd_analyze(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = {}
    if args.self_test:
        result["self_test"] = self_test_values()
        print(json.dumps(_jsonable(result["self_test"])))
    if args.model and args.data:
        model = load_model(args.model)
        data = load_dataset(args.data)
        per_sample = []
        for i in data.test_idx:
            lam = data.profile(int(i))
            exact = KernelField(lam.grid, data.kernels[int(i)])
            err = operator_error(model, lam, exact)
            rep = stability_report(lam.sup_norm, err)
            per_sample.append({"index": int(i), **err.as_dict(), "epsilon": err.epsilon,
                               "lambda_bar": lam.sup_norm, "certified": rep.certified,
                               "vacuous_bound": rep.vacuous_bound})
        worst = max(per_sample, key=lambda r: r["epsilon"])
        lam_bar = max(r["lambda_bar"] for r in per_sample)
        result["per_sample"] = per_sample
        result["report"] = json.loads(stability_report(lam_bar, worst["epsilon"]).to_json())
        print(f"held-out samples={len(per_sample)} max_epsilon={worst['epsilon']:.6g} "
              f"certified={result['report']['certified']}")
    elif not args.self_test:
        raise ConfigError("analyze needs --model and --data, or --self-test")
    _dump(out / "stability.json", result)
    write_run(out, "analyze", {"self_test": args.self_test},
              [args.model, Path(args.data) / "data.bin" if args.data else None])
    return EXIT_OK


def cmd_bench(args) -> int:
    model = load_model(args.model)
    try:
        sizes = [int(s) for s in args.grid_list.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --grid-list {args.grid_list!r}") from exc
    lams = [sample_lambda(CONTROL_FAMILY, i, max(sizes)) for i in range(args.n_lambdas)]
    reports = [speedup_benchmark(model, lams, n, repeats=args.repeats) for n in sizes]
    out = Path(args.out)
    summary = write_benchmark(reports, out)
    for r in reports:
        print(f"N={r.n_points} operator={r.operator_median_s:.3e}s "
              f"solver={r.solver_median_s:.3e}s ratio={r.ratio:.1f}")
    write_run(out, "bench", {"grid_list": sizes, "n_lambdas": args.n_lambdas,
                             "repeats": args.repeats}, [Path(args.model) / "params.bin"],
              {"exponents": {k: summary.get(k) for k in ("operator_exponent", "solver_exponent")}})
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nobackstep", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample lambda profiles and solve their kernels")
    p.add_argument("--spec", choices=["control", "observer"], default="control",
                   help="amplitude preset: control (50) or observer (20)")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=900)
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--split", type=float, default=0.9)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the kernel operator on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out-model", required=True)
    p.add_argument("--resume", help="model directory with saved optimizer state")
    p.add_argument("--epochs", type=int)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("solve-kernel", help="solve the gain kernel for one lambda")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--lambda-preset")
    g.add_argument("--lambda-file")
    p.add_argument("--method", choices=["fd", "integral", "fd_marching", "integral_fixed_point"])
    p.add_argument("--grid", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_solve_kernel)

    p = sub.add_parser("simulate", help="run an open-loop, closed-loop or observer simulation")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--mode", choices=["open", "closed", "observer", "output-feedback"])
    p.add_argument("--gain", help="exact | zero | operator:PATH")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="stability certificate for a trained operator")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--self-test", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="operator vs solver timing")
    p.add_argument("--model", required=True)
    p.add_argument("--grid-list", default="51,101,201")
    p.add_argument("--n-lambdas", type=int, default=20)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConvergenceError, TrainingDivergenceError, SampleSolveError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidInputError, DomainError, ValueError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
