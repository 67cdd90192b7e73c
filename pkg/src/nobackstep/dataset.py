"""Reaction-coefficient families, paired kernels and the on-disk dataset format.

On disk a dataset is a directory with ``manifest.json`` and ``data.bin``.
``data.bin`` holds, per sample in index order, N float64 lambda values
followed by N(N+1)/2 float64 kernel values (row-major lower triangle),
little-endian, no padding. The manifest carries the SHA-256 of the blob.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import InvalidInputError, ReactionProfile, UniformGrid1D
from .kernel_solver import GoursatSolveOptions, kernel_residuals, solve_kernel

DATASET_VERSION = 1
_MASK64 = (1 << 64) - 1


class DatasetError(RuntimeError):
    pass


class ChecksumError(DatasetError):
    pass


class VersionError(DatasetError):
    pass


class StructuralError(DatasetError):
    pass


class SampleSolveError(DatasetError):
    def __init__(self, index: int, cause: str):
        super().__init__(f"kernel solve failed for sample {index}: {cause}")
        self.index = index


@dataclass(frozen=True)
class LambdaFamilySpec:
    family: str = "chebyshev"
    amplitude: float = 50.0
    gamma_lo: float = 4.0
    gamma_hi: float = 9.0
    seed: int = 0

    def __post_init__(self):
        if self.family != "chebyshev":
            raise InvalidInputError(f"unknown lambda family {self.family!r}")
        if not self.gamma_lo < self.gamma_hi:
            raise InvalidInputError("gamma_lo must be below gamma_hi")
        if not np.isfinite(self.amplitude):
            raise InvalidInputError("amplitude must be finite")


# amplitude presets: control experiments and the observer experiment
CONTROL_FAMILY = LambdaFamilySpec(amplitude=50.0)
OBSERVER_FAMILY = LambdaFamilySpec(amplitude=20.0)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def sample_seed(seed: int, index: int) -> int:
    return splitmix64((int(seed) & _MASK64) ^ int(index))


def sample_gamma(spec: LambdaFamilySpec, index: int) -> float:
    rng = np.random.default_rng(sample_seed(spec.seed, index))
    return float(rng.uniform(spec.gamma_lo, spec.gamma_hi))


def chebyshev_lambda(amplitude: float, gamma: float, n_points: int) -> ReactionProfile:
    """lambda(x) = amplitude * cos(gamma * arccos(x))."""
    grid = UniformGrid1D(n_points)
    return ReactionProfile(grid, amplitude * np.cos(gamma * np.arccos(grid.nodes)))


def sample_lambda(spec: LambdaFamilySpec, index: int, n_points: int = 101) -> ReactionProfile:
    return chebyshev_lambda(spec.amplitude, sample_gamma(spec, index), n_points)


@dataclass
class Dataset:
    lambdas: np.ndarray
    kernels: np.ndarray
    n_points: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    manifest: dict

    def __len__(self):
        return len(self.lambdas)

    def profile(self, i: int) -> ReactionProfile:
        return ReactionProfile(UniformGrid1D(self.n_points), self.lambdas[i])

    def subset(self, n_train: int) -> "Dataset":
        """Same test split, training split truncated to its first ``n_train`` entries."""
        return Dataset(self.lambdas, self.kernels, self.n_points, self.train_idx[:n_train],
                       self.test_idx, self.manifest)


def _solve_one(args):
    spec, index, options = args
    lam = sample_lambda(spec, index, options.n_points)
    try:
        k = solve_kernel(lam, options)
    except Exception as exc:  # reported with the failing index
        raise SampleSolveError(index, repr(exc)) from exc
    if not np.all(np.isfinite(k.values)):
        raise SampleSolveError(index, "non-finite kernel")
    return index, lam.values, k.values, kernel_residuals(k, lam).pde_residual_sup


def residual_constant(spec: LambdaFamilySpec, options: GoursatSolveOptions,
                      n_probe: int = 5) -> dict:
    """Fit C in pde_residual_sup <= C h^2 from a grid-halving probe across the gamma range."""
    coarse = options.n_points
    fine = 2 * (coarse - 1) + 1
    ratios, consts = [], []
    for gamma in np.linspace(spec.gamma_lo, spec.gamma_hi, n_probe):
        r = []
        for n in (coarse, fine):
            lam = chebyshev_lambda(spec.amplitude, gamma, n)
            opts = GoursatSolveOptions(n, options.method, options.max_iters, options.tol,
                                       options.near_diagonal)
            r.append(kernel_residuals(solve_kernel(lam, opts), lam).pde_residual_sup)
        h = 1.0 / (coarse - 1)
        consts.append(r[0] / h**2)
        if r[1] > 0:
            ratios.append(r[0] / r[1])
    return {"C": 2.0 * max(consts), "probe_ratios": ratios}


def build_dataset(spec: LambdaFamilySpec, n_samples: int, n_points: int = 101, out_dir=None,
                  options: GoursatSolveOptions | None = None, split: float = 0.9,
                  workers: int = 1) -> tuple[dict, Dataset]:
    """Solve kernels for samples 0..n_samples-1 and (optionally) write them to ``out_dir``."""
    if n_samples < 1:
        raise InvalidInputError("n_samples must be positive")
    if not 0.0 < split < 1.0:
        raise InvalidInputError("split must lie in (0, 1)")
    options = options or GoursatSolveOptions(n_points)
    if options.n_points != n_points:
        options = GoursatSolveOptions(n_points, options.method, options.max_iters, options.tol,
                                      options.near_diagonal)
    jobs = [(spec, i, options) for i in range(n_samples)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_solve_one, jobs, chunksize=max(1, n_samples // (4 * workers))))
    else:
        results = [_solve_one(j) for j in jobs]
    results.sort(key=lambda r: r[0])

    fit = residual_constant(spec, options)
    h = 1.0 / (n_points - 1)
    for index, _, _, res in results:
        if res > fit["C"] * h * h:
            raise SampleSolveError(index, f"residual {res:.3e} exceeds C h^2 = {fit['C'] * h * h:.3e}")

    lambdas = np.stack([r[1] for r in results])
    kernels = np.stack([r[2] for r in results])
    blob = encode_blob(lambdas, kernels)

    order = np.random.default_rng(sample_seed(spec.seed, n_samples)).permutation(n_samples)
    n_train = min(n_samples, max(1, int(round(split * n_samples))))
    train_idx = np.sort(order[:n_train])
    test_idx = np.sort(order[n_train:])
    manifest = {
        "format": "nobackstep-dataset",
        "version": DATASET_VERSION,
        "n_samples": n_samples,
        "n_points": n_points,
        "family": asdict(spec),
        "seed": spec.seed,
        "split": split,
        "train_idx": train_idx.tolist(),
        "test_idx": test_idx.tolist(),
        "gammas": [sample_gamma(spec, i) for i in range(n_samples)],
        "solver": {"method": options.method.value, "near_diagonal": options.near_diagonal.value,
                   "max_iters": options.max_iters, "tol": options.tol},
        "residual_constant": fit["C"],
        "residual_probe_ratios": fit["probe_ratios"],
        "max_pde_residual": max(r[3] for r in results),
        "layout": "per sample: n_points lambda, n_points*(n_points+1)/2 kernel; float64 LE",
        "checksum": hashlib.sha256(blob).hexdigest(),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "data.bin").write_bytes(blob)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest, Dataset(lambdas, kernels, n_points, train_idx, test_idx, manifest)


def encode_blob(lambdas: np.ndarray, kernels: np.ndarray) -> bytes:
    rows = np.concatenate([np.asarray(lambdas, "<f8"), np.asarray(kernels, "<f8")], axis=1)
    return np.ascontiguousarray(rows, dtype="<f8").tobytes()


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "data.bin").read_bytes()
    except FileNotFoundError as exc:
        raise StructuralError(f"missing dataset file: {exc.filename}") from exc
    if manifest.get("format") != "nobackstep-dataset" or manifest.get("version") != DATASET_VERSION:
        raise VersionError(f"unsupported dataset version {manifest.get('version')!r}")
    n = int(manifest["n_points"])
    n_samples = int(manifest["n_samples"])
    row = n + n * (n + 1) // 2
    if len(blob) != n_samples * row * 8:
        raise StructuralError(f"data.bin has {len(blob)} bytes, manifest implies "
                              f"{n_samples * row * 8}")
    if hashlib.sha256(blob).hexdigest() != manifest["checksum"]:
        raise ChecksumError("data.bin checksum does not match the manifest")
    arr = np.frombuffer(blob, dtype="<f8").reshape(n_samples, row).astype(np.float64)
    return Dataset(arr[:, :n].copy(), arr[:, n:].copy(), n,
                   np.asarray(manifest["train_idx"], dtype=int),
                   np.asarray(manifest["test_idx"], dtype=int), manifest)
