"""DeepONet for the kernel operator lambda -> k, written directly in numpy.

prediction(lambda)(x, y) = y * sum_k b_k(lambda at sensors) * t_k(x, y)

The factor y makes k_hat(x, 0) = 0 hold exactly for any parameters.
Gradients are derived by hand; `gradient_check` compares them with
central finite differences.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import (DomainError, InvalidInputError, KernelField, ReactionProfile, UniformGrid1D,
                   sup_norm)
from .kernel_solver import _second_difference_residual, diagonal_derivative

log = logging.getLogger(__name__)

MODEL_FORMAT = "nobackstep-deeponet"
MODEL_VERSION = 1


class TrainingDivergenceError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class Activation(str, enum.Enum):
    TANH = "tanh"
    RELU = "relu"
    IDENTITY = "identity"


def _act(name: Activation, z):
    if name is Activation.TANH:
        return np.tanh(z)
    if name is Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: Activation, z, a):
    # derivative expressed through pre-activation z and activation a
    if name is Activation.TANH:
        return 1.0 - a * a
    if name is Activation.RELU:
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


class MLP:
    """Fully connected net: hidden layers act(z W + b), linear output layer."""

    def __init__(self, widths, activation=Activation.TANH, params=None, rng=None):
        self.widths = [int(w) for w in widths]
        self.activation = Activation(activation)
        if params is None:
            rng = rng or np.random.default_rng(0)
            params = []
            for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
                scale = np.sqrt(2.0 / (fan_in + fan_out))  # Glorot normal
                params.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
                params.append(np.zeros(fan_out))
        self.params = params

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def forward(self, X):
        cache = [X]
        a = X
        for li in range(self.n_layers):
            W, b = self.params[2 * li], self.params[2 * li + 1]
            z = a @ W + b
            if li < self.n_layers - 1:
                a = _act(self.activation, z)
                cache.append((z, a))
            else:
                a = z
        return a, cache

    def backward(self, dout, cache):
        grads = [None] * len(self.params)
        d = dout
        for li in reversed(range(self.n_layers)):
            W = self.params[2 * li]
            a_prev = cache[li] if li == 0 else cache[li][1]
            grads[2 * li] = a_prev.T @ d
            grads[2 * li + 1] = d.sum(axis=0)
            if li > 0:
                z, a = cache[li]
                d = (d @ W.T) * _act_grad(self.activation, z, a)
        return grads


@dataclass
class DeepOperatorModel:
    """Branch/trunk parameters plus the sensor layout and input scaling."""

    sensors: np.ndarray
    branch: MLP
    trunk: MLP
    lambda_scale: float = 1.0
    seed: int = 0
    _basis_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def create(cls, n_sensors=101, branch_hidden=(128, 128), trunk_hidden=(128, 128),
               p=64, activation="tanh", lambda_scale=1.0, seed=0) -> "DeepOperatorModel":
        if p < 1 or n_sensors < 2:
            raise InvalidInputError("need p >= 1 and at least 2 sensors")
        rng = np.random.default_rng(seed)
        branch = MLP([n_sensors, *branch_hidden, p], activation, rng=rng)
        trunk = MLP([2, *trunk_hidden, p], activation, rng=rng)
        return cls(np.linspace(0.0, 1.0, n_sensors), branch, trunk, float(lambda_scale), seed)

    @property
    def p(self) -> int:
        return self.branch.widths[-1]

    @property
    def m(self) -> int:
        return self.sensors.size

    @property
    def params(self) -> list[np.ndarray]:
        return self.branch.params + self.trunk.params

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.params)

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise InvalidInputError(f"expected {self.n_params} parameters, got {flat.size}")
        offset = 0
        for arr in self.params:
            arr[...] = flat[offset:offset + arr.size].reshape(arr.shape)
            offset += arr.size
        self._basis_cache.clear()

    def flat_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.params])

    # -- inference --------------------------------------------------------

    def branch_input(self, lam) -> np.ndarray:
        """Scaled sensor values for one profile or a stack of profiles."""
        if isinstance(lam, ReactionProfile):
            if lam.grid.n_points == self.m and np.array_equal(self.sensors, lam.grid.nodes):
                return lam.values[None, :] * self.lambda_scale
            return lam(self.sensors)[None, :] * self.lambda_scale
        lam = np.atleast_2d(np.asarray(lam, dtype=np.float64))
        if lam.shape[1] == self.m:
            return lam * self.lambda_scale
        grid = np.linspace(0.0, 1.0, lam.shape[1])
        return np.stack([np.interp(self.sensors, grid, row) for row in lam]) * self.lambda_scale

    @staticmethod
    def trunk_input(points: np.ndarray) -> np.ndarray:
        return 2.0 * points - 1.0

    def basis(self, points: np.ndarray) -> np.ndarray:
        t, _ = self.trunk.forward(self.trunk_input(points))
        return t

    def grid_basis(self, n_points: int) -> np.ndarray:
        """y * t_k(x, y) on every triangle node of an n-point grid (cached)."""
        if n_points not in self._basis_cache:
            pts = triangle_points(n_points)
            self._basis_cache[n_points] = self.basis(pts) * pts[:, 1:2]
        return self._basis_cache[n_points]


def triangle_points(n_points: int) -> np.ndarray:
    """(x_i, y_j) for all triangle nodes in packed row-major order."""
    grid = UniformGrid1D(n_points)
    i, j = np.tril_indices(n_points)
    nodes = grid.nodes
    return np.column_stack([nodes[i], nodes[j]])


def _check_points(points: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[1] != 2:
        raise InvalidInputError("points must be (x, y) pairs")
    x, y = pts[:, 0], pts[:, 1]
    tol = 1e-14
    bad = (y < -tol) | (y > x + tol) | (x > 1 + tol)
    if bad.any():
        raise DomainError(f"point {tuple(pts[np.argmax(bad)])} lies outside 0 <= y <= x <= 1")
    return pts


def evaluate(model: DeepOperatorModel, lam, points) -> np.ndarray:
    """k_hat(x, y) at arbitrary triangle points."""
    pts = _check_points(points)
    b, _ = model.branch.forward(model.branch_input(lam))
    t = model.basis(pts)
    return pts[:, 1] * (t @ b[0])


def predict_kernel(model: DeepOperatorModel, lam, n_points: int | None = None) -> KernelField:
    if n_points is None:
        n_points = lam.grid.n_points if isinstance(lam, ReactionProfile) else model.m
    ty = model.grid_basis(n_points)
    b, _ = model.branch.forward(model.branch_input(lam))
    return KernelField(UniformGrid1D(n_points), ty @ b[0])


def predict_batch(model: DeepOperatorModel, lam_batch: np.ndarray, n_points: int) -> np.ndarray:
    ty = model.grid_basis(n_points)
    b, _ = model.branch.forward(model.branch_input(lam_batch))
    return b @ ty.T


# -- loss and gradients ---------------------------------------------------


def loss_and_grads(model: DeepOperatorModel, branch_in: np.ndarray, points: np.ndarray,
                   targets: np.ndarray, trunk_cache=None):
    """Mean squared error over (sample, node) pairs and its parameter gradients.

    ``trunk_cache`` may carry a precomputed trunk forward pass for ``points``.
    """
    b, bcache = model.branch.forward(branch_in)
    if trunk_cache is None:
        trunk_cache = model.trunk.forward(model.trunk_input(points))
    t, tcache = trunk_cache
    y = points[:, 1]
    pred = (b @ t.T) * y[None, :]
    resid = pred - targets
    loss = float(np.mean(resid * resid))
    dpred = (2.0 / resid.size) * resid
    ds = dpred * y[None, :]
    gb = model.branch.backward(ds @ t, bcache)
    gt = model.trunk.backward(ds.T @ b, tcache)
    return loss, gb + gt


def gradient_check(model: DeepOperatorModel, lam, seed: int = 0, n_points: int = 6,
                   step: float = 1e-6) -> float:
    """Worst relative gap between analytic and central-difference gradients.

    The target kernel is random (seeded); the error for each parameter
    tensor is max|analytic - fd| / max(max|analytic|, max|fd|), and
    tensors whose gradients both vanish count as exact.
    """
    rng = np.random.default_rng(seed)
    pts = triangle_points(n_points)
    branch_in = model.branch_input(lam)
    targets = rng.normal(size=(branch_in.shape[0], pts.shape[0]))
    _, grads = loss_and_grads(model, branch_in, pts, targets)

    worst = 0.0
    for arr, g in zip(model.params, grads):
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        fd_flat = fd.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            lp, _ = loss_and_grads(model, branch_in, pts, targets)
            flat[idx] = orig - step
            lm, _ = loss_and_grads(model, branch_in, pts, targets)
            flat[idx] = orig
            fd_flat[idx] = (lp - lm) / (2 * step)
        scale = max(np.max(np.abs(g)), np.max(np.abs(fd)))
        if scale > 0:
            worst = max(worst, float(np.max(np.abs(g - fd)) / scale))
    model._basis_cache.clear()
    return worst


# -- training -------------------------------------------------------------


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 2000
    seed: int = 0
    optimizer: Optimizer = Optimizer.ADAM
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    split: float = 0.9
    lr_decay_every: int = 500
    lr_decay_factor: float = 0.5
    points_per_step: int = 512  # random triangle nodes per minibatch; 0 uses all of them

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be positive")
        if not 0.0 < self.split < 1.0:
            raise InvalidInputError("split must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidInputError("batch_size >= 1 and epochs >= 0 required")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = self.optimizer.value
        return d


@dataclass
class OptimizerState:
    step: int = 0
    epoch: int = 0
    m: list = None
    v: list = None


@dataclass
class TrainingResult:
    model: DeepOperatorModel
    train_loss: list
    train_rel_l2: list
    test_rel_l2: list
    state: OptimizerState

    @property
    def final_test_rel_l2(self) -> float:
        return self.test_rel_l2[-1] if self.test_rel_l2 else float("nan")


def relative_l2(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-sample ||pred - target|| / ||target|| over triangle nodes."""
    num = np.linalg.norm(pred - target, axis=-1)
    den = np.linalg.norm(target, axis=-1)
    return num / np.where(den > 0, den, 1.0)


def mean_relative_l2(model: DeepOperatorModel, lams: np.ndarray, kernels: np.ndarray,
                     n_points: int, chunk: int = 128) -> float:
    if len(lams) == 0:
        return float("nan")
    errs = []
    for s in range(0, len(lams), chunk):
        pred = predict_batch(model, lams[s:s + chunk], n_points)
        errs.append(relative_l2(pred, kernels[s:s + chunk]))
    return float(np.mean(np.concatenate(errs)))


def train(model: DeepOperatorModel, dataset, config: TrainingConfig,
          state: OptimizerState | None = None, progress=None) -> TrainingResult:
    """Minibatch training of ``model`` in place on the dataset's training split.

    ``dataset`` exposes ``lambdas`` (n, N), ``kernels`` (n, N(N+1)/2),
    ``n_points`` and optionally ``train_idx`` / ``test_idx``. Shuffling
    for epoch e draws from a generator seeded by (seed, e), so a run
    resumed from a saved ``state`` reproduces an uninterrupted run bit for bit.
    """
    lams = np.asarray(dataset.lambdas, dtype=np.float64)
    kers = np.asarray(dataset.kernels, dtype=np.float64)
    n_points = int(dataset.n_points)
    if len(lams) == 0:
        raise InvalidInputError("empty dataset")
    if kers.shape != (len(lams), n_points * (n_points + 1) // 2):
        raise InvalidInputError("kernel array does not match the dataset grid")

    train_idx = getattr(dataset, "train_idx", None)
    test_idx = getattr(dataset, "test_idx", None)
    if train_idx is None:
        order = np.random.default_rng(config.seed).permutation(len(lams))
        n_train = max(1, int(round(config.split * len(lams))))
        train_idx, test_idx = np.sort(order[:n_train]), np.sort(order[n_train:])
    train_idx = np.asarray(train_idx, dtype=int)
    test_idx = np.asarray(test_idx if test_idx is not None else [], dtype=int)

    x_train = model.branch_input(lams[train_idx])
    y_train = kers[train_idx]
    pts = triangle_points(n_points)

    if state is None:
        state = OptimizerState()
    if state.m is None:
        state.m = [np.zeros_like(p) for p in model.params]
        state.v = [np.zeros_like(p) for p in model.params]

    losses, tr_err, te_err = [], [], []
    start = state.epoch
    for epoch in range(start, start + config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        perm = rng.permutation(len(train_idx))
        lr = config.learning_rate
        if config.lr_decay_every:
            lr *= config.lr_decay_factor ** (epoch // config.lr_decay_every)
        epoch_loss = 0.0
        for s in range(0, len(perm), config.batch_size):
            batch = perm[s:s + config.batch_size]
            if config.points_per_step and config.points_per_step < len(pts):
                sel = np.sort(rng.choice(len(pts), config.points_per_step, replace=False))
                bp, bt = pts[sel], y_train[batch][:, sel]
            else:
                bp, bt = pts, y_train[batch]
            loss, grads = loss_and_grads(model, x_train[batch], bp, bt)
            if not np.isfinite(loss):
                raise TrainingDivergenceError(epoch)
            epoch_loss += loss * len(batch)
            _apply_update(model.params, grads, state, config, lr)
        model._basis_cache.clear()
        epoch_loss /= len(perm)
        if not np.isfinite(epoch_loss):
            raise TrainingDivergenceError(epoch)
        losses.append(epoch_loss)
        tr_err.append(mean_relative_l2(model, lams[train_idx], y_train, n_points))
        te_err.append(mean_relative_l2(model, lams[test_idx], kers[test_idx], n_points)
                      if len(test_idx) else float("nan"))
        state.epoch = epoch + 1
        if progress is not None:
            progress(epoch, epoch_loss, tr_err[-1], te_err[-1])
    return TrainingResult(model, losses, tr_err, te_err, state)


def _apply_update(params, grads, state: OptimizerState, config: TrainingConfig, lr: float):
    state.step += 1
    if config.optimizer is Optimizer.SGD:
        for p, g in zip(params, grads):
            p -= lr * g
        return
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


# -- error functionals ----------------------------------------------------


@dataclass(frozen=True)
class OperatorErrorReport:
    kernel_sup_err: float
    diag_deriv_err: float
    pde_functional_err: float
    rel_l2: float

    @property
    def epsilon(self) -> float:
        return self.kernel_sup_err + self.diag_deriv_err + self.pde_functional_err

    def as_dict(self) -> dict:
        return {"kernel_sup_err": self.kernel_sup_err, "diag_deriv_err": self.diag_deriv_err,
                "pde_functional_err": self.pde_functional_err, "epsilon": self.epsilon,
                "rel_l2": self.rel_l2}


def kernel_error(k_hat: KernelField, lam: ReactionProfile, exact_k: KernelField
                 ) -> OperatorErrorReport:
    """epsilon_0, epsilon_1, epsilon_2 for an approximate kernel against the exact one."""
    if not (k_hat.grid == exact_k.grid == lam.grid):
        raise InvalidInputError("approximate kernel, exact kernel and lambda must share a grid")
    h = lam.grid.h
    diff = exact_k.values - k_hat.values
    dense = exact_k._dense - k_hat._dense
    e0 = sup_norm(diff)
    e1 = sup_norm(2.0 * diagonal_derivative(np.diagonal(dense), h))
    res, mask = _second_difference_residual(dense, lam.values, h)
    e2 = float(np.max(np.abs(res[mask]))) if mask.any() else 0.0
    norm = np.linalg.norm(exact_k.values)
    rel = float(np.linalg.norm(diff) / norm) if norm > 0 else float(np.linalg.norm(diff))
    return OperatorErrorReport(e0, e1, e2, rel)


def operator_error(model: DeepOperatorModel, lam: ReactionProfile, exact_k: KernelField
                   ) -> OperatorErrorReport:
    return kernel_error(predict_kernel(model, lam, exact_k.grid.n_points), lam, exact_k)


# -- persistence ----------------------------------------------------------


def save_model(model: DeepOperatorModel, directory, extra: dict | None = None,
               state: OptimizerState | None = None) -> Path:
    """Write ``model.json`` and ``params.bin`` (little-endian float64, branch then trunk,
    each layer's weight matrix (fan_in, fan_out) row-major followed by its bias)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "branch_widths": model.branch.widths,
        "trunk_widths": model.trunk.widths,
        "activation": model.branch.activation.value,
        "sensors": model.sensors.tolist(),
        "lambda_scale": model.lambda_scale,
        "seed": model.seed,
        "n_params": model.n_params,
        "output_rule": "y * sum_k branch_k * trunk_k",
        "trunk_input": "2 * (x, y) - 1",
    }
    if extra:
        manifest.update(extra)
    model.flat_params().astype("<f8").tofile(directory / "params.bin")
    if state is not None and state.m is not None:
        manifest["optimizer_state"] = {"step": state.step, "epoch": state.epoch}
        np.concatenate([a.ravel() for a in state.m + state.v]).astype("<f8").tofile(
            directory / "optimizer.bin")
    (directory / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_model(directory, with_state: bool = False):
    directory = Path(directory)
    manifest = json.loads((directory / "model.json").read_text())
    if manifest.get("format") != MODEL_FORMAT or manifest.get("version") != MODEL_VERSION:
        raise InvalidInputError(f"unsupported model manifest in {directory}")
    act = manifest["activation"]
    branch = MLP(manifest["branch_widths"], act, rng=np.random.default_rng(0))
    trunk = MLP(manifest["trunk_widths"], act, rng=np.random.default_rng(0))
    model = DeepOperatorModel(np.asarray(manifest["sensors"], dtype=np.float64), branch, trunk,
                              float(manifest["lambda_scale"]), int(manifest["seed"]))
    flat = np.fromfile(directory / "params.bin", dtype="<f8")
    model.set_params(flat)
    if not with_state:
        return model
    state = None
    opt = manifest.get("optimizer_state")
    if opt and (directory / "optimizer.bin").exists():
        buf = np.fromfile(directory / "optimizer.bin", dtype="<f8")
        if buf.size != 2 * model.n_params:
            raise InvalidInputError("optimizer state does not match the model")
        m, v = [], []
        offset = 0
        for target in (m, v):
            for p in model.params:
                target.append(buf[offset:offset + p.size].reshape(p.shape).copy())
                offset += p.size
        state = OptimizerState(opt["step"], opt["epoch"], m, v)
    return model, state

