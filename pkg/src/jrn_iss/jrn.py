"""Bias-free Jordan recurrent network estimator.

Forward recursion::

    a[t+1]    = act(W_ay @ y[t+1] + W_ax @ xhat[t])
    xhat[t+1] = W_xa @ a[t+1]

Gradients are computed by hand-written backpropagation through time, and
training uses mini-batch Adam with early stopping on validation loss.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import Dataset, stack_split
from .errors import InputError, ModelFormatError, TrainingError
from . import serialize

MODEL_FORMAT_VERSION = 1
ACTIVATIONS = ("identity", "tanh")


@dataclass
class JrnParameters:
    W_ay: np.ndarray  # (hidden, m)
    W_ax: np.ndarray  # (hidden, n)
    W_xa: np.ndarray  # (n, hidden)
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")
        self.W_ay = np.asarray(self.W_ay, dtype=float)
        self.W_ax = np.asarray(self.W_ax, dtype=float)
        self.W_xa = np.asarray(self.W_xa, dtype=float)
        h = self.hidden
        if self.W_ax.shape[0] != h or self.W_xa.shape != (self.W_ax.shape[1], h):
            raise InputError(
                f"inconsistent weight shapes {self.W_ay.shape}, {self.W_ax.shape}, "
                f"{self.W_xa.shape}")
        for W in (self.W_ay, self.W_ax, self.W_xa):
            if not np.all(np.isfinite(W)):
                raise InputError("weights must be finite")

    @property
    def hidden(self) -> int:
        return self.W_ay.shape[0]

    @property
    def n(self) -> int:
        return self.W_xa.shape[0]

    @property
    def m(self) -> int:
        return self.W_ay.shape[1]

    def copy(self) -> "JrnParameters":
        return JrnParameters(self.W_ay.copy(), self.W_ax.copy(), self.W_xa.copy(),
                             self.activation)

    def as_list(self):
        return [self.W_ay, self.W_ax, self.W_xa]


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 40
    max_epochs: int = 600
    patience: float = 10
    seed: int = 0
    hidden: int = 50
    activation: str = "tanh"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = None
    shuffle: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be positive")
        if not self.patience >= 1:
            raise InputError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.hidden < 1:
            raise InputError("batch_size, max_epochs and hidden must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    seconds: float = 0.0
    initial_train_loss: float = float("nan")
    initial_val_loss: float = float("nan")

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["epoch", "train_loss", "val_loss"])
            for k, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                wr.writerow([k, "%.17g" % tr, "%.17g" % va])


# ---------------------------------------------------------------------------
# Forward / loss / backward
# ---------------------------------------------------------------------------


def _act(kind, z):
    return np.tanh(z) if kind == "tanh" else z


def _batched(y_seq, x_hat_0, n):
    y = np.asarray(y_seq, dtype=float)
    single = y.ndim == 2
    if single:
        y = y[None]
    if y.ndim != 3:
        raise InputError(f"measurements must be (T, m) or (B, T, m), got {y.shape}")
    B = y.shape[0]
    if x_hat_0 is None:
        x0 = np.zeros((B, n))
    else:
        x0 = np.asarray(x_hat_0, dtype=float)
        if x0.shape not in ((n,), (B, n)):
            raise InputError(f"initial estimate shape {x0.shape} does not match n={n}, "
                             f"batch {B}")
        x0 = np.broadcast_to(x0, (B, n)).copy()
    return y, x0, single


def jrn_forward(params: JrnParameters, y_seq, x_hat_0=None):
    """Run the estimator over a measurement sequence.

    ``y_seq`` is ``(T, m)`` or a batch ``(B, T, m)``. Returns the estimates
    and hidden activations for steps ``1..T`` with matching leading axes.
    """
    y, x0, single = _batched(y_seq, x_hat_0, params.n)
    if y.shape[2] != params.m:
        raise InputError(f"measurement dimension {y.shape[2]} != network m={params.m}")
    if x0.shape[1] != params.n:
        raise InputError(f"initial estimate dimension {x0.shape[1]} != n={params.n}")
    B, T, _ = y.shape
    drive = y @ params.W_ay.T  # (B, T, h)
    A = np.empty((B, T, params.hidden))
    X = np.empty((B, T, params.n))
    x = x0
    WaxT, WxaT = params.W_ax.T, params.W_xa.T
    for t in range(T):
        a = _act(params.activation, drive[:, t] + x @ WaxT)
        x = a @ WxaT
        A[:, t] = a
        X[:, t] = x
    if single:
        return X[0], A[0]
    return X, A


def mse_loss(x_true_seq, x_hat_seq) -> float:
    """Mean over sequences and steps of the per-step state-averaged squared error."""
    x_true = np.asarray(x_true_seq, dtype=float)
    x_hat = np.asarray(x_hat_seq, dtype=float)
    if x_true.shape != x_hat.shape:
        raise InputError(f"misaligned sequences {x_true.shape} vs {x_hat.shape}")
    return float(np.mean((x_true - x_hat) ** 2))


def jrn_backward(params: JrnParameters, y_seq, x_true_seq, x_hat_0=None, cache=None):
    """Exact gradients of :func:`mse_loss` with respect to the three weights.

    Returns ``(loss, [dW_ay, dW_ax, dW_xa])``. ``cache`` may hold the
    ``(X, A)`` pair from a previous :func:`jrn_forward` call on the same batch.
    """
    y, x0, _ = _batched(y_seq, x_hat_0, params.n)
    x_true = np.asarray(x_true_seq, dtype=float)
    if x_true.ndim == 2:
        x_true = x_true[None]
    if cache is None:
        X, A = jrn_forward(params, y, x0)
    else:
        X, A = cache
        if X.ndim == 2:
            X, A = X[None], A[None]
    B, T, n = X.shape
    if x_true.shape != X.shape:
        raise InputError(f"targets {x_true.shape} do not match estimates {X.shape}")

    resid = X - x_true
    loss = float(np.mean(resid ** 2))
    d_direct = resid * (2.0 / (B * T * n))

    X_prev = np.concatenate([x0[:, None], X[:, :-1]], axis=1)
    dZ = np.empty_like(A)
    dW_xa = np.zeros_like(params.W_xa)
    dz_next = np.zeros((B, params.hidden))
    W_ax, W_xa = params.W_ax, params.W_xa
    tanh = params.activation == "tanh"
    for t in range(T - 1, -1, -1):
        dx = d_direct[:, t] + dz_next @ W_ax
        dW_xa += dx.T @ A[:, t]
        da = dx @ W_xa
        dz = da * (1.0 - A[:, t] ** 2) if tanh else da
        dZ[:, t] = dz
        dz_next = dz
    dW_ay = np.einsum("bth,btm->hm", dZ, y)
    dW_ax = np.einsum("bth,btn->hn", dZ, X_prev)
    return loss, [dW_ay, dW_ax, dW_xa]


# ---------------------------------------------------------------------------
# Initialization and training
# ---------------------------------------------------------------------------


def glorot_uniform(rng, rows, cols):
    bound = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, (rows, cols))


def orthogonal(rng, rows, cols):
    """(Semi-)orthogonal matrix from the QR factor of a Gaussian matrix."""
    flat = rng.standard_normal((rows, cols))
    transpose = rows < cols
    if transpose:
        flat = flat.T
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    return q.T if transpose else q


def init_params(n, m, hidden, activation, rng) -> JrnParameters:
    return JrnParameters(
        W_ay=glorot_uniform(rng, hidden, m),
        W_ax=orthogonal(rng, hidden, n),
        W_xa=orthogonal(rng, n, hidden),
        activation=activation,
    )


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        grads = [g * scale for g in grads]
    return grads


def evaluate_loss(params, trajs) -> float:
    states, meas, _ = stack_split(trajs)
    X, _ = jrn_forward(params, meas)
    return mse_loss(states, X)


def train_jrn(dataset: Dataset, cfg: TrainConfig, log=None):
    """Train on ``dataset.train`` and early-stop on ``dataset.val``.

    Returns the parameters of the epoch with the lowest validation loss and a
    :class:`TrainReport`. ``log`` is an optional ``callable(epoch, train, val)``.
    """
    # Overflow surfaces as a non-finite loss and a TrainingError.
    with np.errstate(over="ignore", invalid="ignore"):
        return _train(dataset, cfg, log)


def _train(dataset: Dataset, cfg: TrainConfig, log):
    if not dataset.train or not dataset.val:
        raise InputError("train and validation splits must be non-empty")
    started = time.perf_counter()
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    model = dataset.model
    params = init_params(model.n, model.m, cfg.hidden, cfg.activation, rng)
    xs, ys, _ = stack_split(dataset.train)
    xv, yv, _ = stack_split(dataset.val)

    report = TrainReport()
    report.initial_train_loss = mse_loss(xs, jrn_forward(params, ys)[0])
    report.initial_val_loss = mse_loss(xv, jrn_forward(params, yv)[0])

    weights = params.as_list()
    opt = Adam(weights, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    best = params.copy()
    best_val = math.inf
    since_best = 0
    N = xs.shape[0]
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(N) if cfg.shuffle else np.arange(N)
        total = 0.0
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = jrn_backward(params, ys[idx], xs[idx])
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError(f"non-finite loss or gradient in epoch {epoch}", epoch)
            if cfg.clip_norm is not None:
                grads = clip_global_norm(grads, cfg.clip_norm)
            opt.step(weights, grads)
            total += loss * len(idx)
        val = mse_loss(xv, jrn_forward(params, yv)[0])
        if not math.isfinite(val):
            raise TrainingError(f"non-finite validation loss in epoch {epoch}", epoch)
        report.train_loss.append(total / N)
        report.val_loss.append(val)
        if log is not None:
            log(epoch, total / N, val)
        if val < best_val:
            best_val = val
            best = params.copy()
            report.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    report.seconds = time.perf_counter() - started
    return best, report


def sweep_learning_rate(dataset: Dataset, cfg: TrainConfig,
                        rates=(1e-1, 1e-2, 1e-3, 1e-4)):
    """Train once per learning rate and keep the run with lowest validation loss."""
    best = None
    for lr in rates:
        run_cfg = TrainConfig(**{**cfg.__dict__, "learning_rate": lr})
        try:
            params, report = train_jrn(dataset, run_cfg)
        except TrainingError:
            continue
        if best is None or report.best_val_loss < best[2].best_val_loss:
            best = (lr, params, report)
    if best is None:
        raise TrainingError("every learning rate in the sweep diverged")
    return best


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def model_dict(params: JrnParameters, dataset_hash: Optional[str] = None) -> dict:
    def mat(W):
        return {"shape": list(W.shape), "values": [float(v) for v in W.ravel()]}

    return {
        "format_version": MODEL_FORMAT_VERSION,
        "activation": params.activation,
        "hidden": params.hidden,
        "n": params.n,
        "m": params.m,
        "W_ay": mat(params.W_ay),
        "W_ax": mat(params.W_ax),
        "W_xa": mat(params.W_xa),
        "dataset_hash": dataset_hash,
    }


def save_model(params: JrnParameters, path, dataset_hash: Optional[str] = None) -> str:
    """Write the model JSON; returns the SHA-256 of the written bytes."""
    text = serialize.dump(model_dict(params, dataset_hash), path)
    return serialize.sha256_text(text)


def load_model(path) -> JrnParameters:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from exc
    if d.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {d.get('format_version')}")
    try:
        h, n, m = int(d["hidden"]), int(d["n"]), int(d["m"])
        expected = {"W_ay": (h, m), "W_ax": (h, n), "W_xa": (n, h)}
        mats = {}
        for key, shape in expected.items():
            entry = d[key]
            if tuple(entry["shape"]) != shape:
                raise ModelFormatError(
                    f"{key} header shape {entry['shape']} does not match hidden={h}, "
                    f"n={n}, m={m}")
            vals = np.array(entry["values"], dtype=float)
            if vals.size != shape[0] * shape[1]:
                raise ModelFormatError(f"{key} has {vals.size} values, expected {shape}")
            mats[key] = vals.reshape(shape)
        return JrnParameters(activation=d["activation"], **mats)
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"corrupt model file {path}: missing {exc}") from exc
    except InputError as exc:
        raise ModelFormatError(str(exc)) from exc
