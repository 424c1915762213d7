"""Benchmark systems, discretization, noisy simulation and datasets.

State vectors are 1-D arrays of length ``n``. The discrete maps ``f`` and
``h`` also accept ``(n, K)`` arrays (one column per point) and numpy object
arrays of :class:`jrn_iss.verifier.expr.Expr` nodes, so the same code path
produces both numeric trajectories and the symbolic expressions consumed by
the verifier.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import (
    ConfigurationError,
    DivergenceError,
    InputError,
    ModelFormatError,
    NumericalError,
    UnknownModelError,
)

DATASET_FORMAT_VERSION = 1

# Sampling periods per benchmark. See README for why the nonlinear systems
# do not use 0.01 s.
DEFAULT_DT = {"mass_spring": 0.1, "down_pendulum": 0.1, "reversed_vdp": 0.2}
NOISE_VARIANCE = 0.01


def fmt_float(x: float) -> str:
    return "%.17g" % x


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Discrete-time plant ``x' = f(x) + w``, ``y = h(x) + v``.

    ``linear`` holds ``(A, H)`` when both maps are linear. ``f_cont`` and
    ``jacobian_cont`` are kept for integrated (nonlinear) benchmarks.
    """

    name: str
    n: int
    m: int
    f: Callable
    h: Callable
    Q_w: np.ndarray
    R_v: np.ndarray
    P0: np.ndarray
    dt: float
    jacobian_f: Optional[Callable] = None
    jacobian_h: Optional[Callable] = None
    linear: Optional[tuple] = None
    f_cont: Optional[Callable] = None
    jacobian_cont: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for label, cov, d in (("Q_w", self.Q_w, self.n), ("R_v", self.R_v, self.m),
                              ("P0", self.P0, self.n)):
            cov = np.asarray(cov, dtype=float)
            if cov.shape != (d, d):
                raise ConfigurationError(f"{label} must be {d}x{d}, got {cov.shape}")
            if not np.allclose(cov, cov.T, atol=0.0, rtol=0.0):
                raise ConfigurationError(f"{label} is not symmetric")
            if np.linalg.eigvalsh(cov).min() < -1e-12:
                raise ConfigurationError(f"{label} is not positive semi-definite")
            object.__setattr__(self, label, cov)

    @property
    def is_linear(self) -> bool:
        return self.linear is not None

    def with_noise(self, Q_w=None, R_v=None, P0=None) -> "SystemModel":
        """Copy of the model with some covariances replaced."""
        kw = dict(self.__dict__)
        if Q_w is not None:
            kw["Q_w"] = np.asarray(Q_w, dtype=float)
        if R_v is not None:
            kw["R_v"] = np.asarray(R_v, dtype=float)
        if P0 is not None:
            kw["P0"] = np.asarray(P0, dtype=float)
        return SystemModel(**kw)

    def config_dict(self) -> dict:
        return {
            "name": self.name,
            "n": self.n,
            "m": self.m,
            "dt": self.dt,
            "params": {k: self.params[k] for k in sorted(self.params)},
            "Q_w": self.Q_w.tolist(),
            "R_v": self.R_v.tolist(),
            "P0": self.P0.tolist(),
        }


@dataclass
class Trajectory:
    seq_id: int
    states: np.ndarray  # (T+1, n), index 0..T
    measurements: np.ndarray  # (T, m), measurement t+1 at row t
    seed: int
    x0_mean: np.ndarray

    @property
    def T(self) -> int:
        return self.measurements.shape[0]


@dataclass
class Dataset:
    model: SystemModel
    train: list
    val: list
    test: list
    T: int
    master_seed: int

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}

    @property
    def num_sequences(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------


def discretize_linear_zoh(A_c, dt: float) -> np.ndarray:
    """Zero-order-hold state matrix ``exp(A_c * dt)``."""
    A_c = np.asarray(A_c, dtype=float)
    if A_c.ndim != 2 or A_c.shape[0] != A_c.shape[1]:
        raise InputError(f"A_c must be square, got shape {A_c.shape}")
    if not np.all(np.isfinite(A_c)):
        raise InputError("A_c has non-finite entries")
    if not dt > 0:
        raise InputError(f"dt must be positive, got {dt}")
    return scipy.linalg.expm(A_c * dt)


def rk4_step(f_cont: Callable, x, dt: float):
    """One classical Runge-Kutta step of ``x' = f_cont(x)``."""
    if not dt > 0:
        raise InputError(f"dt must be positive, got {dt}")
    k1 = f_cont(x)
    k2 = f_cont(x + (0.5 * dt) * k1)
    k3 = f_cont(x + (0.5 * dt) * k2)
    k4 = f_cont(x + dt * k3)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if getattr(out, "dtype", None) != object and not np.all(np.isfinite(out)):
        raise NumericalError("RK4 step produced a non-finite state")
    return out


def rk4_jacobian(f_cont: Callable, jac_cont: Callable, x, dt: float) -> np.ndarray:
    """Exact Jacobian of the map ``x -> rk4_step(f_cont, x, dt)``."""
    x = np.asarray(x, dtype=float)
    eye = np.eye(x.shape[0])
    k1 = f_cont(x)
    J1 = jac_cont(x)
    x2 = x + 0.5 * dt * k1
    k2 = f_cont(x2)
    J2 = jac_cont(x2) @ (eye + 0.5 * dt * J1)
    x3 = x + 0.5 * dt * k2
    k3 = f_cont(x3)
    J3 = jac_cont(x3) @ (eye + 0.5 * dt * J2)
    x4 = x + dt * k3
    J4 = jac_cont(x4) @ (eye + dt * J3)
    return eye + (dt / 6.0) * (J1 + 2.0 * J2 + 2.0 * J3 + J4)


def finite_difference_jacobian(fun: Callable, x, step: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.shape[0]):
        d = np.zeros_like(x)
        d[i] = step * max(1.0, abs(x[i]))
        cols.append((np.asarray(fun(x + d)) - np.asarray(fun(x - d))) / (2 * d[i]))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# Built-in benchmarks
# ---------------------------------------------------------------------------


def _pendulum_rhs(g, l, m, b):
    c_sin = g / l
    c_damp = b / (m * l * l)

    def rhs(x):
        return np.array([x[1], -c_sin * np.sin(x[0]) - c_damp * x[1]])

    def jac(x):
        return np.array([[0.0, 1.0], [-c_sin * np.cos(x[0]), -c_damp]])

    return rhs, jac


def _reversed_vdp_rhs(mu):
    def rhs(x):
        return np.array([-x[1], x[0] - mu * (1.0 - x[0] * x[0]) * x[1]])

    def jac(x):
        return np.array([[0.0, -1.0],
                         [1.0 + 2.0 * mu * x[0] * x[1], -mu * (1.0 - x[0] ** 2)]])

    return rhs, jac


def _position_measurement(n):
    H = np.zeros((1, n))
    H[0, 0] = 1.0

    def h(x):
        return x[:1]

    def jac_h(x):
        return H.copy()

    return h, jac_h, H


def _integrated_model(name, rhs, jac, dt, params, noise):
    def f(x):
        return rk4_step(rhs, x, dt)

    def jac_f(x):
        return rk4_jacobian(rhs, jac, x, dt)

    h, jac_h, _ = _position_measurement(2)
    cov = noise * np.eye(2)
    return SystemModel(
        name=name, n=2, m=1, f=f, h=h, Q_w=cov, R_v=noise * np.eye(1), P0=cov,
        dt=dt, jacobian_f=jac_f, jacobian_h=jac_h, f_cont=rhs, jacobian_cont=jac,
        params=params,
    )


def mass_spring_matrix(m=10.0, b=6.0, k=800.0) -> np.ndarray:
    return np.array([[0.0, 1.0], [-k / m, -b / m]])


def linear_model(name, A, H, Q_w, R_v, P0, dt=1.0, params=None) -> SystemModel:
    """Model with ``f(x) = A x`` and ``h(x) = H x``."""
    A = np.asarray(A, dtype=float)
    H = np.asarray(H, dtype=float)

    def f(x):
        return A @ x

    def h(x):
        return H @ x

    return SystemModel(
        name=name, n=A.shape[0], m=H.shape[0], f=f, h=h, Q_w=Q_w, R_v=R_v, P0=P0,
        dt=dt, jacobian_f=lambda x: A.copy(), jacobian_h=lambda x: H.copy(),
        linear=(A, H), params=dict(params or {}),
    )


def builtin_model(name: str, dt: Optional[float] = None, noise: float = NOISE_VARIANCE,
                  **overrides) -> SystemModel:
    """Return one of ``mass_spring``, ``down_pendulum``, ``reversed_vdp``.

    Physical parameters may be overridden by keyword (``m``, ``b``, ``k``,
    ``l``, ``g``, ``mu``). ``noise`` scales all three identity covariances.
    """
    if name not in DEFAULT_DT:
        raise UnknownModelError(f"unknown model {name!r}; choose from {sorted(DEFAULT_DT)}")
    dt = DEFAULT_DT[name] if dt is None else float(dt)
    if not dt > 0:
        raise InputError(f"dt must be positive, got {dt}")

    if name == "mass_spring":
        params = {"m": 10.0, "b": 6.0, "k": 800.0}
        params.update({k: float(v) for k, v in overrides.items()})
        A = discretize_linear_zoh(mass_spring_matrix(**params), dt)
        _, _, H = _position_measurement(2)
        cov = noise * np.eye(2)
        return linear_model(name, A, H, cov, noise * np.eye(1), cov, dt=dt, params=params)

    if name == "down_pendulum":
        params = {"m": 2.0, "b": 0.9, "l": 1.0, "g": 9.81}
        params.update({k: float(v) for k, v in overrides.items()})
        rhs, jac = _pendulum_rhs(params["g"], params["l"], params["m"], params["b"])
        return _integrated_model(name, rhs, jac, dt, params, noise)

    params = {"mu": 1.0}
    params.update({k: float(v) for k, v in overrides.items()})
    rhs, jac = _reversed_vdp_rhs(params["mu"])
    return _integrated_model(name, rhs, jac, dt, params, noise)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def make_rng(seed) -> np.random.Generator:
    """Counter-based Philox generator; normals come from numpy's ziggurat."""
    return np.random.Generator(np.random.Philox(seed))


def derive_seed(master_seed: int, index: int) -> int:
    ss = np.random.SeedSequence([int(master_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def psd_sqrt(cov) -> np.ndarray:
    """Factor ``L`` with ``L @ L.T == cov`` that tolerates singular ``cov``."""
    cov = np.asarray(cov, dtype=float)
    w, V = np.linalg.eigh(cov)
    return V * np.sqrt(np.clip(w, 0.0, None))


def sample_gaussian(rng: np.random.Generator, cov, size: int) -> np.ndarray:
    L = psd_sqrt(cov)
    return rng.standard_normal((size, L.shape[0])) @ L.T


def simulate_trajectory(model: SystemModel, T: int, seed: int, seq_id: int = 0,
                        blowup: float = 1e3, zero_mean: bool = False) -> Trajectory:
    """Simulate ``T`` noisy steps of ``model`` from a random initial state.

    Draw order is fixed (initial mean, initial noise, process noise,
    measurement noise) so a seed reproduces the trajectory bit for bit.
    ``zero_mean`` forces the uniform initial-mean draw to zero.
    """
    if T < 1:
        raise InputError(f"T must be >= 1, got {T}")
    rng = make_rng(seed)
    n = model.n
    x0_mean = rng.uniform(-1.0, 1.0, n)
    if zero_mean:
        x0_mean = np.zeros(n)
    x0 = x0_mean + sample_gaussian(rng, model.P0, 1)[0]
    w = sample_gaussian(rng, model.Q_w, T)
    v = sample_gaussian(rng, model.R_v, T)

    states = np.empty((T + 1, n))
    meas = np.empty((T, model.m))
    states[0] = x0
    x = x0
    for t in range(T):
        x = np.asarray(model.f(x), dtype=float) + w[t]
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > blowup:
            raise DivergenceError(
                f"{model.name}: state norm exceeded {blowup} at step {t + 1} (seed {seed})")
        states[t + 1] = x
        meas[t] = np.asarray(model.h(x), dtype=float) + v[t]
    return Trajectory(seq_id=seq_id, states=states, measurements=meas, seed=int(seed),
                      x0_mean=x0_mean)


def simulate_noise_free(model: SystemModel, x0, T: int) -> np.ndarray:
    """Deterministic rollout of ``f`` from ``x0``; returns ``(T+1, n)``."""
    out = np.empty((T + 1, model.n))
    out[0] = x0
    x = np.asarray(x0, dtype=float)
    for t in range(T):
        x = np.asarray(model.f(x), dtype=float)
        out[t + 1] = x
    return out


def generate_dataset(model: SystemModel, num_sequences: int, T: int,
                     master_seed: int) -> Dataset:
    """Independent trajectories split 80/10/10 in generation order."""
    if num_sequences <= 0 or num_sequences % 10:
        raise ConfigurationError(
            f"num_sequences must be a positive multiple of 10, got {num_sequences}")
    trajs = [simulate_trajectory(model, T, derive_seed(master_seed, k), seq_id=k)
             for k in range(num_sequences)]
    n_train = num_sequences * 8 // 10
    n_val = num_sequences // 10
    return Dataset(model=model, train=trajs[:n_train], val=trajs[n_train:n_train + n_val],
                   test=trajs[n_train + n_val:], T=T, master_seed=int(master_seed))


def stack_split(trajs):
    """Arrays ``(states[:, 1:], measurements, x0_mean)`` stacked over sequences."""
    states = np.stack([tr.states[1:] for tr in trajs])
    meas = np.stack([tr.measurements for tr in trajs])
    x0m = np.stack([tr.x0_mean for tr in trajs])
    return states, meas, x0m


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, directory, config_hash: Optional[str] = None) -> dict:
    """Write ``train.csv``, ``val.csv``, ``test.csv`` and ``meta.json``."""
    os.makedirs(directory, exist_ok=True)
    model = dataset.model
    header = (["seq", "t"] + [f"x{i + 1}" for i in range(model.n)]
              + [f"y{i + 1}" for i in range(model.m)])
    sequences = []
    for split, trajs in dataset.splits().items():
        with open(os.path.join(directory, f"{split}.csv"), "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(header)
            for tr in trajs:
                for t in range(tr.T + 1):
                    ys = ([""] * model.m if t == 0
                          else [fmt_float(v) for v in tr.measurements[t - 1]])
                    wr.writerow([tr.seq_id, t] + [fmt_float(v) for v in tr.states[t]] + ys)
                sequences.append({"seq": tr.seq_id, "split": split, "seed": tr.seed,
                                  "x0_mean": [float(v) for v in tr.x0_mean]})
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "model": model.config_dict(),
        "T": dataset.T,
        "master_seed": dataset.master_seed,
        "split_sizes": {k: len(v) for k, v in dataset.splits().items()},
        "sequences": sequences,
        "config_hash": config_hash,
    }
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return meta


def dataset_hash(directory) -> str:
    h = hashlib.sha256()
    for name in ("meta.json", "train.csv", "val.csv", "test.csv"):
        with open(os.path.join(directory, name), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def load_dataset(directory, model: Optional[SystemModel] = None) -> Dataset:
    """Read a dataset written by :func:`save_dataset`.

    Without ``model`` the built-in benchmark named in ``meta.json`` is rebuilt
    with the recorded ``dt``, parameters and covariances.
    """
    try:
        with open(os.path.join(directory, "meta.json")) as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot read dataset metadata: {exc}") from exc
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported dataset format {meta.get('format_version')}")
    mcfg = meta["model"]
    if model is None:
        model = builtin_model(mcfg["name"], dt=mcfg["dt"], **mcfg["params"]).with_noise(
            Q_w=mcfg["Q_w"], R_v=mcfg["R_v"], P0=mcfg["P0"])
    elif model.name != mcfg["name"] or model.n != mcfg["n"] or model.m != mcfg["m"]:
        raise ConfigurationError(
            f"dataset was generated for {mcfg['name']}, not {model.name}")
    info = {s["seq"]: s for s in meta["sequences"]}
    n, m, T = model.n, model.m, meta["T"]
    splits = {}
    for split in ("train", "val", "test"):
        rows = {}
        with open(os.path.join(directory, f"{split}.csv"), newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            if len(header) != 2 + n + m:
                raise ModelFormatError(f"{split}.csv header does not match n={n}, m={m}")
            for row in rd:
                rows.setdefault(int(row[0]), []).append(row)
        trajs = []
        for seq in sorted(rows):
            r = rows[seq]
            if len(r) != T + 1:
                raise ModelFormatError(f"sequence {seq} has {len(r)} rows, expected {T + 1}")
            states = np.array([[float(v) for v in row[2:2 + n]] for row in r])
            meas = np.array([[float(v) for v in row[2 + n:]] for row in r[1:]])
            trajs.append(Trajectory(seq_id=seq, states=states, measurements=meas,
                                    seed=int(info[seq]["seed"]),
                                    x0_mean=np.array(info[seq]["x0_mean"], dtype=float)))
        splits[split] = trajs
    return Dataset(model=model, T=T, master_seed=meta["master_seed"], **splits)
