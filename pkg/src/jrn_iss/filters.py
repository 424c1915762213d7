"""Kalman, extended Kalman and unscented Kalman filter baselines."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import SystemModel, finite_difference_jacobian, fmt_float
from .errors import ConfigurationError, NumericalError

FILTER_KINDS = ("kf", "ekf", "ukf")
EKF_MODES = ("current_estimate", "fixed_origin")


@dataclass
class FilterState:
    x_hat: np.ndarray
    P: np.ndarray


@dataclass(frozen=True)
class UkfConfig:
    alpha: float = 1.0
    beta: float = 2.0
    kappa: float = 0.0

    def lam(self, n: int) -> float:
        return self.alpha ** 2 * (n + self.kappa) - n

    def weights(self, n: int):
        """Mean and covariance weights for the ``2n + 1`` sigma points."""
        lam = self.lam(n)
        if n + lam == 0:
            raise ConfigurationError("UKF constants give n + lambda = 0")
        wm = np.full(2 * n + 1, 0.5 / (n + lam))
        wc = wm.copy()
        wm[0] = lam / (n + lam)
        wc[0] = wm[0] + (1.0 - self.alpha ** 2 + self.beta)
        return wm, wc


def _symmetrize(P):
    return 0.5 * (P + P.T)


def _gain(P_xy, S, step):
    # K = P_xy S^-1, computed as a solve against S^T.
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > 1e14:
        raise NumericalError(f"singular innovation covariance at step {step}")
    return np.linalg.solve(S.T, P_xy.T).T


def kf_step(A, H, Q_w, R_v, prior: FilterState, y, step: Optional[int] = None) -> FilterState:
    """One predict/update cycle of the linear Kalman filter."""
    x_pred = A @ prior.x_hat
    P_pred = A @ prior.P @ A.T + Q_w
    return _linear_update(x_pred, P_pred, H @ x_pred, H, R_v, y, step)


def _linear_update(x_pred, P_pred, y_pred, H, R_v, y, step):
    S = H @ P_pred @ H.T + R_v
    K = _gain(P_pred @ H.T, S, step)
    x_new = x_pred + K @ (np.asarray(y, dtype=float) - y_pred)
    P_new = (np.eye(x_pred.shape[0]) - K @ H) @ P_pred
    return FilterState(x_new, _symmetrize(P_new))


def _jacobians(model: SystemModel):
    jf = model.jacobian_f or (lambda x: finite_difference_jacobian(model.f, x))
    jh = model.jacobian_h or (lambda x: finite_difference_jacobian(model.h, x))
    return jf, jh


def ekf_step(model: SystemModel, prior: FilterState, y, mode: str = "current_estimate",
             step: Optional[int] = None, jacobians=None) -> FilterState:
    """Extended Kalman filter step.

    ``current_estimate`` linearizes ``f`` at the prior estimate and ``h`` at
    the predicted state; ``fixed_origin`` linearizes both at the origin.
    Mean propagation always uses the nonlinear maps.
    """
    if mode not in EKF_MODES:
        raise ConfigurationError(f"unknown EKF mode {mode!r}")
    jf, jh = jacobians or _jacobians(model)
    x_pred = np.asarray(model.f(prior.x_hat), dtype=float)
    if mode == "current_estimate":
        A = jf(prior.x_hat)
        H = jh(x_pred)
    else:
        zero = np.zeros(model.n)
        A = jf(zero)
        H = jh(zero)
    P_pred = A @ prior.P @ A.T + model.Q_w
    y_pred = np.asarray(model.h(x_pred), dtype=float)
    return _linear_update(x_pred, P_pred, y_pred, H, model.R_v, y, step)


def cholesky_jitter(M, step=None, jitter=1e-9, retries=3) -> np.ndarray:
    """Lower Cholesky factor, adding ``jitter * 10**k`` to the diagonal on failure."""
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(M.shape[0])
    for k in range(retries):
        try:
            return np.linalg.cholesky(M + jitter * 10 ** k * eye)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(f"Cholesky factorization failed at step {step}")


def sigma_points(x, P, cfg: UkfConfig, step=None) -> np.ndarray:
    """Sigma points as rows, shape ``(2n + 1, n)``."""
    n = x.shape[0]
    L = cholesky_jitter((n + cfg.lam(n)) * P, step)
    return np.vstack([x, x + L.T, x - L.T])


def unscented_transform(points, wm, wc, fun):
    """Propagate sigma points through ``fun``; returns mean, cov, images."""
    images = np.asarray(fun(points.T), dtype=float).T
    mean = wm @ images
    d = images - mean
    return mean, (wc[:, None] * d).T @ d, images


def ukf_step(model: SystemModel, cfg: UkfConfig, prior: FilterState, y,
             step: Optional[int] = None) -> FilterState:
    """Unscented Kalman filter step; sigma points are redrawn before the update."""
    wm, wc = cfg.weights(model.n)
    pts = sigma_points(prior.x_hat, prior.P, cfg, step)
    x_pred, P_pred, _ = unscented_transform(pts, wm, wc, model.f)
    P_pred = _symmetrize(P_pred + model.Q_w)

    pts = sigma_points(x_pred, P_pred, cfg, step)
    y_pred, S, y_pts = unscented_transform(pts, wm, wc, model.h)
    S = S + model.R_v
    P_xy = (wc[:, None] * (pts - x_pred)).T @ (y_pts - y_pred)
    K = _gain(P_xy, S, step)
    x_new = x_pred + K @ (np.asarray(y, dtype=float) - y_pred)
    P_new = P_pred - K @ S @ K.T
    return FilterState(x_new, _symmetrize(P_new))


def run_filter(model: SystemModel, kind: str, trajectories, mode: str = "current_estimate",
               ukf: UkfConfig = UkfConfig(), return_covariances: bool = False):
    """Filter every trajectory from its recorded initial mean.

    Returns an array ``(num_sequences, T, n)`` of estimates for steps
    ``1..T`` (and the matching covariances if requested).
    """
    if kind not in FILTER_KINDS:
        raise ConfigurationError(f"unknown filter kind {kind!r}")
    if kind == "kf" and not model.is_linear:
        raise ConfigurationError(f"KF requires a linear model; {model.name} is nonlinear")
    jac = _jacobians(model)
    out, covs = [], []
    for tr in trajectories:
        if tr.measurements.shape[1] != model.m or tr.states.shape[1] != model.n:
            raise ConfigurationError(
                f"trajectory {tr.seq_id} does not match model {model.name} dimensions")
        state = FilterState(np.array(tr.x0_mean, dtype=float), model.P0.copy())
        est = np.empty((tr.T, model.n))
        cov = np.empty((tr.T, model.n, model.n))
        for t, y in enumerate(tr.measurements):
            if kind == "kf":
                A, H = model.linear
                state = kf_step(A, H, model.Q_w, model.R_v, state, y, step=t + 1)
            elif kind == "ekf":
                state = ekf_step(model, state, y, mode=mode, step=t + 1, jacobians=jac)
            else:
                state = ukf_step(model, ukf, state, y, step=t + 1)
            est[t] = state.x_hat
            cov[t] = state.P
        out.append(est)
        covs.append(cov)
    est = np.stack(out) if out else np.empty((0, 0, model.n))
    if return_covariances:
        return est, np.stack(covs)
    return est


def save_estimates(path, trajectories, estimates, manifest: dict) -> None:
    """CSV ``seq,t,xhat1..xhatn`` plus a ``<path>.json`` run manifest."""
    n = estimates.shape[2]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["seq", "t"] + [f"xhat{i + 1}" for i in range(n)])
        for tr, est in zip(trajectories, estimates):
            for t, row in enumerate(est, start=1):
                wr.writerow([tr.seq_id, t] + [fmt_float(v) for v in row])
    with open(os.path.splitext(path)[0] + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
