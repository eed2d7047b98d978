"""Exact filtering for linear Gaussian state-space models.

Used as ground truth for the variational filter: the Kalman posterior is the
optimum of each step free energy when past expectations are exact, and the
prediction-error decomposition gives the exact per-step log-likelihood.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.stats import multivariate_normal

from .models import LinearGaussianSSM

_LOG_2PI = np.log(2.0 * np.pi)


class SingularInnovation(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class KalmanBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=np.float64)))
        object.__setattr__(self, "cov", cov)
        if cov.shape != (self.mean.size, self.mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean {self.mean.shape}")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(cov))):
            raise ValueError("covariance is not symmetric")

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy()


def initial_belief(model: LinearGaussianSSM) -> KalmanBelief:
    return KalmanBelief(model.init_mean.copy(), np.diag(model.init_var_diag))


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def kalman_predict(model: LinearGaussianSSM, belief: KalmanBelief) -> KalmanBelief:
    A = model.A
    return KalmanBelief(A @ belief.mean, _sym(A @ belief.cov @ A.T + np.diag(model.Q_diag)))


def kalman_update(model: LinearGaussianSSM, predicted: KalmanBelief, x) -> tuple[KalmanBelief, float]:
    """Condition on ``x``; returns the posterior and ``log N(x; C m + b, C P C^T + R)``."""
    C, x = model.C, np.atleast_1d(np.asarray(x, dtype=np.float64))
    P = predicted.cov
    S = _sym(C @ P @ C.T + np.diag(model.R_diag))
    try:
        chol = linalg.cho_factor(S, lower=True)
    except linalg.LinAlgError as err:
        raise SingularInnovation(f"innovation covariance is singular: {err}") from None
    innov = x - (C @ predicted.mean + model.b)
    gain = linalg.cho_solve(chol, C @ P).T
    mean = predicted.mean + gain @ innov
    # Joseph form keeps the covariance symmetric positive definite
    I_KC = np.eye(P.shape[0]) - gain @ C
    cov = _sym(I_KC @ P @ I_KC.T + gain @ np.diag(model.R_diag) @ gain.T)
    logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
    maha = innov @ linalg.cho_solve(chol, innov)
    loglik = -0.5 * (x.size * _LOG_2PI + logdet + maha)
    return KalmanBelief(mean, cov), float(loglik)


def kalman_filter_sequence(model: LinearGaussianSSM, xs, return_steps: bool = False):
    """Filter ``xs`` of shape ``(T, obs_dim)``.

    Returns ``(beliefs, total_loglik)``, or ``(beliefs, total_loglik, step_logliks)``
    with ``return_steps``. ``total_loglik`` is the exact ``log p(x_{1:T})``.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(len(xs), -1)
    if len(xs) < 1:
        raise ValueError("need at least one observation")
    beliefs, steps = [], []
    pred = initial_belief(model)
    for t, x in enumerate(xs):
        if t > 0:
            pred = kalman_predict(model, beliefs[-1])
        post, ll = kalman_update(model, pred, x)
        beliefs.append(post)
        steps.append(ll)
    total = float(np.sum(steps))
    if return_steps:
        return beliefs, total, np.array(steps)
    return beliefs, total


def latent_moments(model: LinearGaussianSSM, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean ``(T*n,)`` and covariance ``(T*n, T*n)`` of the stacked latents ``z_{1:T}``."""
    A, n = model.A, model.latent_dim
    means = [model.init_mean.copy()]
    P = np.zeros((T * n, T * n))
    P[:n, :n] = np.diag(model.init_var_diag)
    for t in range(1, T):
        means.append(A @ means[-1])
        cur, prev = slice(t * n, (t + 1) * n), slice((t - 1) * n, t * n)
        # Cov(z_t, z_s) = A Cov(z_{t-1}, z_s) for s < t
        P[cur, : t * n] = A @ P[prev, : t * n]
        P[: t * n, cur] = P[cur, : t * n].T
        P[cur, cur] = A @ P[prev, prev] @ A.T + np.diag(model.Q_diag)
    return np.concatenate(means), _sym(P)


def joint_gaussian_loglik(model: LinearGaussianSSM, xs) -> float:
    """``log p(x_{1:T})`` from the dense ``T*m``-dimensional joint Gaussian.

    Cubic in ``T``; meant as a cross-check for short sequences.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(len(xs), -1)
    T = len(xs)
    mz, P = latent_moments(model, T)
    big_C = np.kron(np.eye(T), model.C)
    mx = big_C @ mz + np.tile(model.b, T)
    cov = _sym(big_C @ P @ big_C.T + np.kron(np.eye(T), np.diag(model.R_diag)))
    return float(multivariate_normal(mx, cov).logpdf(xs.reshape(-1)))


def joint_state_obs_logpdf(model: LinearGaussianSSM, xs, zs) -> float:
    """``log p(x_{1:T}, z_{1:T})`` from the dense joint Gaussian of latents and observations."""
    xs = np.asarray(xs, dtype=np.float64).reshape(len(xs), -1)
    zs = np.asarray(zs, dtype=np.float64).reshape(len(zs), -1)
    T = len(xs)
    mz, P = latent_moments(model, T)
    big_C = np.kron(np.eye(T), model.C)
    mx = big_C @ mz + np.tile(model.b, T)
    cross = P @ big_C.T
    cov = np.block([[P, cross], [cross.T, big_C @ P @ big_C.T + np.kron(np.eye(T), np.diag(model.R_diag))]])
    v = np.concatenate([zs.reshape(-1), xs.reshape(-1)])
    return float(multivariate_normal(np.concatenate([mz, mx]), _sym(cov)).logpdf(v))
