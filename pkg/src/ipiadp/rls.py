"""Recursive and batch least squares for the incremental model.

The identified model predicts the next state increment from the augmented
regressor ``X_k = [dx_k; du_k]``::

    dx_{k+1}^T ~= X_k^T Theta,     Theta = [A B]^T  ((n_x + n_u) x n_x)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, IdentifierDegradedError, InsufficientExcitationError

COV_FLOOR = 1e-12
COV_CEIL = 1e12
STATE_VERSION = 1


@dataclass(frozen=True)
class RlsConfig:
    kappa: float = 0.98
    cov0: float = 1e6
    theta0: np.ndarray | None = None

    def __post_init__(self):
        if not (0.0 < self.kappa <= 1.0):
            raise ConfigurationError(f"forgetting factor must be in (0, 1], got {self.kappa}")
        if not self.cov0 > 0.0:
            raise ConfigurationError(f"initial covariance scale must be positive, got {self.cov0}")


def split_theta(theta, n_x):
    """Return ``(A, B)`` from a stacked ``Theta = [A B]^T``."""
    theta = np.asarray(theta, dtype=float)
    return theta[:n_x].T.copy(), theta[n_x:].T.copy()


def stack_theta(A, B):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    return np.vstack([A.T, B.T])


def regressor(dx, du):
    return np.concatenate([np.atleast_1d(np.asarray(dx, float)), np.atleast_1d(np.asarray(du, float))])


def predict(theta, X):
    theta = np.asarray(theta, dtype=float)
    X = np.atleast_1d(np.asarray(X, dtype=float))
    if theta.ndim != 2 or X.shape != (theta.shape[0],):
        raise ConfigurationError(f"regressor length {X.shape} does not match Theta rows {theta.shape}")
    return X @ theta


def clip_covariance(cov):
    """Symmetrize and clip eigenvalues into ``[COV_FLOOR, COV_CEIL]``.

    Returns ``(cov, clipped)``; ``clipped`` is True when any eigenvalue moved.
    """
    cov = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(cov)
    if w.min() >= COV_FLOOR and w.max() <= COV_CEIL:
        return cov, False
    w = np.clip(w, COV_FLOOR, COV_CEIL)
    cov = (V * w) @ V.T
    return 0.5 * (cov + cov.T), True


def update(theta, cov, X, observed, cfg: RlsConfig, clip: bool = True):
    """One forgetting-factor RLS step.

    Returns ``(theta_new, cov_new, innovation)``.  Raises
    :class:`IdentifierDegradedError` (carrying the inputs as the last valid
    estimate) if the step produces non-finite numbers.
    """
    theta = np.asarray(theta, dtype=float)
    cov = np.asarray(cov, dtype=float)
    X = np.atleast_1d(np.asarray(X, dtype=float))
    observed = np.atleast_1d(np.asarray(observed, dtype=float))
    if observed.shape != (theta.shape[1],):
        raise ConfigurationError(f"observation length {observed.shape} does not match Theta columns")
    kappa = cfg.kappa
    with np.errstate(all="ignore"):
        eps = observed - predict(theta, X)
        LX = cov @ X
        denom = kappa + X @ LX
        theta_new = theta + np.outer(LX / denom, eps)
        cov_new = (cov - np.outer(LX, LX) / denom) / kappa
    cov_new = 0.5 * (cov_new + cov_new.T)
    if not (np.isfinite(denom) and denom > 0 and np.all(np.isfinite(theta_new))
            and np.all(np.isfinite(cov_new))):
        raise IdentifierDegradedError("RLS update produced non-finite values", theta, cov)
    if clip:
        cov_new, _ = clip_covariance(cov_new)
    return theta_new, cov_new, eps


def batch_ls(regressors, observations, ridge: float = 1e-9, rank_tol: float = 1e-10):
    """Ridge-regularized least squares over stacked samples.

    ``regressors`` is ``(N, n_x + n_u)``, ``observations`` is ``(N, n_x)``.
    Raises :class:`InsufficientExcitationError` when there are too few samples
    or the regressor matrix is numerically rank deficient.
    """
    Xm = np.atleast_2d(np.asarray(regressors, dtype=float))
    Ym = np.asarray(observations, dtype=float)
    if Ym.ndim == 1:
        Ym = Ym[:, None]
    n, m = Xm.shape
    if Ym.shape[0] != n:
        raise ConfigurationError("regressor and observation counts differ")
    if n < m:
        raise InsufficientExcitationError(f"{n} samples for {m} regressor entries")
    s = np.linalg.svd(Xm, compute_uv=False)
    if s[0] == 0.0 or s[-1] / s[0] < rank_tol:
        raise InsufficientExcitationError(
            f"regressor matrix is rank deficient (singular values {s})")
    G = Xm.T @ Xm + ridge * np.eye(m)
    return np.linalg.solve(G, Xm.T @ Ym)


class Identifier:
    """Stateful RLS identifier with clip-event bookkeeping."""

    def __init__(self, n_x, n_u, cfg: RlsConfig = RlsConfig(), theta=None, cov=None):
        self.n_x, self.n_u = n_x, n_u
        self.cfg = cfg
        m = n_x + n_u
        if theta is None:
            theta = cfg.theta0 if cfg.theta0 is not None else np.zeros((m, n_x))
        self.theta = np.array(theta, dtype=float).reshape(m, n_x)
        self.cov = np.array(cov, dtype=float) if cov is not None else cfg.cov0 * np.eye(m)
        self.steps = 0
        self.clip_events = 0

    @property
    def A(self):
        return split_theta(self.theta, self.n_x)[0]

    @property
    def B(self):
        return split_theta(self.theta, self.n_x)[1]

    def update(self, X, observed):
        theta, cov, eps = update(self.theta, self.cov, X, observed, self.cfg, clip=False)
        cov, clipped = clip_covariance(cov)
        self.theta, self.cov = theta, cov
        self.steps += 1
        self.clip_events += int(clipped)
        return eps

    def to_dict(self):
        return {
            "version": STATE_VERSION,
            "n_x": self.n_x,
            "n_u": self.n_u,
            "kappa": self.cfg.kappa,
            "theta": self.theta.ravel().tolist(),
            "cov": self.cov.ravel().tolist(),
            "steps": self.steps,
            "clip_events": self.clip_events,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != STATE_VERSION:
            raise ConfigurationError(f"unsupported identifier state version {d.get('version')}")
        n_x, n_u = d["n_x"], d["n_u"]
        m = n_x + n_u
        ident = cls(n_x, n_u, RlsConfig(kappa=d["kappa"]),
                    theta=np.reshape(d["theta"], (m, n_x)), cov=np.reshape(d["cov"], (m, m)))
        ident.steps = d["steps"]
        ident.clip_events = d.get("clip_events", 0)
        return ident
