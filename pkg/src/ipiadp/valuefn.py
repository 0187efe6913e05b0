"""Quadratic value approximator ``W(x) = x^T P x`` and its fitting rules."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import rls
from .errors import ConfigurationError, FitQualityWarning, InsufficientExcitationError

PSD_TOL = 1e-8
SYM_TOL = 1e-10


def _sym(M):
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class CostSpec:
    """Discounted quadratic stage cost ``x^T Q x + u^T R u``.

    ``gamma = 0`` is accepted (pure stage cost); experiment configs further
    require ``gamma > 0``.
    """
    Q: np.ndarray
    R: np.ndarray
    gamma: float

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        if Q.shape[0] != Q.shape[1] or R.shape[0] != R.shape[1]:
            raise ConfigurationError("Q and R must be square")
        if not np.allclose(Q, Q.T, atol=SYM_TOL) or np.linalg.eigvalsh(_sym(Q)).min() <= 0:
            raise ConfigurationError("Q must be symmetric positive definite")
        if not np.allclose(R, R.T, atol=SYM_TOL) or np.linalg.eigvalsh(_sym(R)).min() <= 0:
            raise ConfigurationError("R must be symmetric positive definite")
        if not (0.0 <= self.gamma < 1.0):
            raise ConfigurationError(f"discount must lie in [0, 1), got {self.gamma}")

    @property
    def n_x(self):
        return self.Q.shape[0]

    @property
    def n_u(self):
        return self.R.shape[0]

    def stage(self, x, u):
        x = np.atleast_1d(x)
        u = np.atleast_1d(u)
        return float(x @ self.Q @ x + u @ self.R @ u)

    def lipschitz_constant(self, radius):
        """Lipschitz constant of the stage cost in ``x`` on the ball of ``radius``.

        ``|x'Qx - y'Qy| = |(x - y)' Q (x + y)| <= 2 r ||Q|| ||x - y||``; the
        input term cancels.
        """
        return 2.0 * float(radius) * float(np.linalg.eigvalsh(_sym(self.Q)).max())


@dataclass(frozen=True)
class QuadraticKernel:
    P: np.ndarray
    gamma: float = float("nan")

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if P.shape[0] != P.shape[1]:
            raise ConfigurationError("kernel matrix must be square")
        object.__setattr__(self, "P", _sym(P))

    @classmethod
    def zeros(cls, n, gamma=float("nan")):
        return cls(np.zeros((n, n)), gamma)

    @property
    def n(self):
        return self.P.shape[0]

    def min_eig(self):
        return float(np.linalg.eigvalsh(self.P).min())

    def is_psd(self, tol=PSD_TOL):
        return self.min_eig() >= -tol

    def projected(self):
        """Nearest PSD kernel (negative eigenvalues clamped to zero)."""
        w, V = np.linalg.eigh(self.P)
        return replace(self, P=_sym((V * np.maximum(w, 0.0)) @ V.T))

    def halfvec(self):
        return halfvec(self.P)

    def to_list(self):
        return self.P.ravel().tolist()


def eval_value(kernel, x):
    P = kernel.P if isinstance(kernel, QuadraticKernel) else np.atleast_2d(kernel)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (P.shape[0],):
        raise ConfigurationError(f"state length {x.shape} does not match kernel {P.shape}")
    return float(x @ P @ x)


def predict_next_state(x, dx, du, theta):
    """``x + A dx + B du`` through the identified incremental model."""
    theta = np.asarray(theta, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n_x = x.shape[0]
    if theta.shape[1] != n_x:
        raise ConfigurationError(f"Theta shape {theta.shape} does not match state length {n_x}")
    return x + rls.predict(theta, rls.regressor(dx, du))


def bellman_target(x, u, x_next_hat, kernel, cost: CostSpec):
    return cost.stage(x, u) + cost.gamma * eval_value(kernel, x_next_hat)


def quad_features(x):
    """Features ``phi`` with ``phi(x) . halfvec(P) = x^T P x``.

    For two states: ``(x1^2, 2 x1 x2, x2^2)``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = x.shape[0]
    out = []
    for i in range(n):
        for j in range(i, n):
            out.append(x[i] * x[j] * (1.0 if i == j else 2.0))
    return np.array(out)


def halfvec(P):
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    return np.array([P[i, j] for i in range(n) for j in range(i, n)])


def unhalfvec(p, n):
    P = np.zeros((n, n))
    idx = 0
    for i in range(n):
        for j in range(i, n):
            P[i, j] = P[j, i] = p[idx]
            idx += 1
    return P


def n_features(n):
    return n * (n + 1) // 2


def fit_kernel_batch(states, inputs, next_hats, P_prev, cost: CostSpec, rank_tol=1e-10):
    """Least-squares policy evaluation against the previous kernel.

    Solves ``phi(x_k) . p = l(x_k, u_k) + gamma * x_hat^T P_prev x_hat`` over
    all samples.  Emits :class:`FitQualityWarning` if the result has an
    eigenvalue below ``-PSD_TOL`` (the kernel is returned unprojected).
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    inputs = np.asarray(inputs, dtype=float).reshape(len(states), -1)
    next_hats = np.atleast_2d(np.asarray(next_hats, dtype=float))
    n = states.shape[1]
    m = n_features(n)
    if len(states) < m:
        raise InsufficientExcitationError(f"{len(states)} samples for {m} kernel parameters")
    Phi = np.array([quad_features(x) for x in states])
    s = np.linalg.svd(Phi, compute_uv=False)
    if s[0] == 0.0 or s[-1] / s[0] < rank_tol:
        raise InsufficientExcitationError("quadratic features do not span the kernel space")
    targets = np.array([bellman_target(x, u, xh, P_prev, cost)
                        for x, u, xh in zip(states, inputs, next_hats)])
    p, *_ = np.linalg.lstsq(Phi, targets, rcond=None)
    kernel = QuadraticKernel(unhalfvec(p, n), cost.gamma)
    if not kernel.is_psd():
        warnings.warn(f"fitted kernel has eigenvalue {kernel.min_eig():.3e}", FitQualityWarning,
                      stacklevel=2)
    return kernel


@dataclass(frozen=True)
class KernelRlsState:
    """RLS state over the half-vectorized kernel (recursive policy evaluation)."""
    p: np.ndarray
    cov: np.ndarray
    cfg: rls.RlsConfig
    n: int

    @classmethod
    def from_kernel(cls, kernel: QuadraticKernel, kappa=0.995, cov0=1.0):
        m = n_features(kernel.n)
        return cls(kernel.halfvec(), cov0 * np.eye(m), rls.RlsConfig(kappa=kappa, cov0=cov0),
                   kernel.n)

    def kernel(self, gamma=float("nan")):
        return QuadraticKernel(unhalfvec(self.p, self.n), gamma)

    def to_dict(self):
        return {"p": self.p.tolist(), "cov": self.cov.ravel().tolist(),
                "kappa": self.cfg.kappa, "n": self.n}

    @classmethod
    def from_dict(cls, d):
        m = n_features(d["n"])
        return cls(np.array(d["p"], dtype=float), np.reshape(d["cov"], (m, m)),
                   rls.RlsConfig(kappa=d["kappa"]), d["n"])


def fit_kernel_recursive(state: KernelRlsState, x, u, x_next_hat, cost: CostSpec):
    """One RLS step toward ``x^T P x = l(x, u) + gamma x_hat^T P_prev x_hat``.

    Returns ``(new_state, residual)``.  A zero state gives a zero regressor,
    which leaves ``p`` unchanged.
    """
    target = bellman_target(x, u, x_next_hat, state.kernel(), cost)
    phi = quad_features(x)
    theta = state.p[:, None]
    theta, cov, eps = rls.update(theta, state.cov, phi, [target], state.cfg)
    return replace(state, p=theta[:, 0], cov=cov), float(eps[0])
