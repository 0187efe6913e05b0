"""Verification oracles for the linear-quadratic case.

Nothing here imports learner state; the learner never calls into this module.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, EvaluationDivergesError, OracleFailureError
from .valuefn import CostSpec, QuadraticKernel


@dataclass(frozen=True)
class LinearPlant:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(A.shape[0], -1)
        if A.shape[0] != A.shape[1]:
            raise ConfigurationError("A must be square")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ConfigurationError("plant matrices must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)


def is_stabilizable(A, B, tol=1e-9):
    """PBH test on the eigenvalues of ``A`` outside the open unit disc."""
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) >= 1.0 - tol:
            M = np.hstack([lam * np.eye(n) - A, B.astype(complex)])
            if np.linalg.matrix_rank(M, tol=tol) < n:
                return False
    return True


def spectral_radius(M):
    return float(max(abs(np.linalg.eigvals(np.atleast_2d(M)))))


def greedy_gain(P, plant: LinearPlant, cost: CostSpec):
    """``K`` such that ``u = -K x`` minimizes ``l(x, u) + gamma (Ax+Bu)' P (Ax+Bu)``."""
    g = cost.gamma
    A, B = plant.A, plant.B
    return np.linalg.solve(cost.R + g * B.T @ P @ B, g * B.T @ P @ A)


def riccati_step(P, plant: LinearPlant, cost: CostSpec):
    g = cost.gamma
    A, B = plant.A, plant.B
    S = cost.R + g * B.T @ P @ B
    BPA = B.T @ P @ A
    Pn = cost.Q + g * A.T @ P @ A - g * g * BPA.T @ np.linalg.solve(S, BPA)
    return 0.5 * (Pn + Pn.T)


def discounted_riccati(plant: LinearPlant, cost: CostSpec, tol=1e-12, max_iter=100_000):
    """Fixed-point iteration of the discounted Riccati map from ``P = Q``.

    Returns ``(kernel, K)`` with the optimal policy ``u = -K x``.
    """
    g = cost.gamma
    if not is_stabilizable(np.sqrt(g) * plant.A, np.sqrt(g) * plant.B):
        raise OracleFailureError("discounted pair is not stabilizable")
    P = cost.Q.copy()
    for _ in range(max_iter):
        Pn = riccati_step(P, plant, cost)
        if not np.all(np.isfinite(Pn)):
            break
        if np.linalg.norm(Pn - P) < tol:
            P = Pn
            return QuadraticKernel(P, g), greedy_gain(P, plant, cost)
        P = Pn
    raise OracleFailureError(f"Riccati iteration did not converge in {max_iter} steps")


def riccati_residual(P, plant, cost):
    return float(np.linalg.norm(riccati_step(P, plant, cost) - P))


def discounted_lyapunov(plant: LinearPlant, K, cost: CostSpec, tol=1e-12, max_iter=100_000):
    """Discounted cost kernel of the policy ``u = -K x``."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    Acl = plant.A - plant.B @ K
    g = cost.gamma
    if np.sqrt(g) * spectral_radius(Acl) >= 1.0:
        raise EvaluationDivergesError(
            f"discounted closed loop has spectral radius {np.sqrt(g) * spectral_radius(Acl):.4f}")
    C = cost.Q + K.T @ cost.R @ K
    P = np.zeros_like(C)
    for _ in range(max_iter):
        Pn = C + g * Acl.T @ P @ Acl
        if np.linalg.norm(Pn - P) < tol:
            return QuadraticKernel(Pn, g)
        P = Pn
    raise OracleFailureError("Lyapunov iteration did not converge")


def brute_force_argmin(objective, bounds, step):
    """Exhaustive grid search; ties go to the smaller argument.

    ``objective`` is tried on the whole grid at once and falls back to a
    per-point loop when it does not vectorize.
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo or step <= 0:
        raise ConfigurationError("need finite bounds lo <= hi and step > 0")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    grid = lo + step * np.arange(n)
    try:
        vals = np.asarray(objective(grid), dtype=float)
        if vals.shape != grid.shape:
            raise ValueError
    except (ValueError, TypeError):
        vals = np.array([float(objective(v)) for v in grid])
    return float(grid[int(np.argmin(vals))])


def truncated_rollout_cost(plant: LinearPlant, K, cost: CostSpec, x0, n_steps):
    """Discounted cost of ``u = -K x`` summed over ``n_steps`` steps."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    x = np.asarray(x0, dtype=float)
    total, disc = 0.0, 1.0
    for _ in range(n_steps):
        u = -K @ x
        total += disc * cost.stage(x, u)
        disc *= cost.gamma
        x = plant.A @ x + plant.B @ u
    return total
