"""Incremental policy iteration: offline training, online adaptation, diagnostics."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rls
from .errors import (BoundUndefinedError, ConfigurationError, IdentifierDegradedError,
                     InsufficientExcitationError, PolicyImprovementError, PreconditionError)
from .valuefn import (CostSpec, KernelRlsState, QuadraticKernel, eval_value, fit_kernel_batch,
                      fit_kernel_recursive, predict_next_state)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# policy improvement

def improve_policy_increment(x, dx, u_prev, theta, kernel, cost: CostSpec):
    """Closed-form minimizer over ``du`` of the Bellman target.

    ``du = -(R + g B'PB)^-1 [R u_prev + g B'P x + g B'P A dx]`` where ``A``,
    ``B`` come from ``theta`` and ``P`` from ``kernel``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    dx = np.atleast_1d(np.asarray(dx, dtype=float))
    u_prev = np.atleast_1d(np.asarray(u_prev, dtype=float))
    A, B = rls.split_theta(theta, x.shape[0])
    P = kernel.P if isinstance(kernel, QuadraticKernel) else np.atleast_2d(kernel)
    g = cost.gamma
    S = cost.R + g * B.T @ P @ B
    S = 0.5 * (S + S.T)
    if np.linalg.eigvalsh(S).min() <= 0.0:
        raise PolicyImprovementError("R + gamma B'PB is not positive definite")
    rhs = cost.R @ u_prev + g * B.T @ P @ x + g * B.T @ P @ A @ dx
    return -np.linalg.solve(S, rhs)


def _improve_safely(x, dx, u_prev, theta, kernel, cost):
    try:
        return improve_policy_increment(x, dx, u_prev, theta, kernel, cost), False
    except PolicyImprovementError:
        return improve_policy_increment(x, dx, u_prev, theta, kernel.projected(), cost), True


class IncrementalPolicy:
    """Frozen incremental feedback ``u_k = u_{k-1} + du(u_{k-1}, x_k, dx_k)``.

    Usable as a rollout controller; the first call assumes ``x_{-1} = x_0`` and
    ``u_{-1} = 0``.
    """

    def __init__(self, theta, kernel: QuadraticKernel, cost: CostSpec, u_max=None):
        self.theta = np.asarray(theta, dtype=float)
        self.kernel = kernel if kernel.is_psd() else kernel.projected()
        self.cost = cost
        self.u_max = u_max
        self.reset()

    def reset(self):
        self.x_prev = None
        self.u_prev = np.zeros(self.cost.n_u)

    def __call__(self, k, x):
        x = np.asarray(x, dtype=float)
        dx = np.zeros_like(x) if self.x_prev is None else x - self.x_prev
        du = improve_policy_increment(x, dx, self.u_prev, self.theta, self.kernel, self.cost)
        u = self.u_prev + du
        if self.u_max is not None:
            u = np.clip(u, -self.u_max, self.u_max)
        self.x_prev, self.u_prev = x, u
        return u

    def value(self, x):
        return eval_value(self.kernel, x)


# --------------------------------------------------------------------------
# offline training

@dataclass(frozen=True)
class IpiConfig:
    tol: float = 1e-6
    max_iter: int = 200
    initial_gain: Sequence[Sequence[float]] = ((-2.5, -1.0),)
    probe_half_width: float = 1.0
    probe_points: int = 5
    ime_window: int = 50
    ridge: float = 1e-9

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigurationError("convergence tolerance must be positive")
        if self.max_iter < 1:
            raise ConfigurationError("max iterations must be >= 1")
        if self.probe_points < 2 or not self.probe_half_width > 0:
            raise ConfigurationError("probe grid needs >= 2 points per axis and positive width")

    @property
    def gain(self):
        return np.atleast_2d(np.asarray(self.initial_gain, dtype=float))


def probe_grid(half_width=1.0, points=5, n=2, exclude_origin=True):
    axis = np.linspace(-half_width, half_width, points)
    mesh = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
    if exclude_origin:
        mesh = mesh[np.linalg.norm(mesh, axis=1) > 0]
    return mesh


def probe_ball_radius(half_width, n=2):
    return half_width * math.sqrt(n)


@dataclass
class TrainingRecord:
    iteration: int
    kernel: QuadraticKernel
    probe_values: np.ndarray
    delta: float


@dataclass
class TrainingHistory:
    """Per-iteration kernels.

    Record ``i`` holds the kernel fitted to the iteration-``i`` value estimate
    ``V_i(x) = l(x, h_i(x)) + gamma W_i(x_hat)``; record 0 evaluates the
    initial policy against ``W_0 = 0``.
    """
    records: list = field(default_factory=list)
    probe_states: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    converged: bool = False

    def __len__(self):
        return len(self.records)

    def append(self, kernel, delta):
        vals = np.array([eval_value(kernel, x) for x in self.probe_states])
        self.records.append(TrainingRecord(len(self.records), kernel, vals, float(delta)))

    def to_csv(self, path):
        n = self.records[0].kernel.n if self.records else 2
        pnames = [f"p{i + 1}{j + 1}" for i in range(n) for j in range(i, n)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration"] + pnames + ["delta_frobenius", "probe_value_max"])
            for r in self.records:
                pmax = float(r.probe_values.max()) if r.probe_values.size else 0.0
                w.writerow([r.iteration] + [repr(float(v)) for v in r.kernel.halfvec()]
                           + [repr(r.delta), repr(pmax)])

    def kernel_curve_csv(self, path):
        n = self.records[0].kernel.n if self.records else 2
        pnames = [f"p{i + 1}{j + 1}" for i in range(n) for j in range(i, n)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(pnames + ["iteration"])
            for r in self.records:
                w.writerow([repr(float(v)) for v in r.kernel.halfvec()] + [r.iteration])


def incremental_samples(episodes):
    """Split recorded episodes into identification and evaluation samples.

    Returns ``(regressors, observations, states, dxs, u_prevs)``.  The
    regressors ``[dx_k; du_k]`` predict ``dx_{k+1}``; evaluation samples are
    every ``x_k`` that has a predecessor.
    """
    regs, obs, xs, dxs, ups = [], [], [], [], []
    for ep in episodes:
        x, u = np.asarray(ep.x, float), np.asarray(ep.u, float)
        L = len(u)
        for k in range(1, L + 1):
            dx = x[k] - x[k - 1]
            xs.append(x[k])
            dxs.append(dx)
            ups.append(u[k - 1])
            if k < L:
                regs.append(np.concatenate([dx, u[k] - u[k - 1]]))
                obs.append(x[k + 1] - x[k])
    return (np.array(regs), np.array(obs), np.array(xs), np.array(dxs), np.array(ups))


@dataclass
class OfflineResult:
    kernel: QuadraticKernel
    theta: np.ndarray
    history: TrainingHistory

    @property
    def converged(self):
        return self.history.converged


def offline_train(episodes, cfg: IpiConfig, cost: CostSpec) -> OfflineResult:
    """Batch identification followed by incremental policy iteration.

    Iteration 0 evaluates the configured linear initial policy against a zero
    kernel; each later iteration improves the policy on every recorded state
    with the current kernel and refits the kernel once against it.
    """
    regs, obs, xs, dxs, ups = incremental_samples(episodes)
    if len(regs) == 0:
        raise InsufficientExcitationError("dataset has no incremental samples")
    theta = rls.batch_ls(regs, obs, ridge=cfg.ridge)
    n_x = xs.shape[1]
    history = TrainingHistory(probe_states=probe_grid(cfg.probe_half_width, cfg.probe_points, n_x))
    K0 = cfg.gain
    P = QuadraticKernel.zeros(n_x, cost.gamma)
    for i in range(cfg.max_iter):
        if i == 0:
            us = np.array([K0 @ x for x in xs])
            dus = us - ups
        else:
            Pi = P if P.is_psd() else P.projected()
            dus = np.array([_improve_safely(x, dx, up, theta, Pi, cost)[0]
                            for x, dx, up in zip(xs, dxs, ups)])
            us = ups + dus
        next_hats = np.array([predict_next_state(x, dx, du, theta)
                              for x, dx, du in zip(xs, dxs, dus)])
        P_new = fit_kernel_batch(xs, us, next_hats, P, cost)
        delta = float(np.linalg.norm(P_new.P - P.P))
        history.append(P_new, delta)
        P = P_new
        log.debug("iteration %d: delta %.3e", i, delta)
        if i > 0 and delta < cfg.tol:
            history.converged = True
            break
    if not history.converged:
        log.warning("offline IPI did not converge in %d iterations", cfg.max_iter)
    return OfflineResult(P, theta, history)


# --------------------------------------------------------------------------
# online adaptation

@dataclass
class OnlineState:
    identifier: rls.Identifier
    kernel_state: KernelRlsState
    gamma: float
    u_max: Optional[float] = None
    x_prev: Optional[np.ndarray] = None
    u_prev: Optional[np.ndarray] = None
    dx_prev: Optional[np.ndarray] = None
    du_prev: Optional[np.ndarray] = None
    steps: int = 0
    last_innovation: Optional[np.ndarray] = None
    innovations: list = field(default_factory=list)
    identifier_errors: int = 0
    policy_errors: int = 0
    psd_projections: int = 0

    @classmethod
    def from_offline(cls, theta, kernel: QuadraticKernel, rls_cfg: rls.RlsConfig,
                     kernel_kappa=0.995, kernel_cov0=1.0, u_max=None):
        theta = np.asarray(theta, dtype=float)
        n_x = theta.shape[1]
        ident = rls.Identifier(n_x, theta.shape[0] - n_x, rls_cfg, theta=theta)
        ks = KernelRlsState.from_kernel(kernel, kappa=kernel_kappa, cov0=kernel_cov0)
        return cls(ident, ks, kernel.gamma, u_max=u_max, u_prev=np.zeros(theta.shape[0] - n_x))

    def kernel(self):
        return self.kernel_state.kernel(self.gamma)

    def usable_kernel(self):
        k = self.kernel()
        if k.is_psd():
            return k
        self.psd_projections += 1
        return k.projected()


def online_adapt_step(state: OnlineState, x_k, cost: CostSpec):
    """Advance the online learner by one observation; returns ``(u_k, state)``.

    Order: increment, RLS model update on the previous regressor, recursive
    kernel update, policy improvement, input clamp.  The model is only
    updated once two increments exist.  Any identifier or policy failure
    repeats the previous input for this step.
    """
    x = np.atleast_1d(np.asarray(x_k, dtype=float))
    dx = np.zeros_like(x) if state.x_prev is None else x - state.x_prev
    hold = False
    if state.dx_prev is not None:
        try:
            eps = state.identifier.update(np.concatenate([state.dx_prev, state.du_prev]), dx)
            state.last_innovation = eps
            state.innovations.append(float(np.linalg.norm(eps)))
        except IdentifierDegradedError as err:
            log.warning("step %d: %s", state.steps, err)
            state.identifier_errors += 1
            hold = True
    theta = state.identifier.theta
    if not hold:
        try:
            P_prev = state.usable_kernel()
            du_t = improve_policy_increment(x, dx, state.u_prev, theta, P_prev, cost)
            u_t = state.u_prev + du_t
            x_hat = predict_next_state(x, dx, du_t, theta)
            state.kernel_state, _ = fit_kernel_recursive(state.kernel_state, x, u_t, x_hat, cost)
            du = improve_policy_increment(x, dx, state.u_prev, theta, state.usable_kernel(), cost)
        except IdentifierDegradedError as err:
            log.warning("step %d: kernel update failed: %s", state.steps, err)
            state.identifier_errors += 1
            hold = True
        except PolicyImprovementError as err:
            log.warning("step %d: %s", state.steps, err)
            state.policy_errors += 1
            hold = True
    u = state.u_prev.copy() if hold else state.u_prev + du
    if state.u_max is not None:
        u = np.clip(u, -state.u_max, state.u_max)
    state.dx_prev, state.du_prev = dx, u - state.u_prev
    state.x_prev, state.u_prev = x, u
    state.steps += 1
    return u, state


class OnlineController:
    """Rollout adapter around :func:`online_adapt_step`."""

    def __init__(self, state: OnlineState, cost: CostSpec):
        self.state = state
        self.cost = cost

    def __call__(self, k, x):
        u, self.state = online_adapt_step(self.state, x, self.cost)
        return u

    def value(self, x):
        return eval_value(self.state.kernel(), x)


# --------------------------------------------------------------------------
# diagnostics

@dataclass
class MonotonicityReport:
    max_violation: float
    passed: bool
    worst_iteration: Optional[int] = None
    worst_state: Optional[np.ndarray] = None
    n_failures: int = 0


def check_monotonicity(history: TrainingHistory, abs_tol=1e-8, rel_tol=1e-6):
    """Largest increase of the probe values between consecutive iterations.

    Passes when every increase is at most ``abs_tol + rel_tol * V_i(x)``.
    ``max_violation`` is the largest raw increase (zero if values never rise).
    """
    recs = history.records
    worst, where, n_fail = 0.0, None, 0
    for a, b in zip(recs[:-1], recs[1:]):
        diff = b.probe_values - a.probe_values
        allowed = abs_tol + rel_tol * np.abs(a.probe_values)
        n_fail += int(np.sum(diff > allowed))
        if diff.size and diff.max() > worst:
            j = int(np.argmax(diff))
            worst, where = float(diff[j]), (b.iteration, history.probe_states[j])
    return MonotonicityReport(worst, n_fail == 0,
                              where[0] if where else None, where[1] if where else None, n_fail)


def estimate_ime(trajectory, theta, window: int):
    """Largest one-step incremental-model residual over the last ``window`` steps.

    Residual: ``|| dx_{k+1} - (A dx_k + B du_k) ||``.
    """
    N = len(trajectory)
    if window < 1 or N <= window:
        raise PreconditionError(f"trajectory of {N} records is not longer than window {window}")
    A, B = rls.split_theta(theta, trajectory.x.shape[1])
    x, du = trajectory.x, trajectory.du
    worst = 0.0
    for k in range(max(1, N - 1 - window), N - 1):
        r = (x[k + 1] - x[k]) - A @ (x[k] - x[k - 1]) - B @ du[k]
        worst = max(worst, float(np.linalg.norm(r)))
    return worst


@dataclass
class NearOptimalityReport:
    gap: float
    bound: float
    within_bound: bool


def near_optimality_gap(P_learned, P_star, grid, cost: CostSpec, eps_ime, L_ell):
    """Largest probe-grid value gap against ``gamma L eps / (1 - gamma)``."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise PreconditionError("probe grid is empty")
    if not (0.0 < cost.gamma < 1.0):
        raise PreconditionError("discount must lie in (0, 1)")
    gap = max(abs(eval_value(P_learned, x) - eval_value(P_star, x)) for x in grid)
    bound = cost.gamma * L_ell * eps_ime / (1.0 - cost.gamma)
    return NearOptimalityReport(float(gap), float(bound), bool(gap <= bound))


def indicator(x):
    """Distance to the origin attractor."""
    return float(np.linalg.norm(x))


@dataclass
class StabilityReport:
    max_norm: float
    growth_bound: float
    bounded: bool
    settle_step: int
    delta: float
    settled: bool
    worst_after_settle: float
    final_norm: float

    @property
    def passed(self):
        return self.bounded and self.settled


def stability_report(trajectory, delta=0.3, settle_step=300, growth_factor=5.0):
    norms = trajectory.norms
    x0 = indicator(trajectory.x[0])
    tail = norms[settle_step:]
    worst_tail = float(tail.max()) if tail.size else math.inf
    settled = bool(tail.size and worst_tail <= delta and not trajectory.diverged)
    return StabilityReport(
        max_norm=float(norms.max()), growth_bound=growth_factor * x0,
        bounded=bool(norms.max() <= growth_factor * x0 and not trajectory.diverged),
        settle_step=settle_step, delta=delta, settled=settled,
        worst_after_settle=worst_tail, final_norm=float(norms[-1]))


# --------------------------------------------------------------------------
# minimum-iteration bound under power-law comparison functions

@dataclass(frozen=True)
class PowerLaw:
    """Comparison function ``s -> c s^p``."""
    c: float
    p: float

    def __post_init__(self):
        if not (self.c > 0 and self.p > 0):
            raise ConfigurationError("power-law comparison functions need c > 0 and p > 0")

    def __call__(self, s):
        return self.c * s ** self.p

    def inverse(self, y):
        return (y / self.c) ** (1.0 / self.p)


def _invert_sum(f, g, scale, y):
    """Invert ``s -> f(s) + scale g(s)`` (both power laws) at ``y``."""
    if f.p == g.p:
        return ((y / (f.c + scale * g.c)) ** (1.0 / f.p))
    from scipy.optimize import brentq
    h = lambda s: f(s) + scale * g(s) - y
    hi = 1.0
    while h(hi) < 0:
        hi *= 2.0
    return brentq(h, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)


@dataclass(frozen=True)
class IterationBound:
    i_star: int
    raw: float
    ratio: float
    gamma_star: float


def min_iterations_bound(value_bound: PowerLaw, detect_bound: PowerLaw, decrease: PowerLaw,
                         gamma, delta, Delta, gamma_star=None, gamma0=1.0) -> IterationBound:
    """Smallest iteration count after which the learned policy is robustly stable.

    ``value_bound`` bounds the initial value estimate, ``detect_bound`` the
    detectability storage function, ``decrease`` its guaranteed decrease.
    The Lyapunov surrogate is bracketed by ``decrease(s)`` and
    ``value_bound(s) + detect_bound(s) / gamma``; the optimal-policy
    transient at time zero is ``decrease^-1(upper(s))``.  ``Delta`` is the
    indicator perturbation radius, equal to the model-error bound for the
    Euclidean norm.  ``gamma_star`` defaults to the smallest value with
    ``(1 - gamma_star) value_bound <= decrease`` (needs equal exponents).
    """
    if gamma_star is None:
        if value_bound.p != decrease.p:
            raise ConfigurationError("gamma_star must be given when exponents differ")
        gamma_star = max(0.0, 1.0 - decrease.c / value_bound.c)
    if not (gamma_star < gamma < gamma0 and gamma < 1.0):
        raise PreconditionError(f"gamma must lie in ({gamma_star}, {min(gamma0, 1.0)})")
    if not (delta > 0 and Delta > 0):
        raise PreconditionError("delta and Delta must be positive")

    def upper(s):
        return value_bound(s) + detect_bound(s) / gamma

    def upper_inv(y):
        return _invert_sum(value_bound, detect_bound, 1.0 / gamma, y)

    def decrease_rate(s):
        return (gamma - gamma_star) / (1.0 - gamma_star) * decrease(s)

    def transient0(s):
        return decrease.inverse(upper(s))

    num = decrease_rate(upper_inv(decrease(delta)))
    den = 2.0 * (1.0 - gamma) * value_bound(transient0(decrease.inverse(upper(Delta))))
    if not (num > 0 and den > 0):
        raise BoundUndefinedError(f"logarithm argument {num}/{den} is not positive")
    ratio = num / den
    # a ratio within rounding of 1 is log(1) = 0, not a spurious extra step
    raw = 0.0 if abs(math.log(ratio)) <= 1e-12 else math.log(ratio) / math.log(gamma)
    return IterationBound(max(0, math.ceil(raw)), raw, ratio, gamma_star)
