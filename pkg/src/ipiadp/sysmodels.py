"""Plant dynamics, excitation signals and closed-loop rollouts.

All plants are discrete-time maps ``x_{k+1} = f(x_k, u_k, k, w_k)`` with the
step index used as the clock (sampling interval 1).  Disturbance noise comes
from :class:`NoiseSource`, which draws ``w_k`` from a PCG64 generator seeded
by the pair ``(seed, k)``; a given seed therefore yields the same ``w_k``
regardless of how many samples were drawn before it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, InputError

DEFAULT_BLOWUP_RADIUS = 1e6


class NoiseSource:
    """Per-step standard normal samples, reproducible from ``seed`` alone."""

    def __init__(self, seed: int = 0, scale: float = 1.0):
        self.seed = int(seed)
        self.scale = float(scale)

    def __call__(self, k: int) -> float:
        if self.scale == 0.0:
            return 0.0
        rng = np.random.default_rng([self.seed, int(k)])
        return self.scale * float(rng.standard_normal())


def _as_vec(v, n, what):
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.ndim != 1 or arr.shape[0] != n:
        raise ConfigurationError(f"{what} must have length {n}, got shape {arr.shape}")
    return arr


def step_model_a(x, u):
    """Nominal plant: ``[x2, -2 x1 - 3 x2 + sin(x1) + u]``."""
    x = _as_vec(x, 2, "state")
    u = _as_vec(u, 1, "input")
    return np.array([x[1], -2.0 * x[0] - 3.0 * x[1] + math.sin(x[0]) + u[0]])


def model_b_disturbance(k: int, noise: Optional[Callable[[int], float]] = None) -> float:
    w = 0.0 if noise is None else noise(k)
    return 0.2 * math.sin(0.1 * k) + 0.1 * w


def step_model_b(x, u, k: int = 0, noise: Optional[Callable[[int], float]] = None,
                 disturbance: bool = True):
    """Perturbed plant with weaker damping, weaker actuation and an additive
    input disturbance ``0.2 sin(0.1 k) + 0.1 w_k``.  ``noise=None`` forces
    ``w_k = 0``."""
    x = _as_vec(x, 2, "state")
    u = _as_vec(u, 1, "input")
    ud = model_b_disturbance(k, noise) if disturbance else 0.0
    return np.array([x[1], -2.0 * x[0] - 0.5 * x[1] + math.sin(x[0]) + 0.2 * u[0] + ud])


@dataclass(frozen=True)
class Plant:
    name: str
    n_x: int
    n_u: int
    step_fn: Callable
    uses_noise: bool = False

    def step(self, x, u, k: int = 0, noise=None):
        x = _as_vec(x, self.n_x, "state")
        u = _as_vec(u, self.n_u, "input")
        return np.asarray(self.step_fn(x, u, k, noise), dtype=float)


def model_a() -> Plant:
    return Plant("model_a", 2, 1, lambda x, u, k, noise: step_model_a(x, u))


def model_b(disturbance: bool = True) -> Plant:
    return Plant(
        "model_b" if disturbance else "model_b_nodist", 2, 1,
        lambda x, u, k, noise: step_model_b(x, u, k, noise, disturbance),
        uses_noise=disturbance,
    )


def linear_plant(A, B, name: str = "linear") -> Plant:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    if A.shape[0] != A.shape[1]:
        raise ConfigurationError("A must be square")
    return Plant(name, A.shape[0], B.shape[1], lambda x, u, k, noise: A @ x + B @ u)


# Model A without the sine term: exactly linear, used by the oracle checks.
LINEAR_A = np.array([[0.0, 1.0], [-2.0, -3.0]])
LINEAR_B = np.array([[0.0], [1.0]])


def linear_model_a() -> Plant:
    return linear_plant(LINEAR_A, LINEAR_B, name="linear_a")


def model_a_jacobian(x1: float = 0.0):
    """State and input Jacobians of Model A at a point with first coordinate ``x1``."""
    return np.array([[0.0, 1.0], [-2.0 + math.cos(x1), -3.0]]), LINEAR_B.copy()


def get_plant(name: str, disturbance: bool = True) -> Plant:
    if name == "model_a":
        return model_a()
    if name == "model_b":
        return model_b(disturbance)
    if name == "linear_a":
        return linear_model_a()
    raise ConfigurationError(f"unknown plant {name!r}")


def excitation_input(k: int, params: Sequence[Sequence[float]], dt: float = 1.0, n_u: int = 1):
    """Sum of sinusoids ``sum a_i sin(w_i k dt + phi_i)``.

    ``params`` holds ``(amplitude, frequency)`` or ``(amplitude, frequency,
    phase)`` entries.
    """
    if not params:
        raise ConfigurationError("excitation needs at least one (amplitude, frequency) pair")
    total = 0.0
    for p in params:
        if len(p) not in (2, 3):
            raise ConfigurationError(f"bad excitation term {p!r}")
        a, w = p[0], p[1]
        phi = p[2] if len(p) == 3 else 0.0
        total += a * math.sin(w * k * dt + phi)
    return np.full(n_u, total)


@dataclass
class Episode:
    x: np.ndarray  # (L+1, n_x)
    u: np.ndarray  # (L, n_u)


def collect_excitation_data(plant: Plant, params, episodes: int = 40, episode_length: int = 8,
                            x0_radius: float = 0.3, reset_radius: float = 2.0, seed: int = 0):
    """Open-loop sinusoidal excitation, restarted from random small states.

    Model A is open-loop unstable, so data comes in short episodes; an episode
    stops early once the state leaves ``reset_radius``.  The excitation clock
    runs across episodes so consecutive episodes see different input phases.
    """
    rng = np.random.default_rng(seed)
    noise = NoiseSource(seed) if plant.uses_noise else None
    out = []
    clock = 0
    for _ in range(episodes):
        x = rng.uniform(-x0_radius, x0_radius, plant.n_x)
        xs, us = [x], []
        for _ in range(episode_length):
            u = excitation_input(clock, params, n_u=plant.n_u)
            x = plant.step(x, u, clock, noise)
            clock += 1
            us.append(u)
            xs.append(x)
            if not np.all(np.isfinite(x)) or np.linalg.norm(x) > reset_radius:
                break
        if np.all(np.isfinite(xs[-1])):
            out.append(Episode(np.array(xs), np.array(us)))
    return out


@dataclass
class Trajectory:
    k: np.ndarray
    x: np.ndarray
    u: np.ndarray
    du: np.ndarray
    stage_cost: np.ndarray
    value_est: np.ndarray
    meta: dict = field(default_factory=dict)
    diverged: bool = False
    diverged_at: Optional[int] = None

    def __len__(self):
        return len(self.k)

    @property
    def norms(self):
        return np.linalg.norm(self.x, axis=1)

    def header(self):
        n_x, n_u = self.x.shape[1], self.u.shape[1]
        xs = [f"x{i + 1}" for i in range(n_x)]
        if n_u == 1:
            us, dus = ["u"], ["du"]
        else:
            us = [f"u{i + 1}" for i in range(n_u)]
            dus = [f"du{i + 1}" for i in range(n_u)]
        return ["k"] + xs + us + dus + ["stage_cost", "value_est"]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for i in range(len(self)):
                row = [str(int(self.k[i]))]
                row += [repr(float(v)) for v in self.x[i]]
                row += [repr(float(v)) for v in self.u[i]]
                row += [repr(float(v)) for v in self.du[i]]
                row += [repr(float(self.stage_cost[i])), repr(float(self.value_est[i]))]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise InputError(f"{path}: empty file")
        head = rows[0]
        if head[0] != "k" or head[-2:] != ["stage_cost", "value_est"]:
            raise InputError(f"{path}: not a trajectory CSV (header {head})")
        xi = [i for i, h in enumerate(head) if h.startswith("x")]
        ui = [i for i, h in enumerate(head) if h == "u" or (h.startswith("u") and h[1:].isdigit())]
        di = [i for i, h in enumerate(head) if h.startswith("du")]
        if not xi or not ui or len(ui) != len(di):
            raise InputError(f"{path}: malformed trajectory header {head}")
        data = np.array([[float(v) for v in r] for r in rows[1:]]) if len(rows) > 1 \
            else np.zeros((0, len(head)))
        return cls(
            k=data[:, 0].astype(int), x=data[:, xi], u=data[:, ui], du=data[:, di],
            stage_cost=data[:, -2], value_est=data[:, -1],
        )


def rollout(plant: Plant, controller, x0, horizon: int, seed: int = 0, cost=None,
            blowup_radius: float = DEFAULT_BLOWUP_RADIUS, u_max: Optional[float] = None,
            noise_scale: float = 1.0, meta: Optional[dict] = None) -> Trajectory:
    """Simulate ``plant`` under ``controller(k, x) -> u`` for ``horizon`` steps.

    Returns ``horizon + 1`` records unless the state leaves the blow-up
    radius (or turns non-finite), in which case the trajectory is cut and
    flagged.  ``u_{-1}`` is taken as zero for the first increment.  If the
    controller has a ``value(x)`` method it fills the ``value_est`` column;
    ``cost.stage(x, u)`` fills ``stage_cost``.
    """
    if horizon < 1:
        raise ConfigurationError("horizon must be >= 1")
    x = _as_vec(x0, plant.n_x, "x0")
    noise = NoiseSource(seed, noise_scale) if plant.uses_noise else None
    value = getattr(controller, "value", None)
    u_prev = np.zeros(plant.n_u)
    ks, xs, us, dus, ls, vs = [], [], [], [], [], []
    diverged, diverged_at = False, None
    for k in range(horizon + 1):
        u = np.atleast_1d(np.asarray(controller(k, x), dtype=float))
        if u_max is not None:
            u = np.clip(u, -u_max, u_max)
        ks.append(k)
        xs.append(x)
        us.append(u)
        dus.append(u - u_prev)
        ls.append(cost.stage(x, u) if cost is not None else math.nan)
        vs.append(float(value(x)) if value is not None else math.nan)
        if k == horizon:
            break
        x = plant.step(x, u, k, noise)
        u_prev = u
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > blowup_radius:
            diverged, diverged_at = True, k + 1
            break
    info = {"plant": plant.name, "seed": seed}
    info.update(meta or {})
    return Trajectory(np.array(ks), np.array(xs), np.array(us), np.array(dus),
                      np.array(ls), np.array(vs), info, diverged, diverged_at)


def linear_feedback(K):
    """Controller ``u = K x`` (note the sign: ``K`` is applied as given)."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    return lambda k, x: K @ x
