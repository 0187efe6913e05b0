"""Experiment orchestration behind the CLI: offline, online and verify runs."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bundle, oracle, svg
from .config import ExperimentConfig
from .errors import BundleError, EvaluationDivergesError, OracleFailureError, PolicyImprovementError
from .ipi import (IncrementalPolicy, OnlineController, OnlineState, check_monotonicity,
                  estimate_ime, improve_policy_increment, near_optimality_gap, offline_train,
                  probe_ball_radius, probe_grid, stability_report)
from .rls import split_theta
from .sysmodels import (LINEAR_A, LINEAR_B, collect_excitation_data, get_plant, model_a_jacobian,
                        rollout)
from .valuefn import eval_value

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EXCITATION = 3
EXIT_UNCONVERGED = 4
EXIT_BUNDLE = 5
EXIT_DIVERGED = 6
EXIT_CHECK_FAILED = 7
EXIT_INPUT = 8


@dataclass
class Check:
    name: str
    passed: bool
    values: dict = field(default_factory=dict)

    def line(self):
        kv = " ".join(f"{k}={_kv(v)}" for k, v in self.values.items())
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} {kv}".rstrip()


def _kv(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, np.ndarray):
        return ",".join(f"{x:.6g}" for x in v.ravel())
    return str(v)


@dataclass
class RunResult:
    kind: str
    out_dir: Path
    checks: list
    exit_code: int
    info: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def report(self):
        head = [f"experiment={self.info.get('name', '')}", f"kind={self.kind}",
                f"config_hash={self.info.get('config_hash', '')}",
                f"seed={self.info.get('seed', '')}"]
        body = [c.line() for c in self.checks]
        status = "PASS" if self.passed else "FAIL"
        return "\n".join(head + body + [f"overall={status}", f"exit_code={self.exit_code}"]) + "\n"


def linearization(plant_name):
    """Jacobians at the origin used by the Riccati oracle."""
    if plant_name == "linear_a":
        return oracle.LinearPlant(LINEAR_A, LINEAR_B)
    if plant_name == "model_a":
        return oracle.LinearPlant(*model_a_jacobian(0.0))
    if plant_name == "model_b":
        return oracle.LinearPlant([[0.0, 1.0], [-1.0, -0.5]], [[0.0], [0.2]])
    raise ValueError(plant_name)


def _prepare(cfg: ExperimentConfig, out_dir):
    out = Path(out_dir or cfg["experiment.output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.dumps())
    return out


def _info(cfg):
    return {"name": cfg["experiment.name"], "config_hash": cfg.hash(),
            "seed": cfg["experiment.seed"]}


def _finish(result: RunResult):
    text = result.report()
    (result.out_dir / "report.txt").write_text(text)
    bundle.finalize(result.out_dir, result.kind)
    return result


def _train(cfg, plant):
    episodes = collect_excitation_data(
        plant, cfg.excitation(), episodes=cfg["data.episodes"],
        episode_length=cfg["data.episode_length"], x0_radius=cfg["data.x0_radius"],
        reset_radius=cfg["data.reset_radius"], seed=cfg["experiment.seed"])
    return offline_train(episodes, cfg.ipi_config(), cfg.cost_spec())


def _policy_rollout(cfg, plant, res, horizon=None):
    cost = cfg.cost_spec()
    pol = IncrementalPolicy(res.theta, res.kernel, cost, u_max=cfg.u_max)
    return rollout(plant, pol, cfg["run.x0"], horizon or cfg["run.horizon"],
                   seed=cfg["experiment.seed"], cost=cost,
                   blowup_radius=cfg["plant.blowup_radius"], u_max=cfg.u_max,
                   noise_scale=cfg["plant.noise_std"], meta={"config_hash": cfg.hash()})


def _stability_check(cfg, traj, name):
    rep = stability_report(traj, delta=cfg["run.delta"], settle_step=cfg["run.settle_step"],
                           growth_factor=cfg["run.growth_factor"])
    return rep, Check(name, rep.passed and not traj.diverged, {
        "max_norm": rep.max_norm, "growth_bound": rep.growth_bound,
        "worst_after_settle": rep.worst_after_settle, "delta": rep.delta,
        "settle_step": rep.settle_step, "final_norm": rep.final_norm,
        "diverged": traj.diverged})


def run_offline(cfg: ExperimentConfig, out_dir=None) -> RunResult:
    """Excitation data, offline IPI, and a closed-loop check of the trained policy."""
    out = _prepare(cfg, out_dir)
    plant = get_plant(cfg["plant.model"], cfg["plant.disturbance"])
    res = _train(cfg, plant)
    hist = res.history
    hist.to_csv(out / "history.csv")
    hist.kernel_curve_csv(out / "kernel_curve.csv")
    svg.emit_plot(out / "history.csv", "history", out / "history.svg")
    bundle.write_state(out, res.kernel, res.theta, converged=res.converged,
                       iterations=len(hist))
    checks = [Check("converged", res.converged, {
        "iterations": len(hist), "final_delta": hist.records[-1].delta,
        "tol": cfg["ipi.tol"]})]
    mono = check_monotonicity(hist)
    checks.append(Check("monotonicity", mono.passed, {
        "max_violation": mono.max_violation, "n_failures": mono.n_failures,
        "worst_iteration": mono.worst_iteration if mono.worst_iteration is not None else -1}))
    traj = _policy_rollout(cfg, plant, res)
    traj.to_csv(out / "trajectory.csv")
    svg.emit_plot(out / "trajectory.csv", "trajectory", out / "trajectory.svg")
    _, chk = _stability_check(cfg, traj, "trained_rollout")
    checks.append(chk)
    if not res.converged:
        code = EXIT_UNCONVERGED
    elif traj.diverged:
        code = EXIT_DIVERGED
    else:
        code = EXIT_OK if all(c.passed for c in checks) else EXIT_CHECK_FAILED
    return _finish(RunResult("offline", out, checks, code, _info(cfg)))


def run_online(cfg: ExperimentConfig, baseline_dir=None, out_dir=None) -> RunResult:
    """Online adaptation on the configured plant, seeded from an offline bundle."""
    base = baseline_dir or cfg["run.baseline"]
    if not base:
        raise BundleError("online run needs a baseline bundle (--baseline or run.baseline)")
    kernel, theta, _ = bundle.load_baseline(base)
    cost = cfg.cost_spec()
    if kernel.n != cost.n_x:
        raise BundleError("baseline kernel does not match the configured state size")
    out = _prepare(cfg, out_dir)
    plant = get_plant(cfg["plant.model"], cfg["plant.disturbance"])
    kernel = type(kernel)(kernel.P, cost.gamma)
    state = OnlineState.from_offline(theta, kernel, cfg.rls_config(),
                                     kernel_kappa=cfg["kernel.kappa"],
                                     kernel_cov0=cfg["kernel.cov0"], u_max=cfg.u_max)
    ctrl = OnlineController(state, cost)
    traj = rollout(plant, ctrl, cfg["run.x0"], cfg["run.horizon"], seed=cfg["experiment.seed"],
                   cost=cost, blowup_radius=cfg["plant.blowup_radius"], u_max=cfg.u_max,
                   noise_scale=cfg["plant.noise_std"], meta={"config_hash": cfg.hash()})
    traj.to_csv(out / "trajectory.csv")
    svg.emit_plot(out / "trajectory.csv", "trajectory", out / "trajectory.svg")
    st = ctrl.state
    bundle.write_state(out, st.kernel(), st.identifier.theta, identifier=st.identifier,
                       kernel_state=st.kernel_state, online_steps=st.steps)
    _, chk = _stability_check(cfg, traj, "robust_stability")
    checks = [chk, Check("step_errors", st.identifier_errors + st.policy_errors == 0, {
        "identifier_errors": st.identifier_errors, "policy_errors": st.policy_errors,
        "psd_projections": st.psd_projections, "cov_clips": st.identifier.clip_events})]
    if traj.diverged:
        code = EXIT_DIVERGED
    else:
        code = EXIT_OK if all(c.passed for c in checks) else EXIT_CHECK_FAILED
    return _finish(RunResult("online", out, checks, code, _info(cfg)))


def argmin_check(theta, kernel, cost, n_states, bound, step, tol, seed):
    """Closed-form improvement against an exhaustive grid on random states."""
    rng = np.random.default_rng(seed)
    A, B = split_theta(theta, cost.n_x)
    worst = 0.0
    for _ in range(n_states):
        x = rng.uniform(-1.0, 1.0, cost.n_x)
        dx = rng.uniform(-0.5, 0.5, cost.n_x)
        up = rng.uniform(-1.0, 1.0, cost.n_u)
        du = improve_policy_increment(x, dx, up, theta, kernel, cost)
        base = x + A @ dx

        def target(d, x=x, up=up, base=base):
            d = np.asarray(d, dtype=float)
            nxt = base[:, None] + B @ d[None, :]
            u = up[0] + d
            return (x @ cost.Q @ x + cost.R[0, 0] * u * u
                    + cost.gamma * np.einsum("ik,ij,jk->k", nxt, kernel.P, nxt))

        grid_du = oracle.brute_force_argmin(target, (-bound, bound), step)
        worst = max(worst, abs(grid_du - float(du[0])))
    return worst, worst <= tol


def run_verify(cfg: ExperimentConfig, out_dir=None) -> RunResult:
    """Oracle comparison, monotonicity, argmin cross-check, IME and value-gap bound."""
    out = _prepare(cfg, out_dir)
    plant = get_plant(cfg["plant.model"], cfg["plant.disturbance"])
    cost = cfg.cost_spec()
    ipi_cfg = cfg.ipi_config()
    res = _train(cfg, plant)
    res.history.to_csv(out / "history.csv")
    res.history.kernel_curve_csv(out / "kernel_curve.csv")
    svg.emit_plot(out / "history.csv", "history", out / "history.svg")
    bundle.write_state(out, res.kernel, res.theta, converged=res.converged,
                       iterations=len(res.history))
    checks = [Check("converged", res.converged, {"iterations": len(res.history),
                                                 "final_delta": res.history.records[-1].delta})]

    lin = linearization(cfg["plant.model"])
    P_star = None
    try:
        P_star, K_star = oracle.discounted_riccati(lin, cost)
        rel = float(np.linalg.norm(res.kernel.P - P_star.P) / np.linalg.norm(P_star.P))
        checks.append(Check("oracle_kernel", rel <= cfg["verify.oracle_rel_tol"], {
            "rel_frobenius": rel, "tol": cfg["verify.oracle_rel_tol"],
            "riccati_residual": oracle.riccati_residual(P_star.P, lin, cost)}))
    except OracleFailureError as err:
        checks.append(Check("oracle_kernel", False, {"error": str(err).replace(" ", "_")}))

    mono = check_monotonicity(res.history)
    checks.append(Check("monotonicity", mono.passed, {
        "max_violation": mono.max_violation, "n_failures": mono.n_failures}))

    try:
        worst, ok = argmin_check(res.theta, res.kernel, cost, cfg["verify.argmin_states"],
                                 cfg["verify.argmin_bound"], cfg["verify.argmin_step"],
                                 cfg["verify.argmin_tol"], cfg["experiment.seed"])
        checks.append(Check("argmin", ok, {"max_abs_diff": worst, "tol": cfg["verify.argmin_tol"],
                                           "states": cfg["verify.argmin_states"]}))
    except PolicyImprovementError as err:
        checks.append(Check("argmin", False, {"error": str(err).replace(" ", "_")}))

    # the IME window covers the transient from x0, where increments are nonzero
    window = ipi_cfg.ime_window
    traj = _policy_rollout(cfg, plant, res, horizon=window + 1)
    traj.to_csv(out / "trajectory.csv")
    eps = estimate_ime(traj, res.theta, window)
    checks.append(Check("ime", math.isfinite(eps), {"eps_ime": eps, "window": window}))

    if P_star is not None:
        grid = probe_grid(ipi_cfg.probe_half_width, ipi_cfg.probe_points, cost.n_x)
        L = cost.lipschitz_constant(probe_ball_radius(ipi_cfg.probe_half_width, cost.n_x))
        rep = near_optimality_gap(res.kernel, P_star, grid, cost, eps, L)
        checks.append(Check("near_optimality", rep.within_bound, {
            "gap": rep.gap, "bound": rep.bound, "lipschitz": L, "gamma": cost.gamma}))
        try:
            P_cl = oracle.discounted_lyapunov(lin, K_star, cost)
            err = max(abs(eval_value(P_cl, x) - eval_value(P_star, x)) for x in grid)
            checks.append(Check("lyapunov_consistency", err <= 1e-8, {"max_abs_diff": err}))
        except (EvaluationDivergesError, OracleFailureError) as e:
            checks.append(Check("lyapunov_consistency", False, {"error": type(e).__name__}))
    code = EXIT_OK if all(c.passed for c in checks) else EXIT_CHECK_FAILED
    return _finish(RunResult("verify", out, checks, code, _info(cfg)))


RUNNERS = {"offline": run_offline, "online": run_online, "verify": run_verify}
