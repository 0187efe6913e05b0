import json

import numpy as np
import pytest

from ipiadp import cli
from ipiadp.bundle import load_baseline
from ipiadp.errors import BundleError, InputError
from ipiadp.svg import emit_plot, polyline_series
from ipiadp.sysmodels import Trajectory


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for k in list(__import__("os").environ):
        if k.startswith("IPI_"):
            monkeypatch.delenv(k)


@pytest.fixture(scope="module")
def offline_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("offline") / "a"
    code = cli.main(["offline", "--config", "model_a_offline", "--out", str(out)])
    return out, code


def write_cfg(path, text):
    path.write_text(text)
    return str(path)


def test_offline_bundle_contents(offline_bundle):
    out, code = offline_bundle
    # converged and stable; the monotonicity report is the failing check
    assert code == 7
    report = (out / "report.txt").read_text()
    assert "PASS converged" in report and "PASS trained_rollout" in report
    assert "FAIL monotonicity" in report
    for name in ("config.cfg", "state.json", "history.csv", "kernel_curve.csv", "history.svg",
                 "trajectory.csv", "trajectory.svg", "report.txt", "manifest.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["files"]) >= {"state.json", "history.csv", "config.cfg"}
    kernel, theta, _ = load_baseline(out)
    assert kernel.is_psd() and theta.shape == (3, 2)


def test_gamma_out_of_range_is_config_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "bad.cfg", "cost.gamma = 1.2\n")
    assert cli.main(["offline", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_non_pd_q_is_config_error(tmp_path):
    cfg = write_cfg(tmp_path / "bad.cfg", "experiment.kind = verify\ncost.q = 1, 0, 0, -1\n")
    assert cli.main(["verify", "--config", cfg]) == 2


def test_tiny_dataset_is_excitation_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "tiny.cfg", "data.episodes = 1\ndata.episode_length = 3\n")
    assert cli.main(["offline", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert "insufficient excitation" in capsys.readouterr().err


def test_unconverged_exit_code(tmp_path):
    cfg = write_cfg(tmp_path / "short.cfg", "ipi.max_iter = 2\nrun.horizon = 50\n"
                    "run.settle_step = 10\n")
    assert cli.main(["offline", "--config", cfg, "--out", str(tmp_path / "o")]) == 4


def test_online_missing_baseline(tmp_path, capsys):
    code = cli.main(["online", "--config", "model_b_online", "--baseline",
                     str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert code == 5 and "bundle error" in capsys.readouterr().err


def test_online_tampered_baseline(tmp_path, offline_bundle):
    import shutil
    src, _ = offline_bundle
    dst = tmp_path / "copy"
    shutil.copytree(src, dst)
    state = json.loads((dst / "state.json").read_text())
    state["kernel"][0] += 1.0
    (dst / "state.json").write_text(json.dumps(state))
    with pytest.raises(BundleError):
        load_baseline(dst)
    state["version"] = 99
    man = json.loads((dst / "manifest.json").read_text())
    man["version"] = 99
    (dst / "manifest.json").write_text(json.dumps(man))
    assert cli.main(["online", "--config", "model_b_online", "--baseline", str(dst),
                     "--out", str(tmp_path / "o")]) == 5


def test_online_is_reproducible(tmp_path, offline_bundle):
    base, _ = offline_bundle
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        code = cli.main(["online", "--config", "model_b_online", "--baseline", str(base),
                         "--out", str(out), "--seed", "3"])
        assert code in (0, 7)
        outs.append(out)
    for f in ("trajectory.csv", "state.json", "report.txt", "trajectory.svg"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    traj = Trajectory.from_csv(outs[0] / "trajectory.csv")
    assert len(traj) == 1001 and not traj.diverged
    assert traj.norms.max() <= 5 * 0.5


def test_online_resumable_state(tmp_path, offline_bundle):
    from ipiadp.rls import Identifier
    from ipiadp.valuefn import KernelRlsState
    base, _ = offline_bundle
    out = tmp_path / "o"
    cli.main(["online", "--config", "model_b_online", "--baseline", str(base), "--out", str(out)])
    state = json.loads((out / "state.json").read_text())
    ident = Identifier.from_dict(state["identifier"])
    ks = KernelRlsState.from_dict(state["kernel_rls"])
    assert ident.steps == 1000 and ks.p.shape == (3,)


def test_verify_reports_items(tmp_path, capsys):
    code = cli.main(["verify", "--config", "linear_verify", "--out", str(tmp_path / "v")])
    text = capsys.readouterr().out
    for item in ("converged", "oracle_kernel", "monotonicity", "argmin", "ime",
                 "near_optimality", "lyapunov_consistency"):
        assert f" {item} " in text
    assert "PASS oracle_kernel" in text and "PASS argmin" in text
    assert code == (0 if "FAIL" not in text else 7)


def bound_of(text):
    line = next(ln for ln in text.splitlines() if " near_optimality " in ln)
    return float(line.split("bound=")[1].split()[0])


def test_verify_bound_grows_with_gamma(tmp_path, monkeypatch, capsys):
    bounds = {}
    for g in ("0.3", "0.7"):
        monkeypatch.setenv("IPI_COST_GAMMA", g)
        cli.main(["verify", "--config", "linear_verify", "--out", str(tmp_path / g)])
        bounds[g] = bound_of(capsys.readouterr().out)
    assert bounds["0.7"] > bounds["0.3"] > 0


def test_plot_errors(tmp_path):
    (tmp_path / "empty.csv").write_text("k,x1,x2,u,du,stage_cost,value_est\n")
    with pytest.raises(InputError):
        emit_plot(tmp_path / "empty.csv", "trajectory")
    assert cli.main(["plot", str(tmp_path / "empty.csv")]) == 8
    (tmp_path / "h.csv").write_text("iteration,p11,p12,p22,delta_frobenius,probe_value_max\n"
                                    "0,1,0,1,1,1\n")
    assert cli.main(["plot", str(tmp_path / "h.csv"), "--kind", "trajectory"]) == 8


def test_plot_two_points(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("k,x1,x2,u,du,stage_cost,value_est\n0,1.0,0.0,0,0,1,nan\n1,0.5,0.0,0,0,0.25,nan\n")
    out = emit_plot(p, "trajectory")
    series = polyline_series(out.read_text())
    assert set(series) == {"x1", "x2", "norm", "du"}
    assert all(n == 2 for *_, n in series.values())
    assert series["norm"][1] == 0.5


def test_plot_history(offline_bundle, tmp_path):
    out, _ = offline_bundle
    assert cli.main(["plot", str(out / "history.csv"), "--kind", "history",
                     "--out", str(tmp_path / "h.svg")]) == 0
    text = (tmp_path / "h.svg").read_text()
    assert text.startswith("<svg") and 'version="1.1"' in text
    assert set(polyline_series(text)) == {"p11", "p12", "p22", "log10_delta"}


def test_sweep_parallel(tmp_path, offline_bundle, capsys):
    base, _ = offline_bundle
    code = cli.main(["sweep", "--config", "model_b_online", "--seeds", "2", "--jobs", "2",
                     "--baseline", str(base), "--out", str(tmp_path / "s")])
    text = capsys.readouterr().out
    assert "total=2" in text and code in (0, 7)
    assert (tmp_path / "s" / "model_b_online-s0" / "trajectory.csv").exists()
    assert (tmp_path / "s" / "model_b_online-s1" / "trajectory.csv").exists()


def test_online_svg_norm_matches_trajectory(tmp_path, offline_bundle):
    base, _ = offline_bundle
    out = tmp_path / "o"
    cli.main(["online", "--config", "model_b_online", "--baseline", str(base), "--out", str(out)])
    traj = Trajectory.from_csv(out / "trajectory.csv")
    last = polyline_series((out / "trajectory.svg").read_text())["norm"][1]
    assert np.isclose(last, traj.norms[-1])
