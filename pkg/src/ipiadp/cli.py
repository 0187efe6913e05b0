"""Command-line experiment runner.

    ipiadp offline --config model_a_offline --out runs/a
    ipiadp online  --config model_b_online --baseline runs/a --out runs/b
    ipiadp verify  --config linear_verify
    ipiadp plot    runs/b/trajectory.csv --kind trajectory
    ipiadp sweep   --config model_b_online --seeds 10 --jobs 4 --baseline runs/a

Exit codes: 0 all checks passed, 2 configuration, 3 insufficient excitation,
4 unconverged training, 5 bundle, 6 divergence, 7 a check failed, 8 input.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import experiments as ex
from .config import ExperimentConfig
from .errors import BundleError, ConfigurationError, InputError, InsufficientExcitationError
from .svg import emit_plot

log = logging.getLogger("ipiadp")


def load_config(path, seed=None, out=None):
    cfg = ExperimentConfig.load(path)
    over = {}
    if seed is not None:
        over["experiment.seed"] = seed
    if out is not None:
        over["experiment.output_dir"] = str(out)
    return cfg.with_overrides(**{k.replace(".", "__"): v for k, v in over.items()})


def execute(kind, cfg, baseline=None, out=None):
    """Run one experiment; returns ``(exit_code, report_text)``."""
    try:
        if kind == "offline":
            res = ex.run_offline(cfg, out)
        elif kind == "online":
            res = ex.run_online(cfg, baseline, out)
        else:
            res = ex.run_verify(cfg, out)
    except ConfigurationError as err:
        return ex.EXIT_CONFIG, f"configuration error: {err}\n"
    except InsufficientExcitationError as err:
        return ex.EXIT_EXCITATION, f"insufficient excitation: {err}\n"
    except BundleError as err:
        return ex.EXIT_BUNDLE, f"bundle error: {err}\n"
    except InputError as err:
        return ex.EXIT_INPUT, f"input error: {err}\n"
    return res.exit_code, res.report()


def _sweep_job(args):
    path, seed, baseline, out = args
    try:
        cfg = load_config(path, seed, out)
    except ConfigurationError as err:
        return path, seed, ex.EXIT_CONFIG, f"configuration error: {err}\n"
    code, text = execute(cfg["experiment.kind"], cfg, baseline, out)
    return path, seed, code, text


def build_parser():
    p = argparse.ArgumentParser(prog="ipiadp", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    helps = {"offline": "train on excitation data and check the trained policy",
             "online": "adapt online from an offline bundle",
             "verify": "compare a training run against the Riccati oracle"}
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", required=True,
                        help="config file, or the name of a shipped config")
        sp.add_argument("--seed", type=int, help="override experiment.seed")
        sp.add_argument("--out", type=Path, help="bundle directory (overrides experiment.output_dir)")
        if name == "online":
            sp.add_argument("--baseline", help="offline bundle directory (overrides run.baseline)")

    sp = sub.add_parser("plot", help="render a trajectory or history CSV to SVG")
    sp.add_argument("csv", type=Path)
    sp.add_argument("--kind", choices=("trajectory", "history"), default="trajectory")
    sp.add_argument("--out", type=Path, help="output SVG path")

    sp = sub.add_parser("sweep", help="run several configs and/or seeds in parallel")
    sp.add_argument("--config", action="append", required=True, help="repeatable")
    sp.add_argument("--seed", type=int, default=None, help="first seed (default: config seed)")
    sp.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds per config")
    sp.add_argument("--out", type=Path, default=Path("runs/sweep"))
    sp.add_argument("--baseline", help="offline bundle for online configs")
    sp.add_argument("--jobs", type=int, default=1)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "plot":
        try:
            path = emit_plot(args.csv, args.kind, args.out)
        except InputError as err:
            print(f"input error: {err}", file=sys.stderr)
            return ex.EXIT_INPUT
        print(path)
        return ex.EXIT_OK

    if args.command == "sweep":
        jobs = []
        for path in args.config:
            try:
                base_seed = args.seed if args.seed is not None else \
                    ExperimentConfig.load(path)["experiment.seed"]
            except ConfigurationError as err:
                print(f"configuration error: {err}", file=sys.stderr)
                return ex.EXIT_CONFIG
            for s in range(base_seed, base_seed + args.seeds):
                out = args.out / f"{Path(path).stem}-s{s}"
                jobs.append((path, s, args.baseline, out))
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(_sweep_job, jobs))
        else:
            results = [_sweep_job(j) for j in jobs]
        worst = 0
        for path, seed, code, _ in results:
            print(f"{'PASS' if code == 0 else 'FAIL'} config={path} seed={seed} exit_code={code}")
            worst = max(worst, code)
        n_ok = sum(code == 0 for *_, code, _ in results)
        print(f"passed={n_ok} total={len(results)}")
        return worst

    try:
        cfg = load_config(args.config, args.seed, args.out)
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return ex.EXIT_CONFIG
    code, text = execute(args.command, cfg, getattr(args, "baseline", None), args.out)
    (sys.stdout if code in (ex.EXIT_OK, ex.EXIT_CHECK_FAILED, ex.EXIT_UNCONVERGED,
                            ex.EXIT_DIVERGED) else sys.stderr).write(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
