"""Flat ``section.key = value`` experiment configuration.

Lines are ``key = value``; ``#`` starts a comment.  Lists are comma
separated and matrices are given row-major.  Every key has a typed default;
unknown keys are rejected.  Environment variables ``IPI_<SECTION>_<KEY>``
(upper case) override file values.
"""
from __future__ import annotations

import hashlib
import math
import os
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .ipi import IpiConfig
from .rls import RlsConfig
from .valuefn import CostSpec

SHIPPED_DIR = Path(__file__).parent / "configs"

# key -> (type, default); types: str, int, float, bool, floats
SCHEMA = {
    "experiment.name": ("str", "experiment"),
    "experiment.kind": ("str", "offline"),
    "experiment.seed": ("int", 0),
    "experiment.output_dir": ("str", "runs/experiment"),
    "plant.model": ("str", "model_a"),
    "plant.disturbance": ("bool", True),
    "plant.noise_std": ("float", 1.0),
    "plant.u_max": ("float", 0.0),
    "plant.blowup_radius": ("float", 1e6),
    "cost.q": ("floats", [1.0, 0.0, 0.0, 1.0]),
    "cost.r": ("floats", [1.0]),
    "cost.gamma": ("float", 0.7),
    "rls.kappa": ("float", 0.98),
    "rls.cov0": ("float", 1e6),
    "rls.ridge": ("float", 1e-9),
    "kernel.kappa": ("float", 0.995),
    "kernel.cov0": ("float", 1.0),
    "ipi.tol": ("float", 1e-6),
    "ipi.max_iter": ("int", 200),
    "ipi.initial_gain": ("floats", [-2.5, -1.0]),
    "ipi.probe_half_width": ("float", 1.0),
    "ipi.probe_points": ("int", 5),
    "ipi.ime_window": ("int", 50),
    "excitation.amplitudes": ("floats", [0.5, 0.3]),
    "excitation.frequencies": ("floats", [0.7, 1.9]),
    "excitation.phases": ("floats", [0.0, 0.5]),
    "data.episodes": ("int", 40),
    "data.episode_length": ("int", 8),
    "data.x0_radius": ("float", 0.3),
    "data.reset_radius": ("float", 2.0),
    "run.horizon": ("int", 1000),
    "run.x0": ("floats", [0.5, 0.0]),
    "run.delta": ("float", 0.3),
    "run.settle_step": ("int", 300),
    "run.growth_factor": ("float", 5.0),
    "run.baseline": ("str", ""),
    "verify.argmin_states": ("int", 100),
    "verify.argmin_bound": ("float", 5.0),
    "verify.argmin_step": ("float", 1e-3),
    "verify.argmin_tol": ("float", 2e-3),
    "verify.oracle_rel_tol": ("float", 1e-3),
}

KINDS = ("offline", "online", "verify")
PLANTS = ("model_a", "model_b", "linear_a")


def _parse_value(key, typ, raw):
    raw = raw.strip()
    try:
        if typ == "str":
            return raw
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ == "floats":
            return [float(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {typ}") from None
    raise AssertionError(typ)


def _format_value(typ, value):
    if typ == "bool":
        return "true" if value else "false"
    if typ == "floats":
        return ", ".join(repr(float(v)) for v in value)
    if typ == "float":
        return repr(float(value))
    return str(value)


def _square(values, what):
    n = int(round(math.sqrt(len(values))))
    if n * n != len(values) or n == 0:
        raise ConfigurationError(f"{what} needs a square number of entries, got {len(values)}")
    return np.array(values, dtype=float).reshape(n, n)


class ExperimentConfig:
    """Validated experiment configuration; index with dotted keys."""

    def __init__(self, values=None, source=None):
        self.values = {k: v for k, (_, v) in SCHEMA.items()}
        self.source = source
        for k, v in (values or {}).items():
            if k not in SCHEMA:
                raise ConfigurationError(f"unknown configuration key {k!r}")
            self.values[k] = v
        self.validate()

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.values == other.values

    # -- parsing / emitting

    @classmethod
    def parse(cls, text, env=None, source=None):
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigurationError(f"line {lineno}: unknown configuration key {key!r}")
            values[key] = _parse_value(key, SCHEMA[key][0], raw)
        values.update(env_overrides(os.environ if env is None else env))
        return cls(values, source)

    @classmethod
    def load(cls, path, env=None):
        path = resolve_config_path(path)
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigurationError(f"cannot read config {path}: {err}") from None
        return cls.parse(text, env=env, source=str(path))

    def dumps(self):
        lines = []
        section = None
        for key, (typ, _) in SCHEMA.items():
            sec = key.split(".", 1)[0]
            if sec != section:
                if section is not None:
                    lines.append("")
                section = sec
            lines.append(f"{key} = {_format_value(typ, self.values[key])}")
        return "\n".join(lines) + "\n"

    def hash(self):
        # where a run is written does not change what it computes
        ident = self.with_overrides(experiment__output_dir=SCHEMA["experiment.output_dir"][1])
        return hashlib.sha256(ident.dumps().encode()).hexdigest()[:16]

    def with_overrides(self, **kv):
        vals = dict(self.values)
        for k, v in kv.items():
            vals[k.replace("__", ".")] = v
        return ExperimentConfig(vals, self.source)

    # -- validation and typed views

    def validate(self):
        v = self.values
        for key, (typ, _) in SCHEMA.items():
            val = v[key]
            ok = {
                "str": isinstance(val, str),
                "int": isinstance(val, (int, np.integer)) and not isinstance(val, bool),
                "float": isinstance(val, (int, float)) and not isinstance(val, bool),
                "bool": isinstance(val, bool),
                "floats": isinstance(val, (list, tuple)),
            }[typ]
            if not ok:
                raise ConfigurationError(f"{key}: expected {typ}, got {val!r}")
            if typ == "float" and not math.isfinite(val):
                raise ConfigurationError(f"{key}: must be finite")
        if v["experiment.kind"] not in KINDS:
            raise ConfigurationError(f"experiment.kind must be one of {KINDS}")
        if v["plant.model"] not in PLANTS:
            raise ConfigurationError(f"plant.model must be one of {PLANTS}")
        if not (0.0 < v["cost.gamma"] < 1.0):
            raise ConfigurationError(f"cost.gamma must lie in (0, 1), got {v['cost.gamma']}")
        if v["plant.noise_std"] < 0 or v["plant.u_max"] < 0 or v["plant.blowup_radius"] <= 0:
            raise ConfigurationError("plant.noise_std and plant.u_max must be >= 0, blowup radius > 0")
        if v["run.horizon"] < 1:
            raise ConfigurationError("run.horizon must be >= 1")
        if not (0 <= v["run.settle_step"] <= v["run.horizon"]):
            raise ConfigurationError("run.settle_step must lie within the horizon")
        if v["run.delta"] <= 0:
            raise ConfigurationError("run.delta must be positive")
        if v["data.episodes"] < 1 or v["data.episode_length"] < 1:
            raise ConfigurationError("data.episodes and data.episode_length must be >= 1")
        n_a = len(v["excitation.amplitudes"])
        if n_a == 0 or len(v["excitation.frequencies"]) != n_a or len(v["excitation.phases"]) != n_a:
            raise ConfigurationError("excitation lists must be non-empty and of equal length")
        if v["verify.argmin_step"] <= 0 or v["verify.argmin_bound"] <= 0:
            raise ConfigurationError("verify.argmin_step and verify.argmin_bound must be positive")
        # constructing these re-checks the module-level invariants
        cost = self.cost_spec()
        self.rls_config()
        ipi_cfg = self.ipi_config()
        if ipi_cfg.gain.shape != (cost.n_u, cost.n_x):
            raise ConfigurationError("ipi.initial_gain does not match Q/R dimensions")
        if len(v["run.x0"]) != cost.n_x:
            raise ConfigurationError("run.x0 does not match the state dimension")
        if cost.n_x != 2 or cost.n_u != 1:
            raise ConfigurationError("shipped plants have two states and one input")
        if not (0.0 < v["kernel.kappa"] <= 1.0) or v["kernel.cov0"] <= 0:
            raise ConfigurationError("kernel.kappa must be in (0, 1] and kernel.cov0 > 0")

    def cost_spec(self):
        return CostSpec(_square(self["cost.q"], "cost.q"), _square(self["cost.r"], "cost.r"),
                        self["cost.gamma"])

    def rls_config(self):
        return RlsConfig(kappa=self["rls.kappa"], cov0=self["rls.cov0"])

    def ipi_config(self):
        n_x = int(round(math.sqrt(len(self["cost.q"]))))
        gain = np.array(self["ipi.initial_gain"], dtype=float)
        if gain.size % n_x:
            raise ConfigurationError("ipi.initial_gain size is not a multiple of the state size")
        return IpiConfig(
            tol=self["ipi.tol"], max_iter=self["ipi.max_iter"],
            initial_gain=gain.reshape(-1, n_x).tolist(),
            probe_half_width=self["ipi.probe_half_width"], probe_points=self["ipi.probe_points"],
            ime_window=self["ipi.ime_window"], ridge=self["rls.ridge"])

    def excitation(self):
        return list(zip(self["excitation.amplitudes"], self["excitation.frequencies"],
                        self["excitation.phases"]))

    @property
    def u_max(self):
        return self["plant.u_max"] or None


def env_overrides(env):
    out = {}
    for name, raw in env.items():
        if not name.startswith("IPI_"):
            continue
        parts = name[4:].lower().split("_", 1)
        if len(parts) != 2:
            continue
        key = f"{parts[0]}.{parts[1]}"
        if key not in SCHEMA:
            raise ConfigurationError(f"environment override {name} names unknown key {key!r}")
        out[key] = _parse_value(key, SCHEMA[key][0], raw)
    return out


def resolve_config_path(path):
    """Accept a file path or the bare name of a shipped config."""
    p = Path(path)
    if p.exists():
        return p
    shipped = SHIPPED_DIR / (p.name if p.suffix else f"{p.name}.cfg")
    if shipped.exists():
        return shipped
    return p


def shipped_configs():
    return sorted(SHIPPED_DIR.glob("*.cfg"))
