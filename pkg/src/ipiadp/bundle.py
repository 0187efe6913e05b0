"""Run artifact bundles: one directory per run plus a hash manifest."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import BundleError
from .valuefn import QuadraticKernel

BUNDLE_VERSION = 1
MANIFEST = "manifest.json"
STATE = "state.json"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_state(out_dir, kernel: QuadraticKernel, theta, identifier=None, kernel_state=None,
                **extra):
    """Store the learned kernel and incremental model (plus optional RLS states)."""
    theta = np.asarray(theta, dtype=float)
    state = {
        "version": BUNDLE_VERSION,
        "gamma": float(kernel.gamma),
        "n_x": kernel.n,
        "n_u": theta.shape[0] - kernel.n,
        "kernel": kernel.to_list(),
        "theta": theta.ravel().tolist(),
    }
    if identifier is not None:
        state["identifier"] = identifier.to_dict()
    if kernel_state is not None:
        state["kernel_rls"] = kernel_state.to_dict()
    state.update(extra)
    write_json(Path(out_dir) / STATE, state)
    return state


def finalize(out_dir, kind):
    """Hash every file in the bundle into ``manifest.json``."""
    out_dir = Path(out_dir)
    files = {p.name: sha256_file(p) for p in sorted(out_dir.iterdir())
             if p.is_file() and p.name != MANIFEST}
    write_json(out_dir / MANIFEST, {"version": BUNDLE_VERSION, "kind": kind, "files": files})


def load_baseline(bundle_dir):
    """Return ``(kernel, theta, state)`` from an offline bundle.

    Raises :class:`BundleError` when the bundle is missing, tampered with, or
    written by an incompatible version.
    """
    bundle_dir = Path(bundle_dir)
    man_path = bundle_dir / MANIFEST
    if not bundle_dir.is_dir() or not man_path.exists():
        raise BundleError(f"no bundle at {bundle_dir}")
    try:
        manifest = json.loads(man_path.read_text())
        state = json.loads((bundle_dir / STATE).read_text())
    except (OSError, ValueError) as err:
        raise BundleError(f"unreadable bundle {bundle_dir}: {err}") from None
    if manifest.get("version") != BUNDLE_VERSION or state.get("version") != BUNDLE_VERSION:
        raise BundleError(f"bundle {bundle_dir} has version {manifest.get('version')}, "
                          f"expected {BUNDLE_VERSION}")
    expected = manifest.get("files", {}).get(STATE)
    if expected != sha256_file(bundle_dir / STATE):
        raise BundleError(f"state hash mismatch in {bundle_dir}")
    try:
        n_x, n_u = int(state["n_x"]), int(state["n_u"])
        kernel = QuadraticKernel(np.reshape(state["kernel"], (n_x, n_x)), float(state["gamma"]))
        theta = np.reshape(np.asarray(state["theta"], dtype=float), (n_x + n_u, n_x))
    except (KeyError, ValueError, TypeError) as err:
        raise BundleError(f"malformed state in {bundle_dir}: {err}") from None
    return kernel, theta, state
