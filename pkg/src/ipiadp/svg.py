"""Dependency-free SVG 1.1 line charts for trajectories and training histories.

Each polyline carries ``data-series``, ``data-first`` and ``data-last``
attributes with the plotted values so the files can be checked without
reverse-mapping pixel coordinates.
"""
from __future__ import annotations

import csv
import re
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import InputError

WIDTH = 720
PANEL_H = 240
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 130, 36, 42
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

TRAJECTORY_HEADER = ["k", "x1", "x2", "u", "du", "stage_cost", "value_est"]
HISTORY_HEADER = ["iteration", "p11", "p12", "p22", "delta_frobenius", "probe_value_max"]


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return list(np.linspace(lo, hi, n))


def _fmt(v):
    return f"{v:.3g}"


def _panel(top, title, xlabel, ylabel, x, series):
    """Return the SVG elements of one panel starting at vertical offset ``top``."""
    x = np.asarray(x, dtype=float)
    ys = [np.asarray(v, dtype=float) for _, v in series]
    finite = np.concatenate([v[np.isfinite(v)] for v in ys]) if ys else np.array([])
    y_lo, y_hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    x_lo, x_hi = float(x.min()), float(x.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = PANEL_H - MARGIN_T - MARGIN_B
    x0, y0 = MARGIN_L, top + MARGIN_T

    def sx(v):
        return x0 + (v - x_lo) / (x_hi - x_lo) * pw

    def sy(v):
        return y0 + ph - (v - y_lo) / (y_hi - y_lo) * ph

    out = [f'<g class="panel" data-title="{escape(title)}" data-xmin="{x_lo!r}" '
           f'data-xmax="{x_hi!r}" data-ymin="{y_lo!r}" data-ymax="{y_hi!r}">',
           f'<text x="{x0 + pw / 2:.1f}" y="{top + 22}" text-anchor="middle" '
           f'font-size="14">{escape(title)}</text>',
           f'<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for t in _ticks(x_lo, x_hi):
        out.append(f'<line x1="{sx(t):.2f}" y1="{y0 + ph}" x2="{sx(t):.2f}" y2="{y0 + ph + 5}" '
                   f'stroke="#444"/>')
        out.append(f'<text x="{sx(t):.2f}" y="{y0 + ph + 18}" text-anchor="middle" '
                   f'font-size="11">{_fmt(t)}</text>')
    for t in _ticks(y_lo, y_hi):
        out.append(f'<line x1="{x0 - 5}" y1="{sy(t):.2f}" x2="{x0}" y2="{sy(t):.2f}" stroke="#444"/>')
        out.append(f'<text x="{x0 - 8}" y="{sy(t) + 4:.2f}" text-anchor="end" '
                   f'font-size="11">{_fmt(t)}</text>')
    out.append(f'<text x="{x0 + pw / 2:.1f}" y="{y0 + ph + 34}" text-anchor="middle" '
               f'font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{y0 + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {y0 + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (name, v) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        ok = np.isfinite(v)
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x[ok], v[ok]))
        first = repr(float(v[ok][0])) if ok.any() else "nan"
        last = repr(float(v[ok][-1])) if ok.any() else "nan"
        out.append(f'<polyline class="series" data-series="{escape(name)}" data-first="{first}" '
                   f'data-last="{last}" fill="none" stroke="{color}" stroke-width="1.5" '
                   f'points="{pts}"/>')
        ly = y0 + 14 + 16 * i
        out.append(f'<line x1="{x0 + pw + 10}" y1="{ly}" x2="{x0 + pw + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{x0 + pw + 35}" y="{ly + 4}" font-size="12">{escape(name)}</text>')
    out.append("</g>")
    return out


def render(title, panels):
    """``panels`` is a list of ``(title, xlabel, ylabel, x, [(name, y), ...])``."""
    height = PANEL_H * len(panels) + 30
    body = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" '
            f'height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">',
            f'<title>{escape(title)}</title>',
            f'<rect width="{WIDTH}" height="{height}" fill="white"/>',
            f'<text x="{WIDTH / 2:.0f}" y="20" text-anchor="middle" font-size="16">'
            f'{escape(title)}</text>']
    for i, p in enumerate(panels):
        body += _panel(30 + i * PANEL_H, *p)
    body.append("</svg>")
    return "\n".join(body) + "\n"


def _read_csv(path, header):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as err:
        raise InputError(f"cannot read {path}: {err}") from None
    if not rows or rows[0] != header:
        got = rows[0] if rows else "nothing"
        raise InputError(f"{path}: expected header {','.join(header)}, got {got}")
    if len(rows) < 2:
        raise InputError(f"{path}: no data rows")
    try:
        return np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as err:
        raise InputError(f"{path}: {err}") from None


def trajectory_svg(data, title="closed-loop response"):
    k = data[:, 0]
    norm = np.hypot(data[:, 1], data[:, 2])
    return render(title, [
        ("states", "step k", "state", k,
         [("x1", data[:, 1]), ("x2", data[:, 2]), ("norm", norm)]),
        ("incremental control", "step k", "du", k, [("du", data[:, 4])]),
    ])


def history_svg(data, title="offline training"):
    it = data[:, 0]
    delta = np.log10(np.maximum(data[:, 4], 1e-300))
    return render(title, [
        ("kernel entries", "iteration", "P entry", it,
         [("p11", data[:, 1]), ("p12", data[:, 2]), ("p22", data[:, 3])]),
        ("kernel change", "iteration", "log10 delta", it, [("log10_delta", delta)]),
    ])


def emit_plot(csv_path, kind, out_path=None):
    """Render a trajectory or history CSV to SVG; returns the output path."""
    if kind == "trajectory":
        text = trajectory_svg(_read_csv(csv_path, TRAJECTORY_HEADER))
    elif kind == "history":
        text = history_svg(_read_csv(csv_path, HISTORY_HEADER))
    else:
        raise InputError(f"unknown plot kind {kind!r}")
    out_path = Path(out_path) if out_path else Path(csv_path).with_suffix(".svg")
    out_path.write_text(text)
    return out_path


def polyline_series(svg_text):
    """Map ``data-series`` names to their ``(first, last, n_points)``; used by tests."""
    out = {}
    for m in re.finditer(r'data-series="([^"]+)" data-first="([^"]+)" data-last="([^"]+)"'
                         r'[^>]*points="([^"]*)"', svg_text):
        n = len(m.group(4).split()) if m.group(4) else 0
        out[m.group(1)] = (float(m.group(2)), float(m.group(3)), n)
    return out
