"""Standalone SVG line charts of prediction error versus observed length.

Each chart plots one metric (average or 95th-percentile error, meters) for
one motion profile, with one polyline per model. The numbers behind the
chart are embedded in an XML comment as a small CSV table, so results stay
recoverable from the image file alone. Rendering is fully deterministic.
"""

from __future__ import annotations

import math
import os
from xml.sax.saxutils import escape

from .config import ConfigError
from .ioutil import atomic_write_text

METRICS = {
    "avg": ("avg_error_m", "average error (m)"),
    "p95": ("p95_error_m", "95th-percentile error (m)"),
}
PALETTE = ("#1b6ca8", "#d1495b", "#2e933c", "#8a5fbf", "#e3871e", "#3bb2b8")

_WIDTH, _HEIGHT = 640, 420
_LEFT, _RIGHT, _TOP, _BOTTOM = 70, 170, 48, 56


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** math.floor(math.log10(raw))
    step = min(s for s in (mag, 2 * mag, 2.5 * mag, 5 * mag, 10 * mag) if s >= raw)
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-12 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


def _fmt(v):
    return f"{v:.6g}"


def render_error_plot(report, metric, profile):
    """SVG text for one (metric, profile) chart; series are models."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {sorted(METRICS)}")
    column, y_label = METRICS[metric]
    rows = [r for r in report.rows if r.profile == profile]
    if not rows:
        raise ConfigError(f"report has no rows for profile '{profile}'")
    models = sorted({r.model for r in rows})
    series = {}
    for model in models:
        pts = sorted((r.t_obs, getattr(r, column)) for r in rows if r.model == model)
        series[model] = pts

    xs = sorted({t for pts in series.values() for t, _ in pts})
    ys = [v for pts in series.values() for _, v in pts]
    x_lo, x_hi = (xs[0] - 0.5, xs[0] + 0.5) if len(xs) == 1 else (xs[0], xs[-1])
    y_lo, y_hi = 0.0, max(ys) * 1.08 if max(ys) > 0 else 1.0

    plot_w = _WIDTH - _LEFT - _RIGHT
    plot_h = _HEIGHT - _TOP - _BOTTOM

    def sx(t):
        return _LEFT + (t - x_lo) / (x_hi - x_lo) * plot_w

    def sy(v):
        return _TOP + plot_h - (v - y_lo) / (y_hi - y_lo) * plot_h

    title = f"{profile}: {y_label} vs observed sequence length"
    table = [f"model,profile,t_obs,{column}"]
    for model in models:
        for t, v in series[model]:
            table.append(f"{model},{profile},{t},{v!r}")

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}" font-family="sans-serif">',
        "<!-- data\n" + "\n".join(table) + "\ndata -->",
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<text x="{_WIDTH / 2:.1f}" y="24" text-anchor="middle" font-size="15">'
        f"{escape(title)}</text>",
        # axes
        f'<line x1="{_LEFT}" y1="{_TOP}" x2="{_LEFT}" y2="{_TOP + plot_h}" stroke="black"/>',
        f'<line x1="{_LEFT}" y1="{_TOP + plot_h}" x2="{_LEFT + plot_w}" y2="{_TOP + plot_h}" '
        'stroke="black"/>',
        f'<text x="{_LEFT + plot_w / 2:.1f}" y="{_HEIGHT - 14}" text-anchor="middle" '
        'font-size="13">observed sequence length (steps)</text>',
        f'<text x="18" y="{_TOP + plot_h / 2:.1f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 18 {_TOP + plot_h / 2:.1f})">{escape(y_label)}</text>',
    ]
    for t in xs:
        x = sx(t)
        out.append(
            f'<line x1="{x:.2f}" y1="{_TOP + plot_h}" x2="{x:.2f}" y2="{_TOP + plot_h + 5}" '
            'stroke="black"/>'
        )
        out.append(
            f'<text x="{x:.2f}" y="{_TOP + plot_h + 20}" text-anchor="middle" font-size="12">'
            f"{t}</text>"
        )
    for v in _ticks(y_lo, y_hi):
        y = sy(v)
        out.append(f'<line x1="{_LEFT - 5}" y1="{y:.2f}" x2="{_LEFT}" y2="{y:.2f}" stroke="black"/>')
        out.append(
            f'<line x1="{_LEFT}" y1="{y:.2f}" x2="{_LEFT + plot_w}" y2="{y:.2f}" '
            'stroke="#dddddd" stroke-width="0.7"/>'
        )
        out.append(
            f'<text x="{_LEFT - 9}" y="{y + 4:.2f}" text-anchor="end" font-size="12">'
            f"{_fmt(v)}</text>"
        )
    for i, model in enumerate(models):
        color = PALETTE[i % len(PALETTE)]
        pts = series[model]
        coords = " ".join(f"{sx(t):.2f},{sy(v):.2f}" for t, v in pts)
        out.append(
            f'<polyline class="series" data-model="{escape(model)}" points="{coords}" '
            f'fill="none" stroke="{color}" stroke-width="2"/>'
        )
        for t, v in pts:
            out.append(f'<circle cx="{sx(t):.2f}" cy="{sy(v):.2f}" r="3" fill="{color}"/>')
        ly = _TOP + 12 + 20 * i
        lx = _LEFT + plot_w + 18
        out.append(
            f'<line x1="{lx}" y1="{ly}" x2="{lx + 22}" y2="{ly}" stroke="{color}" '
            'stroke-width="2"/>'
        )
        out.append(f'<circle cx="{lx + 11}" cy="{ly}" r="3" fill="{color}"/>')
        out.append(
            f'<text x="{lx + 28}" y="{ly + 4}" font-size="12">{escape(model)}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def extract_embedded_table(svg_text):
    """Recover the CSV rows embedded in a chart's data comment."""
    start = svg_text.find("<!-- data\n")
    end = svg_text.find("\ndata -->")
    if start < 0 or end < 0:
        raise ConfigError("no embedded data table found")
    lines = svg_text[start + len("<!-- data\n") : end].splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def count_series(svg_text):
    return svg_text.count('<polyline class="series"')


def write_report_plots(report, out_dir, metrics=("avg", "p95"), profiles=None):
    """One SVG per (metric, profile); returns the written paths."""
    if profiles is None:
        profiles = sorted({r.profile for r in report.rows})
    if not profiles:
        raise ConfigError("report has no rows to plot")
    paths = []
    for metric in metrics:
        for profile in profiles:
            svg = render_error_plot(report, metric, profile)
            path = os.path.join(str(out_dir), f"{metric}_{profile}.svg")
            atomic_write_text(path, svg)
            paths.append(path)
    return paths
