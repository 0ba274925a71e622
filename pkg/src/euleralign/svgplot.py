"""Minimal self-contained SVG line plots (no plotting dependency)."""

from __future__ import annotations

import math

import numpy as np

_COLORS = ("#1f6fb2", "#d1495b", "#3d9970", "#8e5aa8", "#e08f2d", "#444444",
           "#8a8a3c", "#2aa7a0")


def _ticks(lo: float, hi: float, n: int = 5):
    if not math.isfinite(lo) or not math.isfinite(hi):
        return [0.0]
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    step = 10.0 ** math.floor(math.log10(span / n))
    for mult in (1, 2, 5, 10):
        if span / (step * mult) <= n:
            step *= mult
            break
    first = math.ceil(lo / step) * step
    out = []
    v = first
    while v <= hi + 1e-12 * span:
        out.append(round(v, 12))
        v += step
    return out or [lo]


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.1e}"
    return f"{v:.4g}"


def line_plot(path, curves, title="", xlabel="", ylabel="",
              width=720, height=440, logy=False):
    """Write a polyline plot.  curves: list of (x, y, label) triples."""
    ml, mr, mt, mb = 70, 20, 40, 50
    pw, ph = width - ml - mr, height - mt - mb
    xs = [np.asarray(c[0], dtype=float) for c in curves]
    ys = [np.asarray(c[1], dtype=float) for c in curves]
    if logy:
        ys = [np.log10(np.maximum(y, 1e-300)) for y in ys]
    finite = [np.isfinite(x) & np.isfinite(y) for x, y in zip(xs, ys)]
    if not any(np.any(f) for f in finite):
        raise ValueError("no finite data to plot")
    x_lo = min(float(np.min(x[f])) for x, f in zip(xs, finite) if np.any(f))
    x_hi = max(float(np.max(x[f])) for x, f in zip(xs, finite) if np.any(f))
    y_lo = min(float(np.min(y[f])) for y, f in zip(ys, finite) if np.any(f))
    y_hi = max(float(np.max(y[f])) for y, f in zip(ys, finite) if np.any(f))
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def X(v):
        return ml + (v - x_lo) / (x_hi - x_lo) * pw

    def Y(v):
        return mt + ph - (v - y_lo) / (y_hi - y_lo) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" '
        'stroke="#333" stroke-width="1"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{title}</text>',
    ]
    for tx in _ticks(x_lo, x_hi):
        px = X(tx)
        parts.append(f'<line x1="{px:.1f}" y1="{mt + ph}" x2="{px:.1f}" '
                     f'y2="{mt + ph + 5}" stroke="#333"/>')
        parts.append(f'<text x="{px:.1f}" y="{mt + ph + 20}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="11">{_fmt(tx)}</text>')
    for ty in _ticks(y_lo, y_hi):
        py = Y(ty)
        label = _fmt(10 ** ty) if logy else _fmt(ty)
        parts.append(f'<line x1="{ml - 5}" y1="{py:.1f}" x2="{ml}" '
                     f'y2="{py:.1f}" stroke="#333"/>')
        parts.append(f'<text x="{ml - 8}" y="{py + 4:.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{label}</text>')
    parts.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'font-size="13">{xlabel}</text>')
    parts.append(f'<text x="18" y="{mt + ph / 2:.1f}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="13" '
                 f'transform="rotate(-90 18 {mt + ph / 2:.1f})">{ylabel}</text>')

    for i, ((x, y, label), f) in enumerate(zip(
            [(x, y, c[2]) for x, y, c in zip(xs, ys, curves)], finite)):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in zip(x[f], y[f]))
        if pts:
            parts.append(f'<polyline points="{pts}" fill="none" '
                         f'stroke="{color}" stroke-width="1.6"/>')
        ly = mt + 16 + 16 * i
        parts.append(f'<line x1="{ml + pw - 150}" y1="{ly - 4}" '
                     f'x2="{ml + pw - 125}" y2="{ly - 4}" stroke="{color}" '
                     'stroke-width="2"/>')
        parts.append(f'<text x="{ml + pw - 120}" y="{ly}" '
                     f'font-family="sans-serif" font-size="11">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
    return path


def scatter_plot(path, points, title="", xlabel="", ylabel="", width=720,
                 height=440):
    """Categorical scatter: points is a list of (x, y, category)."""
    cats = []
    for _, _, c in points:
        if c not in cats:
            cats.append(c)
    ml, mr, mt, mb = 70, 20, 40, 50
    pw, ph = width - ml - mr, height - mt - mb
    xs = np.asarray([p[0] for p in points], dtype=float)
    ys = np.asarray([p[1] for p in points], dtype=float)
    x_lo, x_hi = float(xs.min()), float(xs.max())
    y_lo, y_hi = float(ys.min()), float(ys.max())
    if x_hi <= x_lo:
        x_lo, x_hi = x_lo - 1.0, x_hi + 1.0
    if y_hi <= y_lo:
        y_lo, y_hi = y_lo - 1.0, y_hi + 1.0
    x_lo, x_hi = x_lo - 0.08 * (x_hi - x_lo), x_hi + 0.08 * (x_hi - x_lo)
    y_lo, y_hi = y_lo - 0.08 * (y_hi - y_lo), y_hi + 0.08 * (y_hi - y_lo)

    def X(v):
        return ml + (v - x_lo) / (x_hi - x_lo) * pw

    def Y(v):
        return mt + ph - (v - y_lo) / (y_hi - y_lo) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" '
        'stroke="#333"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{title}</text>',
        f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">{xlabel}</text>',
        f'<text x="18" y="{mt + ph / 2:.1f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13" '
        f'transform="rotate(-90 18 {mt + ph / 2:.1f})">{ylabel}</text>',
    ]
    for tx in _ticks(x_lo, x_hi):
        parts.append(f'<text x="{X(tx):.1f}" y="{mt + ph + 20}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="11">{_fmt(tx)}</text>')
    for ty in _ticks(y_lo, y_hi):
        parts.append(f'<text x="{ml - 8}" y="{Y(ty) + 4:.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{_fmt(ty)}</text>')
    for x, y, c in points:
        color = _COLORS[cats.index(c) % len(_COLORS)]
        parts.append(f'<circle cx="{X(x):.1f}" cy="{Y(y):.1f}" r="5" '
                     f'fill="{color}" fill-opacity="0.85"/>')
    for i, c in enumerate(cats):
        ly = mt + 16 + 16 * i
        color = _COLORS[i % len(_COLORS)]
        parts.append(f'<circle cx="{ml + pw - 140}" cy="{ly - 4}" r="5" '
                     f'fill="{color}"/>')
        parts.append(f'<text x="{ml + pw - 128}" y="{ly}" '
                     f'font-family="sans-serif" font-size="11">{c}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
    return path
