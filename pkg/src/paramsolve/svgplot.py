"""Minimal static SVG line plots on logarithmic axes."""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

_COLORS = ("#1f4e79", "#b03a2e", "#1e8449", "#7d3c98", "#b9770e", "#2e4053")
_W, _H = 640, 420
_ML, _MR, _MT, _MB = 70, 150, 40, 55


def _bounds(values: list[np.ndarray]) -> tuple[float, float]:
    lo = min(float(np.min(v)) for v in values)
    hi = max(float(np.max(v)) for v in values)
    lo, hi = math.floor(math.log10(lo)), math.ceil(math.log10(hi))
    return (lo, hi) if hi > lo else (lo, lo + 1)


def loglog_svg(series: dict[str, tuple[np.ndarray, np.ndarray]], title: str = "",
               xlabel: str = "", ylabel: str = "") -> str:
    """Render positive (x, y) series as polylines on log-log axes."""
    clean = {}
    for name, (x, y) in series.items():
        x, y = np.asarray(x, float), np.asarray(y, float)
        keep = (x > 0) & (y > 0) & np.isfinite(x) & np.isfinite(y)
        if keep.any():
            clean[name] = (x[keep], y[keep])
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>']
    pw, ph = _W - _ML - _MR, _H - _MT - _MB
    if clean:
        xlo, xhi = _bounds([x for x, _ in clean.values()])
        ylo, yhi = _bounds([y for _, y in clean.values()])

        def px(x):
            return _ML + (np.log10(x) - xlo) / (xhi - xlo) * pw

        def py(y):
            return _MT + ph - (np.log10(y) - ylo) / (yhi - ylo) * ph

        for e in range(xlo, xhi + 1):
            X = px(10.0**e)
            out.append(f'<line x1="{X:.1f}" y1="{_MT}" x2="{X:.1f}" y2="{_MT + ph}" stroke="#ddd"/>')
            out.append(f'<text x="{X:.1f}" y="{_MT + ph + 16}" text-anchor="middle">1e{e}</text>')
        for e in range(ylo, yhi + 1):
            Y = py(10.0**e)
            out.append(f'<line x1="{_ML}" y1="{Y:.1f}" x2="{_ML + pw}" y2="{Y:.1f}" stroke="#ddd"/>')
            out.append(f'<text x="{_ML - 6}" y="{Y + 4:.1f}" text-anchor="end">1e{e}</text>')
        for i, (name, (x, y)) in enumerate(clean.items()):
            color = _COLORS[i % len(_COLORS)]
            pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px(x), py(y)))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
            ly = _MT + 14 + 18 * i
            out.append(f'<line x1="{_ML + pw + 12}" y1="{ly - 4}" x2="{_ML + pw + 32}" y2="{ly - 4}" '
                       f'stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{_ML + pw + 38}" y="{ly}">{escape(name)}</text>')
    out.append(f'<rect x="{_ML}" y="{_MT}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{_W / 2:.0f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    out.append(f'<text x="{_ML + pw / 2:.0f}" y="{_H - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{_MT + ph / 2:.0f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {_MT + ph / 2:.0f})">{escape(ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_loglog(path: str | Path, series, **labels) -> Path:
    path = Path(path)
    path.write_text(loglog_svg(series, **labels))
    return path
