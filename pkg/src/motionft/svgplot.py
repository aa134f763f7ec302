"""Hand-written SVG output: time-coloured root trajectories and line curves."""

from __future__ import annotations

import colorsys
from xml.sax.saxutils import escape

import numpy as np


def _time_color(u: float) -> str:
    # blue (start) through green to red (end)
    r, g, b = colorsys.hsv_to_rgb((1.0 - u) * 2.0 / 3.0, 0.85, 0.9)
    return f"#{int(r * 255):02x}{int(g * 255):02x}{int(b * 255):02x}"


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def trajectory_svg(frames, title: str = "", size: int = 360, margin: int = 30) -> str:
    """Root path (channels 0, 1) as per-segment coloured lines, colour = time."""
    xy = np.asarray(frames)[:, :2]
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = max(float(np.max(hi - lo)), 0.5)
    centre = (lo + hi) / 2
    scale = (size - 2 * margin) / span

    def px(p):
        return margin + (p[0] - centre[0]) * scale + (size - 2 * margin) / 2, \
            size - margin - ((p[1] - centre[1]) * scale + (size - 2 * margin) / 2)

    pts = [px(p) for p in xy]
    n = len(pts)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20}" '
           f'viewBox="0 0 {size} {size + 20}">',
           f'<rect x="0" y="0" width="{size}" height="{size + 20}" fill="white"/>',
           f'<rect x="{margin}" y="{margin}" width="{size - 2 * margin}" height="{size - 2 * margin}" '
           'fill="none" stroke="#cccccc"/>']
    if title:
        out.append(f'<text x="{size / 2}" y="18" font-family="sans-serif" font-size="12" '
                   f'text-anchor="middle">{escape(title)}</text>')
    for i in range(n - 1):
        (x0, y0), (x1, y1) = pts[i], pts[i + 1]
        out.append(f'<line x1="{_fmt(x0)}" y1="{_fmt(y0)}" x2="{_fmt(x1)}" y2="{_fmt(y1)}" '
                   f'stroke="{_time_color(i / max(n - 2, 1))}" stroke-width="3" stroke-linecap="round"/>')
    x0, y0 = pts[0]
    out.append(f'<circle cx="{_fmt(x0)}" cy="{_fmt(y0)}" r="4" fill="{_time_color(0.0)}"/>')
    # colour bar
    for k in range(10):
        out.append(f'<rect x="{margin + k * (size - 2 * margin) / 10:.2f}" y="{size + 2}" '
                   f'width="{(size - 2 * margin) / 10:.2f}" height="8" fill="{_time_color(k / 9)}"/>')
    out.append(f'<text x="{margin}" y="{size + 19}" font-family="sans-serif" font-size="9">t=0</text>')
    out.append(f'<text x="{size - margin}" y="{size + 19}" font-family="sans-serif" font-size="9" '
               f'text-anchor="end">t={n - 1}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def curve_svg(xs, ys, title: str = "", ylabel: str = "", width: int = 480, height: int = 280) -> str:
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    m = 40
    x_lo, x_hi = float(xs.min()), float(max(xs.max(), xs.min() + 1))
    y_lo, y_hi = float(ys.min()), float(ys.max())
    if y_hi - y_lo < 1e-12:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    sx = (width - 2 * m) / (x_hi - x_lo)
    sy = (height - 2 * m) / (y_hi - y_lo)
    pts = " ".join(f"{_fmt(m + (x - x_lo) * sx)},{_fmt(height - m - (y - y_lo) * sy)}" for x, y in zip(xs, ys))
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{m}" y="{m}" width="{width - 2 * m}" height="{height - 2 * m}" fill="none" stroke="#cccccc"/>',
        f'<text x="{width / 2}" y="20" font-family="sans-serif" font-size="12" '
        f'text-anchor="middle">{escape(title)}</text>',
        f'<text x="{m}" y="{height - 12}" font-family="sans-serif" font-size="9">{x_lo:g}</text>',
        f'<text x="{width - m}" y="{height - 12}" font-family="sans-serif" font-size="9" '
        f'text-anchor="end">{x_hi:g}</text>',
        f'<text x="4" y="{m}" font-family="sans-serif" font-size="9">{y_hi:.3g}</text>',
        f'<text x="4" y="{height - m}" font-family="sans-serif" font-size="9">{y_lo:.3g}</text>',
        f'<text x="4" y="{height / 2}" font-family="sans-serif" font-size="9">{escape(ylabel)}</text>',
        f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>',
        "</svg>",
    ]) + "\n"
