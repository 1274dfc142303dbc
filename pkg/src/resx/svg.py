"""Hand-written SVG line charts: axes, one polyline per series, legend.

Output is plain text with fixed float formatting, so identical inputs give
identical files.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=150, top=40, bottom=50)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _transform(values, log):
    out = []
    for v in values:
        if v is None or not math.isfinite(v) or (log and v <= 0):
            out.append(None)
        else:
            out.append(math.log10(v) if log else float(v))
    return out


def _range(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def line_chart(series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
               logx: bool = False, logy: bool = False) -> str:
    """Render ``{name: (xs, ys)}`` as an SVG document.

    Points that are missing, non-finite, or non-positive on a log axis are
    dropped from their polyline.
    """
    data = {name: (_transform(xs, logx), _transform(ys, logy)) for name, (xs, ys) in series.items()}
    x0, x1 = _range([x for xs, _ in data.values() for x in xs])
    y0, y1 = _range([y for _, ys in data.values() for y in ys])
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + ph - (y - y0) / (y1 - y0) * ph

    def label(v, log):
        return f"1e{v:.3g}" if log else f"{v:.4g}"

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<g class="axes" stroke="black" fill="none">'
        f'<line x1="{MARGIN["left"]}" y1="{MARGIN["top"] + ph}" x2="{MARGIN["left"] + pw}" y2="{MARGIN["top"] + ph}"/>'
        f'<line x1="{MARGIN["left"]}" y1="{MARGIN["top"]}" x2="{MARGIN["left"]}" y2="{MARGIN["top"] + ph}"/></g>',
    ]
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        parts.append(f'<text x="{px(xv):.1f}" y="{MARGIN["top"] + ph + 16}" text-anchor="middle">{label(xv, logx)}</text>')
        parts.append(f'<text x="{MARGIN["left"] - 6}" y="{py(yv) + 4:.1f}" text-anchor="end">{label(yv, logy)}</text>')
    parts.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    parts.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.1f})">{escape(ylabel)}</text>')

    for idx, (name, (xs, ys)) in enumerate(data.items()):
        colour = PALETTE[idx % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys) if x is not None and y is not None)
        parts.append(f'<polyline class="series" data-name="{escape(str(name), {chr(34): "&quot;"})}" '
                     f'fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        ly = MARGIN["top"] + 14 * idx + 6
        lx = WIDTH - MARGIN["right"] + 12
        parts.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{colour}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 22}" y="{ly + 4}">{escape(str(name))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
