"""Small SVG chart writer (bar and line charts)."""

from __future__ import annotations

import math
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")
WIDTH, HEIGHT = 640, 360
MARGIN = {"left": 60, "right": 150, "top": 40, "bottom": 50}


def _finite(values) -> list[float]:
    return [v for v in values if v is not None and math.isfinite(v)]


def _frame(title: str, x_label: str, y_label: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{(MARGIN["left"] + WIDTH - MARGIN["right"]) / 2:.1f}" y="{HEIGHT - 10}" '
        f'text-anchor="middle">{escape(x_label)}</text>',
        f'<text x="14" y="{HEIGHT / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {HEIGHT / 2:.1f})">{escape(y_label)}</text>',
    ]


class _Scale:
    def __init__(self, lo: float, hi: float, out_lo: float, out_hi: float):
        if hi <= lo:
            hi = lo + 1.0
        self.lo, self.hi, self.out_lo, self.out_hi = lo, hi, out_lo, out_hi

    def __call__(self, v: float) -> float:
        return self.out_lo + (v - self.lo) / (self.hi - self.lo) * (self.out_hi - self.out_lo)


def _axes(xs: _Scale, ys: _Scale, y_ticks: int = 5) -> list[str]:
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    out = [f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
           f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>']
    for i in range(y_ticks + 1):
        v = ys.lo + (ys.hi - ys.lo) * i / y_ticks
        y = ys(v)
        out.append(f'<line x1="{x0 - 4}" y1="{y:.1f}" x2="{x0}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{x0 - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    return out


def _legend(names: Sequence[str]) -> list[str]:
    x = WIDTH - MARGIN["right"] + 12
    out = []
    for i, name in enumerate(names):
        y = MARGIN["top"] + 16 * i
        out.append(f'<rect x="{x}" y="{y}" width="10" height="10" fill="{PALETTE[i % len(PALETTE)]}"/>')
        out.append(f'<text x="{x + 14}" y="{y + 9}">{escape(name)}</text>')
    return out


def bar_chart(categories: Sequence[str], series: Mapping[str, Sequence[float]], title: str,
              x_label: str = "", y_label: str = "") -> str:
    """Grouped bars: one group per category, one bar per series."""
    values = _finite(v for vals in series.values() for v in vals)
    hi = max(values + [0.0])
    lo = min(values + [0.0])
    ys = _Scale(lo, hi * 1.05 if hi > 0 else 1.0, HEIGHT - MARGIN["bottom"], MARGIN["top"])
    xs = _Scale(0, max(len(categories), 1), MARGIN["left"], WIDTH - MARGIN["right"])
    parts = _frame(title, x_label, y_label) + _axes(xs, ys)
    group_w = (xs(1) - xs(0)) * 0.8
    bar_w = group_w / max(len(series), 1)
    for c, cat in enumerate(categories):
        gx = xs(c) + (xs(1) - xs(0)) * 0.1
        for s, (name, vals) in enumerate(series.items()):
            v = vals[c]
            if v is None or not math.isfinite(v):
                continue
            top, base = ys(max(v, 0.0)), ys(min(v, 0.0))
            parts.append(f'<rect class="bar" data-series="{escape(name)}" x="{gx + s * bar_w:.1f}" '
                         f'y="{top:.1f}" width="{bar_w * 0.9:.1f}" height="{base - top:.1f}" '
                         f'fill="{PALETTE[s % len(PALETTE)]}"/>')
        parts.append(f'<text x="{gx + group_w / 2:.1f}" y="{HEIGHT - MARGIN["bottom"] + 14}" '
                     f'text-anchor="middle">{escape(str(cat))}</text>')
    parts += _legend(list(series)) + ["</svg>"]
    return "\n".join(parts) + "\n"


def line_chart(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], title: str,
               x_label: str = "", y_label: str = "") -> str:
    """One polyline per series; each series is ``(xs, ys)``."""
    all_x = _finite(x for xs, _ in series.values() for x in xs)
    all_y = _finite(y for _, ys in series.values() for y in ys)
    if not all_x or not all_y:
        raise ValueError("line chart needs at least one finite point")
    xs = _Scale(min(all_x), max(all_x), MARGIN["left"], WIDTH - MARGIN["right"])
    pad = 0.05 * (max(all_y) - min(all_y) or 1.0)
    ys = _Scale(min(all_y) - pad, max(all_y) + pad, HEIGHT - MARGIN["bottom"], MARGIN["top"])
    parts = _frame(title, x_label, y_label) + _axes(xs, ys)
    for i, (name, (px, py)) in enumerate(series.items()):
        pts = " ".join(f"{xs(x):.1f},{ys(y):.1f}" for x, y in zip(px, py)
                       if math.isfinite(x) and math.isfinite(y))
        parts.append(f'<polyline class="series" data-series="{escape(name)}" points="{pts}" fill="none" '
                     f'stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="1.5"/>')
    parts += _legend(list(series)) + ["</svg>"]
    return "\n".join(parts) + "\n"
