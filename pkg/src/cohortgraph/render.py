"""Dependency-free SVG rendering: importance heatmaps and sweep line plots."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np


class RenderError(ValueError):
    pass


# 5-stop sequential ramp, light to dark
DEFAULT_PALETTE = ("#f7fbff", "#c6dbef", "#6baed6", "#2171b5", "#08306b")

# one color per polyline, cycled
LINE_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _hex_to_rgb(color: str):
    return tuple(int(color[i:i + 2], 16) for i in (1, 3, 5))


def _ramp(value: float, palette) -> str:
    """Interpolate a [0,1] value linearly across the palette stops."""
    stops = [_hex_to_rgb(c) for c in palette]
    pos = min(max(value, 0.0), 1.0) * (len(stops) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(stops) - 1)
    frac = pos - lo
    rgb = tuple(round(a + frac * (b - a)) for a, b in zip(stops[lo], stops[hi]))
    return "#%02x%02x%02x" % rgb


def render_heatmap_svg(matrix: np.ndarray, row_order, col_order,
                       row_labels, col_labels,
                       palette=DEFAULT_PALETTE, cell: int = 12) -> str:
    """One rectangle per cell in display order, min-max scaled onto the
    palette; a constant matrix maps to the palette midpoint."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.size == 0:
        raise RenderError("cannot render an empty matrix")
    if not np.all(np.isfinite(matrix)):
        raise RenderError("heatmap requires finite values")
    row_order = list(row_order)
    col_order = list(col_order)
    lo, hi = matrix.min(), matrix.max()
    span = hi - lo
    label_w, label_h = 90, 70
    width = label_w + cell * len(col_order) + 10
    height = label_h + cell * len(row_order) + 10
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        '<style>text{font-family:sans-serif;font-size:8px;}</style>',
    ]
    for r, ri in enumerate(row_order):
        for c, ci in enumerate(col_order):
            v = 0.5 if span == 0 else (matrix[ri, ci] - lo) / span
            parts.append(
                f'<rect x="{label_w + c * cell}" y="{label_h + r * cell}" '
                f'width="{cell}" height="{cell}" fill="{_ramp(v, palette)}"/>')
    for r, ri in enumerate(row_order):
        y = label_h + r * cell + cell - 3
        parts.append(f'<text x="2" y="{y}">{escape(str(row_labels[ri]))}</text>')
    for c, ci in enumerate(col_order):
        x = label_w + c * cell + cell / 2
        parts.append(f'<text x="{x}" y="{label_h - 4}" '
                     f'transform="rotate(-60 {x} {label_h - 4})">'
                     f'{escape(str(col_labels[ci]))}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def render_lines_svg(axis_name: str, axis_values, series: dict,
                     width: int = 520, height: int = 340) -> str:
    """Line plot of AUC over a sweep axis: one polyline per model with a
    legend. `series` maps model name -> list of AUC values in [0,1]."""
    if not axis_values or not series:
        raise RenderError("cannot render an empty sweep table")
    for name, vals in series.items():
        for v in vals:
            if not 0.0 <= v <= 1.0:
                raise RenderError(f"AUC value {v} for {name!r} outside [0,1]")
    ml, mr, mt, mb = 50, 130, 20, 40
    pw, ph = width - ml - mr, height - mt - mb
    n = len(axis_values)
    xs = [ml + (pw * i / max(n - 1, 1)) for i in range(n)]
    ys_all = [v for vals in series.values() for v in vals]
    lo = min(0.45, min(ys_all) - 0.02)
    hi = min(1.0, max(ys_all) + 0.02)

    def y_px(v):
        return mt + ph * (1.0 - (v - lo) / (hi - lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        '<style>text{font-family:sans-serif;font-size:10px;}</style>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="#000"/>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="#000"/>',
    ]
    for t in range(6):
        v = lo + (hi - lo) * t / 5
        y = y_px(v)
        parts.append(f'<line x1="{ml - 3}" y1="{y}" x2="{ml}" y2="{y}" stroke="#000"/>')
        parts.append(f'<text x="{ml - 45}" y="{y + 3}">{v:.2f}</text>')
    for x, val in zip(xs, axis_values):
        parts.append(f'<text x="{x - 6}" y="{mt + ph + 14}">{val}</text>')
    parts.append(f'<text x="{ml + pw / 2 - 30}" y="{height - 6}">'
                 f'{escape(axis_name)}</text>')
    parts.append(f'<text x="8" y="{mt + ph / 2}" '
                 f'transform="rotate(-90 8 {mt + ph / 2})">AUC</text>')
    for i, (name, vals) in enumerate(series.items()):
        color = LINE_COLORS[i % len(LINE_COLORS)]
        pts = " ".join(f"{x:.1f},{y_px(v):.1f}" for x, v in zip(xs, vals))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        ly = mt + 14 * i + 8
        parts.append(f'<line x1="{ml + pw + 8}" y1="{ly}" x2="{ml + pw + 28}" '
                     f'y2="{ly}" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{ml + pw + 32}" y="{ly + 3}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
