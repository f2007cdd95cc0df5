"""Minimal SVG line plots for curve CSVs.

The output is plain text built from fixed-precision numbers, so the same
CSV always renders to the same bytes.
"""

from __future__ import annotations

from pathlib import Path

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")
WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=150, top=30, bottom=55)


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = (hi - lo) / n
    return [lo + j * step for j in range(n + 1)]


def _range(vals):
    lo, hi = min(vals), max(vals)
    if hi == lo:
        pad = abs(lo) * 0.05 or 1.0
        return lo - pad, hi + pad
    pad = 0.04 * (hi - lo)
    return lo - pad, hi + pad


def render_svg(series: dict[str, list[tuple[float, float]]], xlabel: str, ylabel: str, title: str = "") -> str:
    """One polyline with markers per series; series are drawn in sorted name order."""
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise ValueError("nothing to plot")
    x0, x1 = _range([p[0] for p in pts])
    y0, y1 = _range([p[1] for p in pts])
    L, R, T, B = MARGIN["left"], MARGIN["right"], MARGIN["top"], MARGIN["bottom"]
    pw, ph = WIDTH - L - R, HEIGHT - T - B

    def sx(x):
        return L + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return T + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for x in _ticks(x0, x1):
        out.append(f'<line x1="{sx(x):.2f}" y1="{T + ph}" x2="{sx(x):.2f}" y2="{T + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{sx(x):.2f}" y="{T + ph + 18}" text-anchor="middle">{x:.4g}</text>')
    for y in _ticks(y0, y1):
        out.append(f'<line x1="{L - 5}" y1="{sy(y):.2f}" x2="{L}" y2="{sy(y):.2f}" stroke="black"/>')
        out.append(f'<text x="{L - 8}" y="{sy(y) + 4:.2f}" text-anchor="end">{y:.4g}</text>')
    out.append(f'<text x="{L + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="16" y="{T + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {T + ph / 2:.2f})">{ylabel}</text>')
    if title:
        out.append(f'<text x="{L + pw / 2:.2f}" y="{T - 10}" text-anchor="middle">{title}</text>')
    for j, name in enumerate(sorted(series)):
        color = PALETTE[j % len(PALETTE)]
        s = sorted(series[name])
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in s)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in s:
            out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.5" fill="{color}"/>')
        ly = T + 14 + 18 * j
        out.append(f'<line x1="{L + pw + 12}" y1="{ly - 4}" x2="{L + pw + 32}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{L + pw + 38}" y="{ly}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def curve_series(rows: list[dict], xkey: str, ykey: str = "mean_quality") -> dict[str, list[tuple[float, float]]]:
    series: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        series.setdefault(r["scheduler"], []).append((float(r[xkey]), float(r[ykey])))
    return series


def plot_curves(rows: list[dict], out_dir) -> list[Path]:
    """Write quality-vs-AKI and quality-vs-FPS plots; returns the written paths."""
    out_dir = Path(out_dir)
    written = []
    for xkey, xlabel, name in (("aki", "average key interval", "curve_aki.svg"),
                               ("sim_fps", "simulated FPS", "curve_fps.svg")):
        path = out_dir / name
        path.write_text(render_svg(curve_series(rows, xkey), xlabel, "mean quality"))
        written.append(path)
    return written
