"""Minimal dependency-free SVG line charts for recall curves."""

from __future__ import annotations

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_line_chart(series: dict, x_label: str, y_label: str, title: str = "",
                   width: int = 640, height: int = 440,
                   y_range: tuple = (0.0, 1.0)) -> str:
    """series maps a legend name to (xs, ys). Returns the SVG document."""
    margin = 60
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin
    xs_all = [x for xs, _ in series.values() for x in xs]
    if not xs_all:
        raise ValueError("nothing to plot")
    x_lo, x_hi = min(xs_all), max(xs_all)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    y_lo, y_hi = y_range

    def px(x: float) -> float:
        return margin + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y: float) -> float:
        return height - margin - (y - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" '
        f'font-size="15">{title}</text>',
    ]
    # axes and gridlines
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = y_lo + frac * (y_hi - y_lo)
        parts.append(f'<line x1="{margin}" y1="{py(y):.1f}" x2="{width - margin}" '
                     f'y2="{py(y):.1f}" stroke="#dddddd"/>')
        parts.append(f'<text x="{margin - 8}" y="{py(y) + 4:.1f}" '
                     f'text-anchor="end">{y:.2f}</text>')
        x = x_lo + frac * (x_hi - x_lo)
        parts.append(f'<text x="{px(x):.1f}" y="{height - margin + 18}" '
                     f'text-anchor="middle">{x:g}</text>')
    parts.append(f'<line x1="{margin}" y1="{py(y_lo):.1f}" x2="{width - margin}" '
                 f'y2="{py(y_lo):.1f}" stroke="black"/>')
    parts.append(f'<line x1="{margin}" y1="{py(y_lo):.1f}" x2="{margin}" '
                 f'y2="{py(y_hi):.1f}" stroke="black"/>')
    parts.append(f'<text x="{width / 2:.0f}" y="{height - 12}" '
                 f'text-anchor="middle">{x_label}</text>')
    parts.append(f'<text x="16" y="{height / 2:.0f}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {height / 2:.0f})">{y_label}</text>')

    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        points = " ".join(f"{px(float(x)):.1f},{py(float(y)):.1f}"
                          for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{points}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        ly = margin + 16 * i
        parts.append(f'<line x1="{width - margin - 130}" y1="{ly}" '
                     f'x2="{width - margin - 105}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - margin - 100}" y="{ly + 4}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
