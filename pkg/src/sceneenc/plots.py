"""Self-contained SVG plots: loss curves and ablation bars."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
W, H, PAD = 640, 360, 48


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _frame(title: str, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">')
    return "\n".join([head, f'<rect width="{W}" height="{H}" fill="white"/>',
                      f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
                      *body, "</svg>", ""])


def line_chart(series: dict[str, list[float]], title: str = "", xlabel: str = "epoch") -> str:
    """One polyline per named series, sharing axes. Non-finite points are skipped."""
    values = [v for ys in series.values() for v in ys if v is not None and math.isfinite(v)]
    n = max((len(ys) for ys in series.values()), default=0)
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    x0, x1, y0, y1 = PAD, W - 150, H - PAD, PAD

    def sx(i):
        return x0 + (x1 - x0) * (i / max(n - 1, 1))

    def sy(v):
        return y0 - (y0 - y1) * (v - lo) / (hi - lo)

    body = [f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
            f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
            f'<text x="{(x0 + x1) / 2}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="{x0 - 4}" y="{y0}" text-anchor="end">{lo:.3g}</text>',
            f'<text x="{x0 - 4}" y="{y1 + 4}" text-anchor="end">{hi:.3g}</text>']
    for s, (name, ys) in enumerate(series.items()):
        color = COLORS[s % len(COLORS)]
        pts = [f"{_fmt(sx(i))},{_fmt(sy(v))}" for i, v in enumerate(ys) if v is not None and math.isfinite(v)]
        if pts:
            body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>')
        body.append(f'<rect x="{x1 + 12}" y="{y1 + 16 * s}" width="10" height="10" fill="{color}"/>')
        body.append(f'<text x="{x1 + 28}" y="{y1 + 16 * s + 9}">{escape(name)}</text>')
    return _frame(title, body)


def bar_chart(labels: list[str], means: list[float], stds: list[float], title: str = "",
              ylabel: str = "mIoU") -> str:
    """Bars with one-standard-deviation whiskers, axis starting at zero."""
    top = max([m + s for m, s in zip(means, stds)] + [1e-9])
    x0, x1, y0, y1 = PAD, W - PAD, H - PAD - 20, PAD

    def sy(v):
        return y0 - (y0 - y1) * v / top

    slot = (x1 - x0) / max(len(labels), 1)
    body = [f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
            f'<text x="14" y="{(y0 + y1) / 2}" transform="rotate(-90 14 {(y0 + y1) / 2})" '
            f'text-anchor="middle">{escape(ylabel)}</text>']
    for i, (name, m, s) in enumerate(zip(labels, means, stds)):
        cx = x0 + slot * (i + 0.5)
        bw = slot * 0.6
        body.append(f'<rect x="{_fmt(cx - bw / 2)}" y="{_fmt(sy(m))}" width="{_fmt(bw)}" '
                    f'height="{_fmt(y0 - sy(m))}" fill="{COLORS[i % len(COLORS)]}"/>')
        body.append(f'<line x1="{_fmt(cx)}" y1="{_fmt(sy(m - s))}" x2="{_fmt(cx)}" y2="{_fmt(sy(m + s))}" '
                    f'stroke="black"/>')
        body.append(f'<text x="{_fmt(cx)}" y="{_fmt(sy(m + s) - 4)}" text-anchor="middle">{m:.3f}</text>')
        body.append(f'<text x="{_fmt(cx)}" y="{y0 + 16}" text-anchor="middle">{escape(name)}</text>')
    return _frame(title, body)
