"""Plain SVG charts: loss curves, per-variant bars and per-ray pmf overlays."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")
W, H, PAD = 480, 300, 45


def _frame(title, body, xlabel="", ylabel=""):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">\n'
            f'<rect width="{W}" height="{H}" fill="white"/>\n'
            f'<text x="{W / 2}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>\n'
            f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - 10}" y2="{H - PAD}" stroke="black"/>\n'
            f'<line x1="{PAD}" y1="25" x2="{PAD}" y2="{H - PAD}" stroke="black"/>\n'
            f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle">{escape(xlabel)}</text>\n'
            f'<text x="12" y="{H / 2}" transform="rotate(-90 12 {H / 2})" text-anchor="middle">{escape(ylabel)}</text>\n'
            f"{body}</svg>\n")


def _scale(lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (np.asarray(v, dtype=float) - lo) / span * (b - a)


def _ticks(lo, hi, sx_or_sy, vertical, fmt="{:.3g}"):
    out = []
    for v in np.linspace(lo, hi, 5):
        p = float(sx_or_sy(v))
        if vertical:
            out.append(f'<text x="{PAD - 4}" y="{p + 4:.1f}" text-anchor="end">{fmt.format(v)}</text>')
        else:
            out.append(f'<text x="{p:.1f}" y="{H - PAD + 14}" text-anchor="middle">{fmt.format(v)}</text>')
    return "\n".join(out) + "\n"


def line_chart(series, title="", xlabel="", ylabel="", logy=False):
    """``series`` maps a label to ``(x, y)`` arrays."""
    xs = np.concatenate([np.asarray(x, dtype=float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, dtype=float) for _, y in series.values()])
    if logy:
        ys = np.log10(np.maximum(ys, 1e-12))
    sx = _scale(xs.min(), xs.max(), PAD, W - 10)
    sy = _scale(ys.min(), ys.max(), H - PAD, 25)
    body = _ticks(xs.min(), xs.max(), sx, False) + _ticks(ys.min(), ys.max(), sy, True,
                                                          "1e{:.1f}" if logy else "{:.3g}")
    for i, (label, (x, y)) in enumerate(series.items()):
        y = np.log10(np.maximum(np.asarray(y, dtype=float), 1e-12)) if logy else np.asarray(y, dtype=float)
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(sx(x), sy(y)))
        c = COLORS[i % len(COLORS)]
        body += f'<polyline fill="none" stroke="{c}" stroke-width="1.2" points="{pts}"/>\n'
        body += f'<text x="{W - 15}" y="{30 + 13 * i}" text-anchor="end" fill="{c}">{escape(label)}</text>\n'
    return _frame(title, body, xlabel, ylabel)


def bar_chart(labels, values, errors=None, title="", ylabel=""):
    values = np.asarray(values, dtype=float)
    errors = np.zeros_like(values) if errors is None else np.asarray(errors, dtype=float)
    finite = values[np.isfinite(values)]
    lo = min(0.0, float(np.min(finite - 0))) if finite.size else 0.0
    hi = float(np.max(finite + errors[np.isfinite(values)])) if finite.size else 1.0
    sy = _scale(lo, hi * 1.05, H - PAD, 25)
    slot = (W - PAD - 10) / max(1, len(labels))
    body = _ticks(lo, hi * 1.05, sy, True)
    for i, (lab, v, e) in enumerate(zip(labels, values, errors)):
        x = PAD + slot * i + slot * 0.15
        if np.isfinite(v):
            top = float(sy(v))
            body += (f'<rect x="{x:.1f}" y="{top:.1f}" width="{slot * 0.7:.1f}" height="{H - PAD - top:.1f}" '
                     f'fill="{COLORS[i % len(COLORS)]}"/>\n')
            if e > 0:
                cx = x + slot * 0.35
                body += f'<line x1="{cx:.1f}" y1="{float(sy(v - e)):.1f}" x2="{cx:.1f}" y2="{float(sy(v + e)):.1f}" stroke="black"/>\n'
            body += f'<text x="{x + slot * 0.35:.1f}" y="{top - 3:.1f}" text-anchor="middle">{v:.2f}</text>\n'
        body += f'<text x="{x + slot * 0.35:.1f}" y="{H - PAD + 14}" text-anchor="middle">{escape(str(lab))}</text>\n'
    return _frame(title, body, "", ylabel)


def pmf_overlay(t_learned, p_learned, true_t, true_p, title="termination pmf"):
    """Learned pmf as a polyline, true masses as stems."""
    t_all = np.concatenate([t_learned, true_t])
    sx = _scale(t_all.min(), t_all.max(), PAD, W - 10)
    sy = _scale(0.0, max(1e-9, float(np.max(np.concatenate([p_learned, true_p])))), H - PAD, 25)
    body = _ticks(t_all.min(), t_all.max(), sx, False) + _ticks(0.0, float(np.max(np.concatenate([p_learned, true_p]))), sy, True)
    pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(sx(t_learned), sy(p_learned)))
    body += f'<polyline fill="none" stroke="{COLORS[0]}" stroke-width="1.5" points="{pts}"/>\n'
    for t, p in zip(true_t, true_p):
        if p > 0:
            body += (f'<line x1="{float(sx(t)):.1f}" y1="{H - PAD}" x2="{float(sx(t)):.1f}" y2="{float(sy(p)):.1f}" '
                     f'stroke="{COLORS[1]}" stroke-width="3"/>\n')
    body += f'<text x="{W - 15}" y="30" text-anchor="end" fill="{COLORS[0]}">learned</text>\n'
    body += f'<text x="{W - 15}" y="43" text-anchor="end" fill="{COLORS[1]}">analytic</text>\n'
    return _frame(title, body, "t", "mass")


def write(path, svg):
    with open(path, "w") as fh:
        fh.write(svg)
