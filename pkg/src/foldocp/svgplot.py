"""Minimal self-contained SVG line charts.

Everything is emitted directly as polyline/line/text primitives so the
figures open in any viewer with no renderer or font dependency beyond a
generic sans-serif. Output is deterministic: fixed formatting, no
timestamps.
"""

import numpy as np

_PALETTE = ("#1f6fb2", "#d95f02", "#2a9d54", "#b03a9c", "#708090", "#a08020")

_WIDTH, _HEIGHT = 720, 440
_ML, _MR, _MT, _MB = 74, 18, 40, 56  # plot-box margins


def _fmt(value):
    # fixed decimals keep files byte-stable; trailing zeros are harmless
    return f"{value:.2f}"


def _nice_step(span, target=6):
    """Tick spacing of the form {1,2,5} * 10^k giving about `target` ticks."""
    if span <= 0.0:
        return 1.0
    raw = span / target
    mag = 10.0 ** np.floor(np.log10(raw))
    for mult in (1.0, 2.0, 5.0, 10.0):
        if mult * mag >= raw:
            return mult * mag
    return 10.0 * mag


def _ticks(lo, hi):
    step = _nice_step(hi - lo)
    first = np.ceil(lo / step) * step
    vals = np.arange(first, hi + 0.5 * step, step)
    return [0.0 if abs(v) < 1e-12 * step else float(v) for v in vals]


def _tick_label(value):
    text = f"{value:.6g}"
    return text


def line_chart(series, title, xlabel, ylabel):
    """Render (label, x, y[, dashed]) series to SVG text.

    Axis limits cover all finite data with a small pad; degenerate ranges
    are widened so a constant trace still draws mid-plot.
    """
    cleaned = []
    for entry in series:
        label, x, y = entry[0], np.asarray(entry[1], float), np.asarray(entry[2], float)
        dashed = bool(entry[3]) if len(entry) > 3 else False
        keep = np.isfinite(x) & np.isfinite(y)
        cleaned.append((label, x[keep], y[keep], dashed))
    xs = np.concatenate([c[1] for c in cleaned]) if cleaned else np.zeros(1)
    ys = np.concatenate([c[2] for c in cleaned]) if cleaned else np.zeros(1)
    if xs.size == 0:
        xs, ys = np.zeros(1), np.zeros(1)
    x_lo, x_hi = float(xs.min()), float(xs.max())
    y_lo, y_hi = float(ys.min()), float(ys.max())
    if x_hi - x_lo <= 0.0:
        x_lo, x_hi = x_lo - 1.0, x_hi + 1.0
    pad = 0.05 * (y_hi - y_lo)
    if pad <= 0.0:
        pad = max(1.0, abs(y_hi)) * 0.1
    y_lo, y_hi = y_lo - pad, y_hi + pad

    box_w = _WIDTH - _ML - _MR
    box_h = _HEIGHT - _MT - _MB

    def sx(v):
        return _ML + (v - x_lo) / (x_hi - x_lo) * box_w

    def sy(v):
        return _MT + (y_hi - v) / (y_hi - y_lo) * box_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" '
        f'height="{_HEIGHT}" viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<text x="{_WIDTH // 2}" y="24" font-family="sans-serif" '
        f'font-size="15" text-anchor="middle">{title}</text>',
    ]
    for v in _ticks(x_lo, x_hi):
        px = _fmt(sx(v))
        out.append(
            f'<line x1="{px}" y1="{_fmt(_MT)}" x2="{px}" '
            f'y2="{_fmt(_MT + box_h)}" stroke="#dddddd" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{px}" y="{_fmt(_MT + box_h + 18)}" font-family="sans-serif" '
            f'font-size="11" text-anchor="middle">{_tick_label(v)}</text>'
        )
    for v in _ticks(y_lo, y_hi):
        py = _fmt(sy(v))
        out.append(
            f'<line x1="{_fmt(_ML)}" y1="{py}" x2="{_fmt(_ML + box_w)}" '
            f'y2="{py}" stroke="#dddddd" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{_fmt(_ML - 6)}" y="{py}" font-family="sans-serif" '
            f'font-size="11" text-anchor="end" dominant-baseline="middle">'
            f"{_tick_label(v)}</text>"
        )
    out.append(
        f'<rect x="{_ML}" y="{_MT}" width="{box_w}" height="{box_h}" '
        f'fill="none" stroke="#333333" stroke-width="1"/>'
    )
    out.append(
        f'<text x="{_ML + box_w // 2}" y="{_HEIGHT - 14}" font-family="sans-serif" '
        f'font-size="12" text-anchor="middle">{xlabel}</text>'
    )
    out.append(
        f'<text x="18" y="{_MT + box_h // 2}" font-family="sans-serif" '
        f'font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 18 {_MT + box_h // 2})">{ylabel}</text>'
    )
    for i, (label, x, y, dashed) in enumerate(cleaned):
        color = _PALETTE[i % len(_PALETTE)]
        points = " ".join(f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(x, y))
        dash = ' stroke-dasharray="6 4"' if dashed else ""
        out.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" '
            f'stroke-width="1.5"{dash}/>'
        )
        ly = _MT + 16 + 16 * i
        out.append(
            f'<line x1="{_ML + box_w - 130}" y1="{ly - 4}" x2="{_ML + box_w - 104}" '
            f'y2="{ly - 4}" stroke="{color}" stroke-width="1.5"{dash}/>'
        )
        out.append(
            f'<text x="{_ML + box_w - 98}" y="{ly}" font-family="sans-serif" '
            f'font-size="11">{label}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
