"""Plain-SVG rendering of a signal with one relevance strip per statistic.

Each strip is MinMax-normalised on its own to [0, 1] and coloured with a
fixed ten-stop ramp sampled from viridis, linearly interpolated in RGB.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

VIRIDIS_STOPS = (
    "#440154", "#482878", "#3e4989", "#31688e", "#26828e",
    "#1f9e89", "#35b779", "#6ece58", "#b5de2b", "#fde725",
)


def minmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def _rgb(hexcode):
    return np.array([int(hexcode[i : i + 2], 16) for i in (1, 3, 5)], dtype=np.float64)


_STOPS_RGB = np.stack([_rgb(h) for h in VIRIDIS_STOPS])


def colour(u: float) -> str:
    """Hex colour for ``u`` in [0, 1]."""
    u = float(np.clip(u, 0.0, 1.0)) * (len(_STOPS_RGB) - 1)
    i = min(int(u), len(_STOPS_RGB) - 2)
    c = _STOPS_RGB[i] + (u - i) * (_STOPS_RGB[i + 1] - _STOPS_RGB[i])
    return "#{:02x}{:02x}{:02x}".format(*np.rint(c).astype(int))


def render(signal, strips: dict, *, width=800, trace_height=120, strip_height=24, title="") -> str:
    """SVG document: the signal trace on top, then one labelled strip per entry."""
    x = np.asarray(signal, dtype=np.float64)
    n = len(x)
    label_w = 60
    plot_w = width - label_w
    top = 20 if title else 4
    h = top + trace_height + len(strips) * (strip_height + 4) + 4
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h}" viewBox="0 0 {width} {h}">']
    if title:
        out.append(f'<text x="4" y="14" font-size="12" font-family="sans-serif">{escape(title)}</text>')
    span = np.abs(x).max() or 1.0
    xs = label_w + np.arange(n) * plot_w / max(n - 1, 1)
    ys = top + trace_height / 2 - x / span * (trace_height / 2 - 2)
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xs, ys))
    out.append(f'<polyline fill="none" stroke="black" stroke-width="1" points="{pts}"/>')
    cell = plot_w / n
    y0 = top + trace_height + 4
    for name, vec in strips.items():
        vec = np.asarray(vec, dtype=np.float64)
        if len(vec) != n:
            raise ValueError(f"strip {name!r} has length {len(vec)}, signal has {n}")
        out.append(f'<text x="2" y="{y0 + strip_height * 0.7:.1f}" font-size="11" '
                   f'font-family="sans-serif">{escape(str(name))}</text>')
        for i, u in enumerate(minmax(vec)):
            out.append(f'<rect x="{label_w + i * cell:.3f}" y="{y0}" width="{cell + 0.05:.3f}" '
                       f'height="{strip_height}" fill="{colour(u)}"/>')
        y0 += strip_height + 4
    out.append("</svg>")
    return "\n".join(out) + "\n"
