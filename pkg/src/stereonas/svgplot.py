"""Small self-contained SVG plots (scatter, lines, step lines).

Enough charting for the reporting command without pulling in a
plotting stack: linear or log axes, tick labels, a legend, and a
``<desc>`` element carrying arbitrary provenance text.  Output is
well-formed XML, checked by the tests with a strict parser.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

from .errors import ConfigError

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]

_MARGIN = {"left": 62.0, "right": 16.0, "top": 34.0, "bottom": 46.0}


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list:
    span = hi - lo
    raw = span / max(n - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * span:
        ticks.append(0.0 if abs(t) < step * 1e-9 else t)
        t += step
    return ticks


def _log_ticks(lo: float, hi: float) -> list:
    ticks = [10.0 ** k
             for k in range(math.ceil(math.log10(lo) - 1e-9),
                            math.floor(math.log10(hi) + 1e-9) + 1)]
    return ticks or [lo, hi]


def _fmt(v: float) -> str:
    if v != 0.0 and (abs(v) >= 1e5 or abs(v) < 1e-3):
        return f"{v:.1e}"
    return f"{v:g}"


class Figure:
    """One chart; add series, then render with to_svg()."""

    def __init__(self, width: int = 640, height: int = 420, title: str = "",
                 xlabel: str = "", ylabel: str = "",
                 x_log: bool = False, y_log: bool = False, desc: str = ""):
        self.width = width
        self.height = height
        self.title = title
        self.xlabel = xlabel
        self.ylabel = ylabel
        self.x_log = x_log
        self.y_log = y_log
        self.desc = desc
        self._series = []

    def scatter(self, xs, ys, color: str = PALETTE[0], radius: float = 3.0,
                label: str | None = None):
        self._add("scatter", xs, ys, color, label, radius=radius)

    def line(self, xs, ys, color: str = PALETTE[3], width: float = 1.5,
             label: str | None = None, step: bool = False):
        self._add("line", xs, ys, color, label, width=width, step=step)

    def _add(self, kind, xs, ys, color, label, **style):
        xs = [float(x) for x in xs]
        ys = [float(y) for y in ys]
        if len(xs) != len(ys):
            raise ConfigError(f"series length mismatch: {len(xs)} vs {len(ys)}")
        for vals, log, axis in ((xs, self.x_log, "x"), (ys, self.y_log, "y")):
            if log and any(v <= 0.0 for v in vals):
                raise ConfigError(f"log {axis}-axis requires positive values")
        self._series.append({"kind": kind, "xs": xs, "ys": ys,
                             "color": color, "label": label, **style})

    def _limits(self, axis: str, log: bool):
        vals = [v for s in self._series for v in s[axis + "s"]]
        if not vals:
            vals = [0.0, 1.0]
        lo, hi = min(vals), max(vals)
        if log:
            if hi / lo < 1.0001:
                lo, hi = lo / 10.0, hi * 10.0
            return lo, hi
        if hi - lo < 1e-12:
            pad = abs(lo) * 0.1 or 1.0
            return lo - pad, hi + pad
        pad = (hi - lo) * 0.05
        return lo - pad, hi + pad

    def to_svg(self) -> str:
        x_lo, x_hi = self._limits("x", self.x_log)
        y_lo, y_hi = self._limits("y", self.y_log)
        px_lo = _MARGIN["left"]
        px_hi = self.width - _MARGIN["right"]
        py_lo = self.height - _MARGIN["bottom"]
        py_hi = _MARGIN["top"]

        def sx(v):
            t = (math.log10(v) - math.log10(x_lo)) / \
                (math.log10(x_hi) - math.log10(x_lo)) if self.x_log \
                else (v - x_lo) / (x_hi - x_lo)
            return px_lo + t * (px_hi - px_lo)

        def sy(v):
            t = (math.log10(v) - math.log10(y_lo)) / \
                (math.log10(y_hi) - math.log10(y_lo)) if self.y_log \
                else (v - y_lo) / (y_hi - y_lo)
            return py_lo + t * (py_hi - py_lo)

        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" '
            f'width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}" '
            f'font-family="sans-serif" font-size="11">'
        ]
        if self.desc:
            out.append(f"<desc>{escape(self.desc)}</desc>")
        out.append(f'<rect width="{self.width}" height="{self.height}" '
                   f'fill="white"/>')
        out.append(f'<rect x="{px_lo:.1f}" y="{py_hi:.1f}" '
                   f'width="{px_hi - px_lo:.1f}" height="{py_lo - py_hi:.1f}" '
                   f'fill="none" stroke="#333"/>')

        x_ticks = _log_ticks(x_lo, x_hi) if self.x_log else _nice_ticks(x_lo, x_hi)
        y_ticks = _log_ticks(y_lo, y_hi) if self.y_log else _nice_ticks(y_lo, y_hi)
        for t in x_ticks:
            x = sx(t)
            out.append(f'<line x1="{x:.1f}" y1="{py_lo:.1f}" x2="{x:.1f}" '
                       f'y2="{py_lo + 4:.1f}" stroke="#333"/>')
            out.append(f'<text x="{x:.1f}" y="{py_lo + 16:.1f}" '
                       f'text-anchor="middle">{escape(_fmt(t))}</text>')
        for t in y_ticks:
            y = sy(t)
            out.append(f'<line x1="{px_lo - 4:.1f}" y1="{y:.1f}" '
                       f'x2="{px_lo:.1f}" y2="{y:.1f}" stroke="#333"/>')
            out.append(f'<text x="{px_lo - 7:.1f}" y="{y + 3.5:.1f}" '
                       f'text-anchor="end">{escape(_fmt(t))}</text>')

        if self.title:
            out.append(f'<text x="{self.width / 2:.1f}" y="20" '
                       f'text-anchor="middle" font-size="14">'
                       f"{escape(self.title)}</text>")
        if self.xlabel:
            out.append(f'<text x="{(px_lo + px_hi) / 2:.1f}" '
                       f'y="{self.height - 10:.1f}" text-anchor="middle">'
                       f"{escape(self.xlabel)}</text>")
        if self.ylabel:
            cx, cy = 16.0, (py_lo + py_hi) / 2
            out.append(f'<text x="{cx:.1f}" y="{cy:.1f}" text-anchor="middle" '
                       f'transform="rotate(-90 {cx:.1f} {cy:.1f})">'
                       f"{escape(self.ylabel)}</text>")

        for s in self._series:
            pts = [(sx(x), sy(y)) for x, y in zip(s["xs"], s["ys"])]
            if s["kind"] == "scatter":
                for x, y in pts:
                    out.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" '
                               f'r="{s["radius"]}" fill="{s["color"]}" '
                               f'fill-opacity="0.75"/>')
            else:
                coords = []
                for i, (x, y) in enumerate(pts):
                    if s["step"] and i > 0:
                        coords.append(f"{x:.1f},{coords[-1].split(',')[1]}")
                    coords.append(f"{x:.1f},{y:.1f}")
                out.append(f'<polyline points="{" ".join(coords)}" '
                           f'fill="none" stroke="{s["color"]}" '
                           f'stroke-width="{s["width"]}"/>')

        labeled = [s for s in self._series if s["label"]]
        for i, s in enumerate(labeled):
            lx = px_hi - 130.0
            ly = py_hi + 14.0 + 16.0 * i
            out.append(f'<rect x="{lx:.1f}" y="{ly - 8:.1f}" width="10" '
                       f'height="10" fill="{s["color"]}"/>')
            out.append(f'<text x="{lx + 15:.1f}" y="{ly + 1:.1f}">'
                       f"{escape(str(s['label']))}</text>")

        out.append("</svg>")
        return "\n".join(out)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_svg())
            fh.write("\n")
