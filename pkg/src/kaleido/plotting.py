"""Self-contained SVG emitters for experiment figures.

Two figure kinds: mode-colored scatter with per-mode mean markers, and
multi-series line charts (metric vs guidance). Output is plain SVG text
assembled with fixed-precision coordinates so identical input produces
byte-identical files.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .validation import as_float_array

WIDTH = 640
HEIGHT = 480
MARGIN_LEFT = 64
MARGIN_RIGHT = 150   # legend column
MARGIN_TOP = 40
MARGIN_BOTTOM = 52

# Okabe-Ito palette: distinguishable under common color-vision deficiencies
PALETTE = ("#0072B2", "#D55E00", "#009E73", "#CC79A7",
           "#E69F00", "#56B4E9", "#F0E442", "#000000")


def _fmt(v: float) -> str:
    """Fixed-precision coordinate; keeps output bytes deterministic."""
    return f"{v:.3f}"


def _check_series_values(name, arr):
    arr = as_float_array(arr, name)
    if arr.size == 0:
        raise ContractError(f"empty series {name!r}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"non-finite coordinate in series {name!r}")
    return arr


def _axes_window():
    x0 = MARGIN_LEFT
    y0 = MARGIN_TOP
    x1 = WIDTH - MARGIN_RIGHT
    y1 = HEIGHT - MARGIN_BOTTOM
    return x0, y0, x1, y1


def _data_range(lo: float, hi: float) -> tuple[float, float]:
    if hi <= lo:
        pad = 1.0 if lo == 0 else abs(lo) * 0.1
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.06
    return lo - pad, hi + pad


class _Mapper:
    """Affine data-to-pixel map for one axis window."""

    def __init__(self, xlim, ylim):
        self.xlim = xlim
        self.ylim = ylim
        self.px0, self.py0, self.px1, self.py1 = _axes_window()

    def x(self, v: float) -> float:
        lo, hi = self.xlim
        return self.px0 + (v - lo) / (hi - lo) * (self.px1 - self.px0)

    def y(self, v: float) -> float:
        lo, hi = self.ylim
        # SVG y grows downward
        return self.py1 - (v - lo) / (hi - lo) * (self.py1 - self.py0)


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    raw = np.linspace(lo, hi, n)
    return [float(v) for v in raw]


def _svg_header(title: str) -> list[str]:
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="15">{title}</text>',
    ]
    return parts


def _axes_frame(mapper: _Mapper, xlabel: str, ylabel: str) -> list[str]:
    x0, y0, x1, y1 = _axes_window()
    parts = [f'<rect x="{x0}" y="{y0}" width="{x1 - x0}" height="{y1 - y0}" '
             f'fill="none" stroke="#333333" stroke-width="1"/>']
    for tx in _ticks(*mapper.xlim):
        px = mapper.x(tx)
        parts.append(f'<line x1="{_fmt(px)}" y1="{y1}" x2="{_fmt(px)}" y2="{y1 + 5}" '
                     f'stroke="#333333" stroke-width="1"/>')
        parts.append(f'<text x="{_fmt(px)}" y="{y1 + 18}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="11">{tx:g}</text>')
    for ty in _ticks(*mapper.ylim):
        py = mapper.y(ty)
        parts.append(f'<line x1="{x0 - 5}" y1="{_fmt(py)}" x2="{x0}" y2="{_fmt(py)}" '
                     f'stroke="#333333" stroke-width="1"/>')
        parts.append(f'<text x="{x0 - 8}" y="{_fmt(py + 4)}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{ty:g}</text>')
    parts.append(f'<text x="{(x0 + x1) // 2}" y="{HEIGHT - 12}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="13">{xlabel}</text>')
    parts.append(f'<text x="18" y="{(y0 + y1) // 2}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="13" '
                 f'transform="rotate(-90 18 {(y0 + y1) // 2})">{ylabel}</text>')
    return parts


def _legend(entries: list[tuple[str, str]], marker: str) -> list[str]:
    x0, y0, x1, _ = _axes_window()
    lx = x1 + 14
    parts = []
    for i, (label, color) in enumerate(entries):
        ly = y0 + 14 + i * 20
        if marker == "circle":
            parts.append(f'<circle cx="{lx + 6}" cy="{ly}" r="4" fill="{color}"/>')
        else:
            parts.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 14}" y2="{ly}" '
                         f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 20}" y="{ly + 4}" font-family="sans-serif" '
                     f'font-size="12">{label}</text>')
    return parts


def scatter_svg(groups: dict[str, np.ndarray], title: str = "",
                xlabel: str = "x", ylabel: str = "y") -> str:
    """Mode-colored 2D scatter; crosses mark each group's mean.

    groups maps label -> [n, 2] points. Groups render in sorted label
    order with a stable palette so the same input always yields the
    same bytes.
    """
    if not groups:
        raise ContractError("scatter needs at least one group")
    labels = sorted(groups)
    cleaned = {}
    for label in labels:
        pts = _check_series_values(f"group {label}", groups[label])
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ContractError(f"group {label!r} must be [n, 2], got {pts.shape}")
        cleaned[label] = pts
    allpts = np.vstack(list(cleaned.values()))
    xlim = _data_range(float(allpts[:, 0].min()), float(allpts[:, 0].max()))
    ylim = _data_range(float(allpts[:, 1].min()), float(allpts[:, 1].max()))
    mapper = _Mapper(xlim, ylim)
    parts = _svg_header(title)
    parts += _axes_frame(mapper, xlabel, ylabel)
    entries = []
    for i, label in enumerate(labels):
        color = PALETTE[i % len(PALETTE)]
        entries.append((label, color))
        for px, py in cleaned[label]:
            parts.append(f'<circle cx="{_fmt(mapper.x(px))}" cy="{_fmt(mapper.y(py))}" '
                         f'r="2" fill="{color}" fill-opacity="0.5"/>')
    # mean markers drawn above the clouds
    for i, label in enumerate(labels):
        color = PALETTE[i % len(PALETTE)]
        mx, my = cleaned[label].mean(axis=0)
        cx, cy = mapper.x(mx), mapper.y(my)
        parts.append(f'<path d="M {_fmt(cx - 6)} {_fmt(cy)} H {_fmt(cx + 6)} '
                     f'M {_fmt(cx)} {_fmt(cy - 6)} V {_fmt(cy + 6)}" '
                     f'stroke="black" stroke-width="2.5"/>')
        parts.append(f'<path d="M {_fmt(cx - 6)} {_fmt(cy)} H {_fmt(cx + 6)} '
                     f'M {_fmt(cx)} {_fmt(cy - 6)} V {_fmt(cy + 6)}" '
                     f'stroke="{color}" stroke-width="1.5"/>')
    parts += _legend(entries, "circle")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def line_svg(series: dict[str, tuple[np.ndarray, np.ndarray]], title: str = "",
             xlabel: str = "x", ylabel: str = "y") -> str:
    """Multi-series line chart with markers, axis labels, and a legend."""
    if not series:
        raise ContractError("line plot needs at least one series")
    labels = sorted(series)
    cleaned = {}
    for label in labels:
        xs, ys = series[label]
        xs = _check_series_values(f"series {label} x", xs).ravel()
        ys = _check_series_values(f"series {label} y", ys).ravel()
        if xs.shape != ys.shape:
            raise ContractError(f"series {label!r} x/y length mismatch")
        cleaned[label] = (xs, ys)
    all_x = np.concatenate([v[0] for v in cleaned.values()])
    all_y = np.concatenate([v[1] for v in cleaned.values()])
    xlim = _data_range(float(all_x.min()), float(all_x.max()))
    ylim = _data_range(float(all_y.min()), float(all_y.max()))
    mapper = _Mapper(xlim, ylim)
    parts = _svg_header(title)
    parts += _axes_frame(mapper, xlabel, ylabel)
    entries = []
    for i, label in enumerate(labels):
        color = PALETTE[i % len(PALETTE)]
        entries.append((label, color))
        xs, ys = cleaned[label]
        coords = [f"{_fmt(mapper.x(x))},{_fmt(mapper.y(y))}" for x, y in zip(xs, ys)]
        parts.append(f'<polyline points="{" ".join(coords)}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            parts.append(f'<circle cx="{_fmt(mapper.x(x))}" cy="{_fmt(mapper.y(y))}" '
                         f'r="3.5" fill="{color}"/>')
    parts += _legend(entries, "line")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_plot(data, kind: str, out_path, title: str = "",
              xlabel: str = "x", ylabel: str = "y") -> None:
    """Render `data` per `kind` ('scatter' | 'line') and write atomically."""
    from .validation import atomic_write_text

    if kind == "scatter":
        text = scatter_svg(data, title=title, xlabel=xlabel, ylabel=ylabel)
    elif kind == "line":
        text = line_svg(data, title=title, xlabel=xlabel, ylabel=ylabel)
    else:
        raise ContractError(f"unknown plot kind {kind!r}")
    atomic_write_text(out_path, text)
